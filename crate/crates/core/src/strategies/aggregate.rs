//! Sample-count weighted aggregation.

use crate::error::{Error, Result};
use crate::model::{ParamSet, PartitionTag};
use crate::tensor::{Element, Tensor};

use super::ClientUpdate;

/// `sum_i (n_i / N) * theta_i` per tensor, consuming updates in ascending
/// client id order.
///
/// Evaluated as `theta_0 + sum_i w_i * (theta_i - theta_0)`, which is the same
/// weighted mean but returns `theta_0` bitwise when every payload is
/// identical. Weights are exact `f64` quotients, so scaling every count by a
/// constant leaves the result unchanged.
pub fn aggregate_weighted<T: Element>(updates: &[ClientUpdate<T>]) -> Result<ParamSet<T>> {
    let mut ordered: Vec<&ClientUpdate<T>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = *ordered
        .first()
        .ok_or_else(|| Error::Protocol("cannot aggregate zero updates".into()))?;
    for u in &ordered[1..] {
        if u.payload.tag() != first.payload.tag() {
            return Err(Error::Protocol(format!(
                "client {} sent a {:?} payload, client {} sent {:?}",
                u.client_id,
                u.payload.tag(),
                first.client_id,
                first.payload.tag()
            )));
        }
        if !u.payload.same_layout(&first.payload) {
            return Err(Error::Protocol(format!(
                "client {} payload layout differs from client {}",
                u.client_id, first.client_id
            )));
        }
    }
    if ordered.iter().any(|u| u.num_samples == 0) {
        return Err(Error::Protocol("an update reports zero samples".into()));
    }
    if ordered.len() == 1 {
        return Ok(first.payload.clone());
    }
    let total: u128 = ordered.iter().map(|u| u.num_samples as u128).sum();
    let weights: Vec<T> = ordered
        .iter()
        .map(|u| T::from_f64(u.num_samples as f64 / total as f64))
        .collect();

    let mut entries = Vec::with_capacity(first.payload.len());
    for (k, (name, base)) in first.payload.entries().iter().enumerate() {
        let mut delta = base.zeros_like();
        for (u, &w) in ordered.iter().zip(&weights).skip(1) {
            let theta = &u.payload.entries()[k].1;
            for ((d, &t), &b) in delta.data_mut().iter_mut().zip(theta.data()).zip(base.data()) {
                *d += w * (t - b);
            }
        }
        let data = base
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&b, &d)| if d == T::ZERO { b } else { b + d })
            .collect();
        entries.push((name.clone(), Tensor::new(base.dims().to_vec(), data)?));
    }
    ParamSet::new(first.payload.tag(), entries)
}

/// FedPer server step: aggregates base partitions only.
pub fn server_round_fedper<T: Element>(
    base: &ParamSet<T>,
    updates: &[ClientUpdate<T>],
) -> Result<ParamSet<T>> {
    if base.tag() != PartitionTag::Base {
        return Err(Error::Protocol(format!("server state is {:?}, expected base", base.tag())));
    }
    for u in updates {
        if u.payload.tag() != PartitionTag::Base || !u.payload.same_layout(base) {
            return Err(Error::Protocol(format!(
                "client {} did not send a base partition matching the server",
                u.client_id
            )));
        }
    }
    aggregate_weighted(updates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: u32, v: &[f64], n: usize) -> ClientUpdate<f64> {
        let t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        ClientUpdate {
            client_id: id,
            payload: ParamSet::new(PartitionTag::Base, vec![("1.weight".into(), t)]).unwrap(),
            num_samples: n,
            train_loss: 0.0,
        }
    }

    fn value(set: &ParamSet<f64>) -> f64 {
        set.entries()[0].1.data()[0]
    }

    #[test]
    fn single_update_identity() {
        let u = upd(1, &[-0.0, 1.5], 3);
        assert!(aggregate_weighted(std::slice::from_ref(&u)).unwrap().bit_eq(&u.payload));
    }

    #[test]
    fn equal_and_weighted_means() {
        assert_eq!(value(&aggregate_weighted(&[upd(1, &[2.0], 1), upd(2, &[4.0], 1)]).unwrap()), 3.0);
        assert_eq!(value(&aggregate_weighted(&[upd(1, &[1.0], 1), upd(2, &[3.0], 3)]).unwrap()), 2.5);
    }

    #[test]
    fn table2_totals_as_weights() {
        let us = [upd(1, &[1.0], 668), upd(2, &[2.0], 1960), upd(3, &[3.0], 972)];
        let agg = aggregate_weighted(&us).unwrap();
        assert!((value(&agg) - 7504.0 / 3600.0).abs() <= 1e-12);
    }

    #[test]
    fn order_independent() {
        let a = [upd(1, &[0.3], 5), upd(2, &[0.7], 2), upd(3, &[0.1], 9)];
        let b = [a[2].clone(), a[0].clone(), a[1].clone()];
        assert!(aggregate_weighted(&a).unwrap().bit_eq(&aggregate_weighted(&b).unwrap()));
    }

    #[test]
    fn mixed_tags_rejected() {
        let mut b = upd(2, &[1.0], 1);
        b.payload = ParamSet::new(PartitionTag::Full, b.payload.into_entries()).unwrap();
        assert!(matches!(aggregate_weighted(&[upd(1, &[1.0], 1), b]), Err(Error::Protocol(_))));
        assert!(matches!(aggregate_weighted::<f64>(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn fedper_server_rejects_full_payload() {
        let base = upd(0, &[0.0], 1).payload;
        let mut u = upd(1, &[1.0], 1);
        assert!(server_round_fedper(&base, &[u.clone()]).is_ok());
        u.payload = ParamSet::new(PartitionTag::Full, u.payload.into_entries()).unwrap();
        assert!(server_round_fedper(&base, &[u]).is_err());
    }
}
