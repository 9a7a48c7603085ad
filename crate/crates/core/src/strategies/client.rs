//! Client-side local training for each strategy.

use crate::data::ChunkDataset;
use crate::error::{Error, Result};
use crate::model::{load_base, ParamSet, SplitModel};
use crate::nn::{loss_and_grad, sgd_step_in_place, Objective};
use crate::tensor::{Element, Tensor};

use super::meta::{meta_gradient, GradientFn, NetObjective};
use super::schedule::{MetaSchedule, Schedule};
use super::{ClientUpdate, Hyper};

/// Parameters touched by [`personalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonalizeScope {
    All,
    PersonalOnly,
}

fn require_data<T: Element>(client_id: u32, data: &ChunkDataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::ClientSkipped {
            client_id,
            reason: "no training data".into(),
        });
    }
    Ok(())
}

/// Applies `grads` with step `lr`, restricted to tensors where `mask` is set.
fn apply_step<T: Element>(
    model: &mut SplitModel<T>,
    grads: &[Tensor<T>],
    lr: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    let mut params = model.params().to_vec();
    match mask {
        None => sgd_step_in_place(&mut params, grads, T::from_f64(lr))?,
        Some(mask) => {
            for ((p, g), &on) in params.iter_mut().zip(grads).zip(mask) {
                if on {
                    sgd_step_in_place(std::slice::from_mut(p), std::slice::from_ref(g), T::from_f64(lr))?;
                }
            }
        }
    }
    model.set_params(params)
}

/// Sample-weighted mean of batch losses over the final epoch.
struct EpochLoss {
    sum: f64,
    count: usize,
}

impl EpochLoss {
    fn new() -> Self {
        EpochLoss { sum: 0.0, count: 0 }
    }

    fn add(&mut self, loss: f64, n: usize) {
        self.sum += loss * n as f64;
        self.count += n;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

fn run_sgd<T: Element>(
    model: &mut SplitModel<T>,
    data: &ChunkDataset<T>,
    schedule: &Schedule,
    lr: f64,
) -> Result<f64> {
    let mut last = EpochLoss::new();
    for epoch in &schedule.epochs {
        last = EpochLoss::new();
        for idx in epoch {
            let batch = data.batch(idx)?;
            let (loss, grads) =
                loss_and_grad(model.specs(), model.params(), &batch, Objective::SoftmaxCrossEntropy)?;
            last.add(loss.to_f64(), idx.len());
            apply_step(model, &grads, lr, None)?;
        }
    }
    Ok(last.mean())
}

/// FedAvg local training on an explicit batch schedule.
pub fn client_update_fedavg_with_schedule<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    data: &ChunkDataset<T>,
    lr_local: f64,
    schedule: &Schedule,
) -> Result<ClientUpdate<T>> {
    require_data(client_id, data)?;
    let mut local = model.clone();
    let train_loss = run_sgd(&mut local, data, schedule, lr_local)?;
    Ok(ClientUpdate {
        client_id,
        payload: local.full(),
        num_samples: data.len(),
        train_loss,
    })
}

/// `local_epochs` of seeded mini-batch SGD over every parameter; the payload
/// is the full parameter set.
pub fn client_update_fedavg<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<ClientUpdate<T>> {
    hyper.validate()?;
    let schedule = Schedule::minibatch(data.len(), hyper.batch_size, hyper.local_epochs, seed);
    client_update_fedavg_with_schedule(client_id, model, data, hyper.lr_local, &schedule)
}

pub fn client_update_fedper_with_schedule<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    base_in: &ParamSet<T>,
    data: &ChunkDataset<T>,
    lr_local: f64,
    schedule: &Schedule,
) -> Result<(ClientUpdate<T>, ParamSet<T>)> {
    let mut local = load_base(model, base_in)?;
    require_data(client_id, data)?;
    let train_loss = run_sgd(&mut local, data, schedule, lr_local)?;
    let update = ClientUpdate {
        client_id,
        payload: local.base(),
        num_samples: data.len(),
        train_loss,
    };
    Ok((update, local.personal()))
}

/// Loads the server's base layers under this client's retained head, trains
/// every parameter jointly, and returns the base partition for upload plus
/// the new head to keep locally.
pub fn client_update_fedper<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    base_in: &ParamSet<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<(ClientUpdate<T>, ParamSet<T>)> {
    hyper.validate()?;
    let schedule = Schedule::minibatch(data.len(), hyper.batch_size, hyper.local_epochs, seed);
    client_update_fedper_with_schedule(client_id, model, base_in, data, hyper.lr_local, &schedule)
}

fn meta_schedule_for<T: Element>(
    client_id: u32,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<MetaSchedule> {
    require_data(client_id, data)?;
    if data.len() < 2 * hyper.batch_size {
        return Err(Error::ClientSkipped {
            client_id,
            reason: format!(
                "{} training samples cannot fill a support/query pair of {} each",
                data.len(),
                hyper.batch_size
            ),
        });
    }
    Ok(MetaSchedule::new(data.len(), hyper.batch_size, hyper.local_epochs, seed))
}

pub fn client_update_perfedavg_with_schedule<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    schedule: &MetaSchedule,
) -> Result<ClientUpdate<T>> {
    hyper.validate()?;
    require_data(client_id, data)?;
    let mut local = model.clone();
    let mut last = EpochLoss::new();
    for epoch in &schedule.epochs {
        last = EpochLoss::new();
        for (sup, qry) in epoch {
            let (sb, qb) = (data.batch(sup)?, data.batch(qry)?);
            let s = NetObjective { specs: local.specs(), batch: &sb };
            let q = NetObjective { specs: local.specs(), batch: &qb };
            let (loss, grads) = meta_gradient(&s, &q, local.params(), hyper.lr_meta, hyper.hessian_mode)?;
            last.add(loss, qry.len());
            apply_step(&mut local, &grads, hyper.lr_local, None)?;
        }
    }
    Ok(ClientUpdate {
        client_id,
        payload: local.full(),
        num_samples: data.len(),
        train_loss: last.mean(),
    })
}

/// Per-FedAvg local training: SGD along the meta-gradient over disjoint
/// support/query batches. Skips clients with fewer than `2 * batch_size`
/// training samples.
pub fn client_update_perfedavg<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<ClientUpdate<T>> {
    hyper.validate()?;
    let schedule = meta_schedule_for(client_id, data, hyper, seed)?;
    client_update_perfedavg_with_schedule(client_id, model, data, hyper, &schedule)
}

pub fn client_update_fedmetaper_with_schedule<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    base_in: &ParamSet<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    schedule: &MetaSchedule,
) -> Result<(ClientUpdate<T>, ParamSet<T>)> {
    hyper.validate()?;
    let mut local = load_base(model, base_in)?;
    require_data(client_id, data)?;
    let base_mask = local.base_mask();
    let mut last = EpochLoss::new();
    for epoch in &schedule.epochs {
        last = EpochLoss::new();
        for (sup, qry) in epoch {
            let (sb, qb) = (data.batch(sup)?, data.batch(qry)?);
            let s = NetObjective { specs: local.specs(), batch: &sb };
            let q = NetObjective { specs: local.specs(), batch: &qb };
            let (loss, meta) = meta_gradient(&s, &q, local.params(), hyper.lr_meta, hyper.hessian_mode)?;
            // The head follows the plain query gradient at the current point.
            let plain = if hyper.lr_meta == 0.0 {
                meta.clone()
            } else {
                q.loss_and_grad(local.params())?.1
            };
            let grads: Vec<Tensor<T>> = meta
                .into_iter()
                .zip(plain)
                .zip(&base_mask)
                .map(|((m, p), &is_base)| if is_base { m } else { p })
                .collect();
            last.add(loss, qry.len());
            apply_step(&mut local, &grads, hyper.lr_local, None)?;
        }
    }
    let update = ClientUpdate {
        client_id,
        payload: local.base(),
        num_samples: data.len(),
        train_loss: last.mean(),
    };
    Ok((update, local.personal()))
}

/// FedMeta-Per: base layers follow the meta-gradient, the retained head
/// follows plain SGD on the query batches. Uploads the base partition only.
pub fn client_update_fedmetaper<T: Element>(
    client_id: u32,
    model: &SplitModel<T>,
    base_in: &ParamSet<T>,
    data: &ChunkDataset<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<(ClientUpdate<T>, ParamSet<T>)> {
    hyper.validate()?;
    load_base(model, base_in)?;
    let schedule = meta_schedule_for(client_id, data, hyper, seed)?;
    client_update_fedmetaper_with_schedule(client_id, model, base_in, data, hyper, &schedule)
}

/// `steps` full-batch SGD steps on `data`.
pub fn personalize<T: Element>(
    model: &SplitModel<T>,
    data: &ChunkDataset<T>,
    steps: u32,
    lr: f64,
    scope: PersonalizeScope,
) -> Result<SplitModel<T>> {
    let mut local = model.clone();
    if steps == 0 {
        return Ok(local);
    }
    if data.is_empty() {
        return Err(Error::Split("cannot personalize on an empty dataset".into()));
    }
    let batch = data.full_batch();
    let mask = match scope {
        PersonalizeScope::All => None,
        PersonalizeScope::PersonalOnly => {
            Some(local.base_mask().into_iter().map(|b| !b).collect::<Vec<_>>())
        }
    };
    for _ in 0..steps {
        let (_, grads) =
            loss_and_grad(local.specs(), local.params(), &batch, Objective::SoftmaxCrossEntropy)?;
        apply_step(&mut local, &grads, lr, mask.as_deref())?;
    }
    Ok(local)
}
