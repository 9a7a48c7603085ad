//! Central finite-difference check of the analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Element, ElementType, Tensor};

use super::layers::LayerSpec;
use super::network::{backward_from_logit_grad, forward, logits_from, Batch, Objective};

/// Denominator floor of the relative error.
pub const FLOOR_GUARD: f64 = 1e-8;
/// Upper bound on sampled weight coordinates (biases are always all checked).
pub const MAX_WEIGHT_COORDS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat index into the concatenation of all parameter tensors.
    pub worst_param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` probe changed the sign of some ReLU input.
    /// The central difference straddles a kink there.
    pub kinked: usize,
    /// Maximum relative error over the coordinates that are not kinked.
    pub max_rel_err_smooth: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(FLOOR_GUARD);
    (analytic - numeric).abs() / denom
}

/// Flat coordinates to probe: every bias entry, plus at most
/// [`MAX_WEIGHT_COORDS`] weight entries at an even stride.
pub fn sample_coordinates(specs: &[LayerSpec], params_len: &[usize]) -> Vec<usize> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut offset = 0;
    let mut k = 0;
    for _ in specs.iter().filter(|s| s.has_params()) {
        weights.extend(offset..offset + params_len[k]);
        offset += params_len[k];
        biases.extend(offset..offset + params_len[k + 1]);
        offset += params_len[k + 1];
        k += 2;
    }
    let chosen: Vec<usize> = if weights.len() <= MAX_WEIGHT_COORDS {
        weights
    } else {
        (0..MAX_WEIGHT_COORDS)
            .map(|i| weights[i * weights.len() / MAX_WEIGHT_COORDS])
            .collect()
    };
    let mut coords: Vec<usize> = chosen.into_iter().chain(biases).collect();
    coords.sort_unstable();
    coords
}

fn locate<T: Element>(params: &[Tensor<T>], mut flat: usize) -> (usize, usize) {
    for (i, t) in params.iter().enumerate() {
        let n = t.dims().iter().product::<usize>();
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    panic!("flat index out of range")
}

pub fn grad_check<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    batch: &Batch<T>,
    eps: f64,
) -> Result<GradReport> {
    grad_check_with(specs, params, batch, eps, Objective::SoftmaxCrossEntropy)
}

pub fn grad_check_with<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    batch: &Batch<T>,
    eps: f64,
    objective: Objective<'_, T>,
) -> Result<GradReport> {
    if T::TYPE != ElementType::F64 {
        return Err(Error::Precision(
            "gradient checking requires 64-bit elements".into(),
        ));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Numeric(format!("eps {eps} must be positive")));
    }
    let (logits, cache) = forward(specs, params, batch)?;
    let (_, dlogits) = objective.eval(&logits, &batch.labels)?;
    let analytic = backward_from_logit_grad(specs, params, &cache, &dlogits)?;
    let lens: Vec<usize> = params.iter().map(Tensor::len).collect();
    let coords = sample_coordinates(specs, &lens);
    // Layer owning each parameter tensor; only that layer and its successors
    // need recomputing after a perturbation.
    let owner: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_params())
        .flat_map(|(i, _)| [i, i])
        .collect();
    let loss_at = |work: &[Tensor<T>], start: usize| -> Result<(f64, bool)> {
        let (logits, flipped) = logits_from(specs, work, &cache, start)?;
        Ok((objective.eval(&logits, &batch.labels)?.0.to_f64(), flipped))
    };

    let mut work = params.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        kinked: 0,
        max_rel_err_smooth: 0.0,
    };
    let mut first = true;
    for &flat in &coords {
        let (ti, ei) = locate(params, flat);
        let orig = params[ti].data()[ei];
        work[ti].data_mut()[ei] = T::from_f64(orig.to_f64() + eps);
        let (plus, kink_up) = loss_at(&work, owner[ti])?;
        work[ti].data_mut()[ei] = T::from_f64(orig.to_f64() - eps);
        let (minus, kink_down) = loss_at(&work, owner[ti])?;
        work[ti].data_mut()[ei] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[ti].data()[ei].to_f64();
        let err = relative_error(a, numeric);
        if kink_up || kink_down {
            report.kinked += 1;
        } else {
            report.max_rel_err_smooth = report.max_rel_err_smooth.max(err);
        }
        if first || err > report.max_rel_err {
            first = false;
            report.max_rel_err = err;
            report.worst_param_index = flat;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn refuses_f32() {
        let specs = vec![LayerSpec::Flatten, LayerSpec::dense(1, 2)];
        let params = vec![Tensor::<f32>::zeros(&[2, 1]).unwrap(), Tensor::zeros(&[2]).unwrap()];
        let batch = Batch::new(Tensor::zeros(&[1, 1, 1, 1]).unwrap(), vec![0]).unwrap();
        assert!(matches!(
            grad_check(&specs, &params, &batch, 1e-5),
            Err(Error::Precision(_))
        ));
    }

    #[test]
    fn degenerate_zero_model() {
        let specs = vec![LayerSpec::Flatten, LayerSpec::dense(3, 2)];
        let params = vec![Tensor::<f64>::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[2]).unwrap()];
        let batch = Batch::new(Tensor::zeros(&[2, 1, 1, 3]).unwrap(), vec![0, 1]).unwrap();
        // Balanced labels and uniform logits: every gradient entry is exactly zero.
        let r = grad_check(&specs, &params, &batch, 1e-5).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.analytic, 0.0);
        assert_eq!(r.numeric, 0.0);
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn sampling_caps_weights_and_keeps_biases() {
        let specs = vec![LayerSpec::Flatten, LayerSpec::dense(300, 2)];
        let coords = sample_coordinates(&specs, &[600, 2]);
        assert_eq!(coords.len(), MAX_WEIGHT_COORDS + 2);
        assert!(coords.contains(&600) && coords.contains(&601));
    }
}
