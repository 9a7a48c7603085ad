//! Per-FedAvg meta-gradient with an optional finite-difference
//! Hessian-vector correction.

use crate::error::{Error, Result};
use crate::model::SplitModel;
use crate::nn::{loss_and_grad, Batch, LayerSpec, Objective};
use crate::tensor::{Element, ElementType, Tensor};

use super::HessianMode;

/// A differentiable objective over a parameter list.
pub trait GradientFn<T: Element> {
    fn loss_and_grad(&self, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)>;
}

/// Mean cross-entropy of a layer stack on one batch.
pub struct NetObjective<'a, T> {
    pub specs: &'a [LayerSpec],
    pub batch: &'a Batch<T>,
}

impl<T: Element> GradientFn<T> for NetObjective<'_, T> {
    fn loss_and_grad(&self, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        let (loss, grads) = loss_and_grad(self.specs, params, self.batch, Objective::SoftmaxCrossEntropy)?;
        Ok((loss.to_f64(), grads))
    }
}

fn shifted<T: Element>(params: &[Tensor<T>], dir: &[Tensor<T>], scale: f64) -> Result<Vec<Tensor<T>>> {
    let s = T::from_f64(scale);
    params
        .iter()
        .zip(dir)
        .map(|(p, d)| {
            let mut out = p.clone();
            out.axpy(s, d)?;
            Ok(out)
        })
        .collect()
}

/// `H(params) v` by central differences of the gradient:
/// `[g(w + d v) - g(w - d v)] / (2 d)` with `d * ||v||` fixed at `1e-3` for
/// 32-bit and `1e-5` for 64-bit elements.
pub fn hvp_central<T: Element, G: GradientFn<T> + ?Sized>(
    f: &G,
    params: &[Tensor<T>],
    v: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let norm = v.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(v.iter().map(Tensor::zeros_like).collect());
    }
    let delta = match T::TYPE {
        ElementType::F32 => 1e-3 / norm.max(1e-12),
        ElementType::F64 => 1e-5 / norm,
    };
    let (_, g_plus) = f.loss_and_grad(&shifted(params, v, delta)?)?;
    let (_, g_minus) = f.loss_and_grad(&shifted(params, v, -delta)?)?;
    let inv = T::from_f64(1.0 / (2.0 * delta));
    g_plus
        .iter()
        .zip(&g_minus)
        .map(|(a, b)| a.zip_map(b, |x, y| (x - y) * inv))
        .collect()
}

/// Meta-gradient at `params` for step size `alpha`:
///
/// * adapt: `w' = w - alpha * grad f_support(w)`
/// * `FirstOrder`: `grad f_query(w')`
/// * `FullHvp`: `(I - alpha * H_support(w)) grad f_query(w')`
///
/// Returns the query loss at `w'` together with the gradient.
pub fn meta_gradient<T, S, Q>(
    support: &S,
    query: &Q,
    params: &[Tensor<T>],
    alpha: f64,
    mode: HessianMode,
) -> Result<(f64, Vec<Tensor<T>>)>
where
    T: Element,
    S: GradientFn<T> + ?Sized,
    Q: GradientFn<T> + ?Sized,
{
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config("hyper.lr_meta", format!("alpha {alpha} must be finite and >= 0")));
    }
    if alpha == 0.0 {
        return query.loss_and_grad(params);
    }
    let (_, g_support) = support.loss_and_grad(params)?;
    let adapted = shifted(params, &g_support, -alpha)?;
    let (loss, g_query) = query.loss_and_grad(&adapted)?;
    match mode {
        HessianMode::FirstOrder => Ok((loss, g_query)),
        HessianMode::FullHvp => {
            let hv = hvp_central(support, params, &g_query)?;
            let a = T::from_f64(alpha);
            let out = g_query
                .iter()
                .zip(&hv)
                .map(|(g, h)| g.zip_map(h, |x, y| x - a * y))
                .collect::<Result<_>>()?;
            Ok((loss, out))
        }
    }
}

/// [`meta_gradient`] for a model on a support/query batch pair.
pub fn perfedavg_meta_gradient<T: Element>(
    model: &SplitModel<T>,
    support: &Batch<T>,
    query: &Batch<T>,
    alpha: f64,
    mode: HessianMode,
) -> Result<Vec<Tensor<T>>> {
    let s = NetObjective { specs: model.specs(), batch: support };
    let q = NetObjective { specs: model.specs(), batch: query };
    Ok(meta_gradient(&s, &q, model.params(), alpha, mode)?.1)
}
