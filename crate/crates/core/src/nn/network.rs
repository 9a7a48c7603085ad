//! Forward pass with activation cache, exact reverse-mode gradients, losses,
//! SGD and initialization for a validated layer stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::layers::{infer_shapes, param_dims, ActShape, LayerSpec, NUM_CLASSES};
use super::ops::{self, ConvGeom};

/// Inputs `[n, frames, height, width]` with one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.dims().len() != 4 {
            return Err(Error::Dims(format!(
                "batch inputs must be [n, F, H, W], got {:?}",
                inputs.dims()
            )));
        }
        if inputs.dims()[0] != labels.len() {
            return Err(Error::Dims(format!(
                "{} samples but {} labels",
                inputs.dims()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Dims(format!("label {bad} out of range")));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dims(&self) -> [usize; 3] {
        let d = self.inputs.dims();
        [d[1], d[2], d[3]]
    }
}

/// Activations recorded by [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `acts[i]` is the input to layer `i`; the last entry holds the logits.
    acts: Vec<Tensor<T>>,
    shapes: Vec<ActShape>,
    fingerprint: u64,
}

impl<T: Element> ForwardCache<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.acts.last().expect("cache always holds the logits")
    }
}

/// FNV-1a over the dims and bit patterns of every parameter.
pub fn params_fingerprint<T: Element>(params: &[Tensor<T>]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for t in params {
        for &d in t.dims() {
            feed(d as u64);
        }
        for &x in t.data() {
            feed(x.to_bits_u64());
        }
    }
    h
}

pub fn check_params<T: Element>(specs: &[LayerSpec], params: &[Tensor<T>]) -> Result<()> {
    let expected = param_dims(specs);
    if expected.len() != params.len() {
        return Err(Error::Dims(format!(
            "layer stack has {} parameter tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    let mut k = 0;
    for (layer, spec) in specs.iter().enumerate() {
        if let Some([w, b]) = spec.param_dims() {
            for want in [w, b] {
                if params[k].dims() != want.as_slice() {
                    return Err(Error::Shape {
                        layer,
                        msg: format!(
                            "{} parameter has dims {:?}, expected {want:?}",
                            spec.kind(),
                            params[k].dims()
                        ),
                    });
                }
                k += 1;
            }
        }
    }
    Ok(())
}

fn batch_tensor<T: Element>(n: usize, shape: ActShape, data: Vec<T>) -> Result<Tensor<T>> {
    let mut dims = vec![n];
    dims.extend(shape.dims());
    Tensor::new(dims, data)
}

fn apply_layer<T: Element>(
    spec: &LayerSpec,
    x: &Tensor<T>,
    in_shape: ActShape,
    out_shape: ActShape,
    params: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let n = x.dims()[0];
    Ok(match spec {
        LayerSpec::FrameDiff => ops::frame_diff(x)?,
        LayerSpec::Relu => x.map(|v| if v > T::ZERO { v } else { T::ZERO }),
        LayerSpec::Flatten => x.clone().reshape(vec![n, out_shape.numel()])?,
        LayerSpec::Conv2d(conv) => {
            let (ActShape::Spatial { h, w, .. }, ActShape::Spatial { h: oh, w: ow, .. }) =
                (in_shape, out_shape)
            else {
                unreachable!("validated by infer_shapes")
            };
            let geom = ConvGeom { h, w, oh, ow };
            let (wt, bs) = (&params[0], &params[1]);
            let (isz, osz) = (in_shape.numel(), out_shape.numel());
            let mut out = vec![T::ZERO; n * osz];
            for s in 0..n {
                ops::conv_forward(
                    conv,
                    &geom,
                    &x.data()[s * isz..(s + 1) * isz],
                    wt.data(),
                    bs.data(),
                    &mut out[s * osz..(s + 1) * osz],
                );
            }
            batch_tensor(n, out_shape, out)?
        }
        LayerSpec::Dense { in_features, out_features } => {
            let (wt, bs) = (&params[0], &params[1]);
            let mut out = vec![T::ZERO; n * out_features];
            for s in 0..n {
                ops::dense_forward(
                    &x.data()[s * in_features..(s + 1) * in_features],
                    wt.data(),
                    bs.data(),
                    &mut out[s * out_features..(s + 1) * out_features],
                );
            }
            batch_tensor(n, out_shape, out)?
        }
    })
}

/// Index of layer `layer`'s first parameter tensor.
pub(crate) fn param_offset(specs: &[LayerSpec], layer: usize) -> usize {
    2 * specs[..layer].iter().filter(|s| s.has_params()).count()
}

/// Runs layers `start..` on top of the cached input to layer `start`, using
/// `params` (which may differ from the cached ones from `start` on). The flag
/// is set when some ReLU input changed sign relative to the cache.
pub(crate) fn logits_from<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    cache: &ForwardCache<T>,
    start: usize,
) -> Result<(Tensor<T>, bool)> {
    let mut x = cache.acts[start].clone();
    let mut p = param_offset(specs, start);
    let mut flipped = false;
    for (i, spec) in specs.iter().enumerate().skip(start) {
        if matches!(spec, LayerSpec::Relu) && !flipped {
            flipped = x
                .data()
                .iter()
                .zip(cache.acts[i].data())
                .any(|(&a, &b)| (a > T::ZERO) != (b > T::ZERO));
        }
        x = apply_layer(spec, &x, cache.shapes[i], cache.shapes[i + 1], &params[p..])?;
        if spec.has_params() {
            p += 2;
        }
    }
    if !x.all_finite() {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    Ok((x, flipped))
}

/// Runs the stack on a batch, returning `[n, 2]` logits and the cache needed
/// by [`backward`].
pub fn forward<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    batch: &Batch<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let shapes = infer_shapes(batch.sample_dims(), specs)?;
    check_params(specs, params)?;
    let mut acts = Vec::with_capacity(specs.len() + 1);
    acts.push(batch.inputs.clone());
    let mut p = 0;
    for (i, spec) in specs.iter().enumerate() {
        let y = apply_layer(spec, &acts[i], shapes[i], shapes[i + 1], &params[p..])?;
        if spec.has_params() {
            p += 2;
        }
        acts.push(y);
    }
    let logits = acts.last().expect("non-empty stack").clone();
    if !logits.all_finite() {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    Ok((
        logits,
        ForwardCache {
            acts,
            shapes,
            fingerprint: params_fingerprint(params),
        },
    ))
}

/// Gradient of the mean softmax cross-entropy with respect to every
/// parameter tensor, in parameter order.
pub fn backward<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    cache: &ForwardCache<T>,
    labels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let (_, dlogits) = softmax_ce_with_grad(cache.logits(), labels)?;
    backward_from_logit_grad(specs, params, cache, &dlogits)
}

/// Backpropagates an arbitrary `dL/dlogits`.
pub fn backward_from_logit_grad<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    cache: &ForwardCache<T>,
    dlogits: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if cache.acts.len() != specs.len() + 1 || params_fingerprint(params) != cache.fingerprint {
        return Err(Error::StaleCache);
    }
    cache.logits().expect_same_dims(dlogits)?;
    let n = dlogits.dims()[0];
    let mut grads: Vec<Tensor<T>> = params.iter().map(Tensor::zeros_like).collect();
    // Input gradients are only needed while a parameterized layer lies below.
    let first_param_layer = specs.iter().position(LayerSpec::has_params);
    let mut p = params.len();
    let mut dy = dlogits.clone();
    for i in (0..specs.len()).rev() {
        let x = &cache.acts[i];
        let (in_shape, out_shape) = (cache.shapes[i], cache.shapes[i + 1]);
        let need_dx = first_param_layer.is_some_and(|f| f < i);
        let dx = match &specs[i] {
            LayerSpec::FrameDiff => None,
            LayerSpec::Relu => Some(x.zip_map(&dy, |v, d| if v > T::ZERO { d } else { T::ZERO })?),
            LayerSpec::Flatten => Some(batch_tensor(n, in_shape, dy.into_data())?),
            LayerSpec::Conv2d(conv) => {
                let (ActShape::Spatial { h, w, .. }, ActShape::Spatial { h: oh, w: ow, .. }) =
                    (in_shape, out_shape)
                else {
                    unreachable!("validated by infer_shapes")
                };
                let geom = ConvGeom { h, w, oh, ow };
                p -= 2;
                let (isz, osz) = (in_shape.numel(), out_shape.numel());
                let mut dxbuf = need_dx.then(|| vec![T::ZERO; n * isz]);
                let (gw, rest) = grads[p..].split_at_mut(1);
                for s in 0..n {
                    ops::conv_backward(
                        conv,
                        &geom,
                        &x.data()[s * isz..(s + 1) * isz],
                        params[p].data(),
                        &dy.data()[s * osz..(s + 1) * osz],
                        gw[0].data_mut(),
                        rest[0].data_mut(),
                        dxbuf.as_mut().map(|b| &mut b[s * isz..(s + 1) * isz]),
                    );
                }
                dxbuf.map(|b| batch_tensor(n, in_shape, b)).transpose()?
            }
            LayerSpec::Dense { in_features, out_features } => {
                p -= 2;
                let (fi, fo) = (*in_features, *out_features);
                let mut dxbuf = need_dx.then(|| vec![T::ZERO; n * fi]);
                let (gw, rest) = grads[p..].split_at_mut(1);
                for s in 0..n {
                    ops::dense_backward(
                        &x.data()[s * fi..(s + 1) * fi],
                        params[p].data(),
                        &dy.data()[s * fo..(s + 1) * fo],
                        gw[0].data_mut(),
                        rest[0].data_mut(),
                        dxbuf.as_mut().map(|b| &mut b[s * fi..(s + 1) * fi]),
                    );
                }
                dxbuf.map(|b| batch_tensor(n, in_shape, b)).transpose()?
            }
        };
        match dx {
            Some(d) if need_dx => dy = d,
            _ => break,
        }
    }
    Ok(grads)
}

fn check_logits<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() || labels.is_empty() {
        return Err(Error::Dims(format!(
            "logits {d:?} do not match {} labels",
            labels.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= d[1]) {
        return Err(Error::Dims(format!("label {bad} out of range for {} classes", d[1])));
    }
    Ok((d[0], d[1]))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn loss_softmax_ce<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(softmax_ce_with_grad(logits, labels)?.0)
}

pub fn softmax_ce_with_grad<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = check_logits(logits, labels)?;
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut total = T::ZERO;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(row[0], T::max);
        let sum: T = row.iter().map(|&z| (z - m).exp()).sum();
        // sum >= 1 because the max term is exactly 1, so the loss is >= 0.
        let lse = m + sum.ln();
        total += lse - row[label];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let target = if c == label { T::ONE } else { T::ZERO };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Loss used to differentiate a network's logits.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a, T> {
    SoftmaxCrossEntropy,
    /// Mean over samples of `0.5 * ||logits - target||^2`.
    Squared(&'a Tensor<T>),
}

impl<T: Element> Objective<'_, T> {
    pub fn eval(&self, logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        match self {
            Objective::SoftmaxCrossEntropy => softmax_ce_with_grad(logits, labels),
            Objective::Squared(target) => {
                let (n, _) = check_logits(logits, labels)?;
                let inv_n = T::ONE / T::from_f64(n as f64);
                let resid = logits.zip_map(target, |y, t| y - t)?;
                let half = T::from_f64(0.5);
                let loss = resid.data().iter().map(|&r| half * r * r).sum::<T>() * inv_n;
                Ok((loss, resid.map(|r| r * inv_n)))
            }
        }
    }
}

/// Loss and parameter gradients in one call.
pub fn loss_and_grad<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    batch: &Batch<T>,
    objective: Objective<'_, T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let (logits, cache) = forward(specs, params, batch)?;
    let (loss, dlogits) = objective.eval(&logits, &batch.labels)?;
    let grads = backward_from_logit_grad(specs, params, &cache, &dlogits)?;
    Ok((loss, grads))
}

pub fn loss_only<T: Element>(
    specs: &[LayerSpec],
    params: &[Tensor<T>],
    batch: &Batch<T>,
    objective: Objective<'_, T>,
) -> Result<T> {
    let (logits, _) = forward(specs, params, batch)?;
    Ok(objective.eval(&logits, &batch.labels)?.0)
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step<T: Element>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    lr: T,
) -> Result<Vec<Tensor<T>>> {
    let mut out = params.to_vec();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place<T: Element>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dims(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_dims(g)?;
    }
    if !lr.is_finite() || lr < T::ZERO {
        return Err(Error::Numeric(format!("learning rate {lr:?} must be finite and >= 0")));
    }
    if lr == T::ZERO {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

/// Weights ~ Uniform(-s, s) with `s = sqrt(6 / (fan_in + fan_out))`, biases
/// zero, drawn in parameter order from a ChaCha8 stream seeded by `seed`.
pub fn init_params<T: Element>(specs: &[LayerSpec], seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in specs {
        let (Some([wd, bd]), Some((fan_in, fan_out))) = (spec.param_dims(), spec.fans()) else {
            continue;
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(&wd, |_| T::from_f64(rng.random_range(-s..s)))
            .expect("layer dims are positive");
        out.push(w);
        out.push(Tensor::zeros(&bd).expect("layer dims are positive"));
    }
    out
}
