#![allow(dead_code)]

use flsim_core::data::{generate_client_data, ChunkDataset, ClientSpec, Skew};
use flsim_core::nn::Batch;
use flsim_core::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Element>(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(dims, |_| T::from_f64(r.random_range(lo..hi))).unwrap()
}

pub fn random_batch<T: Element>(n: usize, dims: [usize; 3], seed: u64) -> Batch<T> {
    let inputs = random_tensor(&[n, dims[0], dims[1], dims[2]], seed, 0.0, 1.0);
    let labels = (0..n).map(|i| i % 2).collect();
    Batch::new(inputs, labels).unwrap()
}

pub fn dataset<T: Element>(client_id: u32, fight: usize, nonfight: usize, dims: [usize; 3], seed: u64) -> ChunkDataset<T> {
    let spec = ClientSpec {
        client_id,
        fight_count: fight,
        nonfight_count: nonfight,
        skew: Skew::default(),
    };
    generate_client_data(&spec, dims, seed).unwrap()
}

/// Gives every zero-initialized bias a small random value so tests see them.
pub fn jitter_biases<T: Element>(params: &mut [Tensor<T>], seed: u64) {
    let mut r = rng(seed);
    for t in params.iter_mut().skip(1).step_by(2) {
        for v in t.data_mut() {
            *v = T::from_f64(r.random_range(-0.1..0.1));
        }
    }
}

pub fn max_rel_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(1e-12));
        }
    }
    worst
}
