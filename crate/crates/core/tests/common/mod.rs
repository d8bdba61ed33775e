//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use relbal_core::head::{HeadConfig, HeadParameters};
use relbal_core::numerics::RngState;

pub fn small_config(n: usize, k: usize, d: usize, tokens: usize, heads: usize) -> HeadConfig {
    HeadConfig {
        input_dim: d,
        dim: d,
        num_classes: n,
        anchors_per_class: k,
        hidden: 6,
        tokens,
        heads,
        temperature: 1.0,
        dropout: 0.5,
        reduction: false,
    }
}

pub fn random_vec(rng: &mut RngState, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.normal()).collect()
}

/// Initialized parameters with every value (including batch-norm scale,
/// shift and running statistics) perturbed so no term is trivially zero.
pub fn random_params(cfg: HeadConfig, seed: u64) -> HeadParameters {
    let mut rng = RngState::new(seed);
    let mut p = HeadParameters::init(cfg, &mut rng.split(0)).unwrap();
    for v in p.values_mut() {
        *v += 0.3 * rng.normal();
    }
    let bn = p.batch_norm_mut();
    for layer in 0..2 {
        for m in &mut bn.mean[layer] {
            *m = 0.5 * rng.normal();
        }
        for v in &mut bn.var[layer] {
            *v = 0.5 + rng.uniform();
        }
    }
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn batch_inputs(rng: &mut RngState, b: usize, width: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..b).map(|_| random_vec(rng, width, 1.0)).collect();
    let ys = (0..b).map(|_| rng.below(3)).collect();
    (xs, ys)
}

/// The audited instance family: N=3, d=8, batch 4, varying K, T, reduction
/// and whether dropout/batch statistics are active.
pub fn audit_instance(index: u64) -> (HeadParameters, Vec<Vec<f64>>, Vec<usize>, Option<u64>) {
    let k = [2, 2, 0, 2, 1][index as usize % 5];
    let t = [2, 1, 2, 2, 4][index as usize % 5];
    let heads = if t == 4 { 2 } else { [1, 2][(index as usize / 5) % 2] };
    let mut cfg = small_config(3, k, 8, t, heads);
    cfg.reduction = index % 3 == 0;
    cfg.input_dim = if cfg.reduction { 6 } else { 8 };
    let p = random_params(cfg.clone(), 1000 + index);
    let (xs, ys) = batch_inputs(&mut RngState::new(2000 + index), 4, cfg.input_dim);
    let dropout = if index % 2 == 0 { Some(3000 + index) } else { None };
    (p, xs, ys, dropout)
}
