//! The reliability-balancing head.
//!
//! For an embedding `e` the head produces
//!
//! * `l`: the primary distribution, `softmax(mlp(e))`;
//! * `t_g`: the anchor correction: a softmax over `−‖e − a‖/δ` across all
//!   `N·K` anchors, summed per anchor class;
//! * `t_a`: the attentive correction: multi-head self-attention over the
//!   embedding split into `T` tokens, mean-pooled, projected to `N` logits
//!   and softmaxed;
//! * `t`: `t_g` and `t_a` averaged with weights `C(t_g)`, `C(t_a)`;
//! * `L`: `l` and `t` averaged with weights `C(l)`, `C(t)`.
//!
//! `C(p) = 1 − H(p)/ln N` is one minus the normalized entropy, so it is 0 for
//! the uniform distribution and 1 for a one-hot. When both weights of a
//! fusion vanish the plain average is used.
//!
//! The functions in this module handle one embedding at a time and are the
//! reference path; [`engine`] runs whole batches with the reverse pass used
//! for training.

pub mod engine;
mod params;

pub use engine::{Forward, Mode};
pub use params::{ArraySpec, BatchNormStats, HeadConfig, HeadParameters, Layout, BN_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, euclidean_distance, softmax, Matrix, RngState, LOG_FLOOR};

/// Below this total confidence a fusion falls back to the plain average.
pub const FUSION_EPS: f64 = 1e-12;

/// `1 − H(p)/ln N`, with `0·ln 0 = 0`; clamped to `[0, 1]`. A single-class
/// distribution has confidence 1.
pub fn confidence(p: &[f64]) -> f64 {
    let n = p.len();
    if n <= 1 {
        return 1.0;
    }
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    (1.0 + plogp / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Accumulates `upstream · ∂C/∂p` into `out`; `∂C/∂p_i = (ln p_i + 1)/ln N`
/// with the log floored at [`LOG_FLOOR`].
pub(crate) fn confidence_grad(p: &[f64], upstream: f64, out: &mut [f64]) {
    let n = p.len();
    if n <= 1 || upstream == 0.0 {
        return;
    }
    let inv_ln_n = 1.0 / (n as f64).ln();
    for (o, &v) in out.iter_mut().zip(p) {
        *o += upstream * (v.max(LOG_FLOOR).ln() + 1.0) * inv_ln_n;
    }
}

/// Normalized weights `(ca, cb)/(ca + cb)`, or `(½, ½)` when the sum is
/// below [`FUSION_EPS`].
pub(crate) fn fusion_weights(ca: f64, cb: f64) -> (f64, f64) {
    let sum = ca + cb;
    if sum < FUSION_EPS {
        (0.5, 0.5)
    } else {
        (ca / sum, cb / sum)
    }
}

fn fuse(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    let (wa, wb) = fusion_weights(ca, cb);
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

fn check_embedding(params: &HeadParameters, e: &[f64]) -> Result<()> {
    if e.len() != params.config().dim {
        return Err(Error::Shape(format!(
            "embedding has {} features, head space has {}",
            e.len(),
            params.config().dim
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("embedding is not finite".into()));
    }
    Ok(())
}

/// Primary label distribution for one input embedding (before reduction).
///
/// In eval mode batch norm uses the running statistics and no dropout is
/// applied. In train mode the sample is treated as a batch of one, so batch
/// norm sees zero variance; use [`engine::forward`] for real batches.
pub fn primary_distribution(x: &[f64], params: &HeadParameters, mode: Mode<'_>) -> Result<Vec<f64>> {
    if mode.is_train() {
        let fwd = engine::forward(params, &[x], mode)?;
        return Ok(fwd.primary);
    }
    let cfg = params.config();
    let lay = params.layout();
    let v = params.values();
    let mut act = params.reduce(x)?;
    let layers = [
        (&lay.fc1_weight, &lay.fc1_bias, &lay.bn1_scale, &lay.bn1_shift),
        (&lay.fc2_weight, &lay.fc2_bias, &lay.bn2_scale, &lay.bn2_shift),
    ];
    for (li, (w, b, scale, shift)) in layers.into_iter().enumerate() {
        let w = Matrix::from_vec(cfg.hidden, act.len(), v[w.clone()].to_vec())?;
        let z = w.matvec(&act)?;
        let bn = params.batch_norm();
        act = z
            .iter()
            .enumerate()
            .map(|(j, &zj)| {
                let r = (zj + v[b.start + j]).max(0.0);
                let xhat = (r - bn.mean[li][j]) / (bn.var[li][j] + BN_EPS).sqrt();
                v[scale.start + j] * xhat + v[shift.start + j]
            })
            .collect();
    }
    let out = Matrix::from_vec(cfg.num_classes, cfg.hidden, v[lay.out_weight.clone()].to_vec())?;
    let mut logits = out.matvec(&act)?;
    for (z, bias) in logits.iter_mut().zip(&v[lay.out_bias.clone()]) {
        *z += bias;
    }
    softmax(&logits, 1.0)
}

/// Similarity table `s` (N × K) between a head-space embedding and every
/// anchor: softmax over all `N·K` entries of `−dist/δ`.
pub fn anchor_similarities(e: &[f64], params: &HeadParameters) -> Result<Matrix> {
    let cfg = params.config();
    if cfg.anchors_per_class == 0 {
        return Err(Error::Disabled("anchor correction needs K ≥ 1"));
    }
    check_embedding(params, e)?;
    let mut neg = Vec::with_capacity(cfg.num_anchors());
    for i in 0..cfg.num_classes {
        for j in 0..cfg.anchors_per_class {
            neg.push(-euclidean_distance(e, params.anchor(i, j))?);
        }
    }
    let s = softmax(&neg, cfg.temperature)?;
    Matrix::from_vec(cfg.num_classes, cfg.anchors_per_class, s)
}

/// `t_g = Σ_ij s_ij m_ij`; with one-hot `m` this sums each class's row.
pub fn anchor_correction(e: &[f64], params: &HeadParameters) -> Result<Vec<f64>> {
    let s = anchor_similarities(e, params)?;
    let mut t = vec![0.0; params.config().num_classes];
    for i in 0..s.rows() {
        let m = params.anchor_label(i);
        for &sij in s.row(i) {
            for (tk, mk) in t.iter_mut().zip(&m) {
                *tk += sij * mk;
            }
        }
    }
    Ok(t)
}

/// Multi-head self-attention pooled over the embedding's tokens; returns
/// `softmax(W_out · [h_1; …; h_heads])`.
pub fn attentive_correction(e: &[f64], params: &HeadParameters) -> Result<Vec<f64>> {
    check_embedding(params, e)?;
    let pooled = attention_pool(e, params)?;
    let cfg = params.config();
    let w_out = Matrix::from_vec(
        cfg.num_classes,
        cfg.heads * cfg.head_dim(),
        params.values()[params.layout().attn_out.clone()].to_vec(),
    )?;
    softmax(&w_out.matvec(&pooled)?, 1.0)
}

/// Concatenated, token-averaged head outputs for one embedding.
pub fn attention_pool(e: &[f64], params: &HeadParameters) -> Result<Vec<f64>> {
    check_embedding(params, e)?;
    let cfg = params.config();
    let lay = params.layout();
    let (t, td, hd) = (cfg.tokens, cfg.token_dim(), cfg.head_dim());
    let tokens = Matrix::from_vec(t, td, e.to_vec())?;
    let mut pooled = Vec::with_capacity(cfg.heads * hd);
    let proj = |range: &std::ops::Range<usize>, h: usize| -> Result<Matrix> {
        let w = Matrix::from_vec(hd, td, params.values()[range.start + h * hd * td..range.start + (h + 1) * hd * td].to_vec())?;
        tokens.matmul(&w.transpose())
    };
    for h in 0..cfg.heads {
        let q = proj(&lay.query, h)?;
        let k = proj(&lay.key, h)?;
        let v = proj(&lay.value, h)?;
        let scores = q.matmul(&k.transpose())?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; hd];
        for r in 0..t {
            let logits: Vec<f64> = scores.row(r).iter().map(|s| s * scale).collect();
            let w = softmax(&logits, 1.0)?;
            let head_out = v.matvec_t(&w)?;
            for (o, x) in out.iter_mut().zip(head_out) {
                *o += x / t as f64;
            }
        }
        pooled.extend(out);
    }
    Ok(pooled)
}

/// Confidence-weighted correction `t` together with `(c_g, c_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub distribution: Vec<f64>,
    pub weight_a: f64,
    pub weight_b: f64,
}

pub fn fuse_corrections(t_g: &[f64], t_a: &[f64]) -> Fusion {
    let c_g = confidence(t_g);
    let c_a = confidence(t_a);
    Fusion {
        distribution: fuse(t_g, c_g, t_a, c_a),
        weight_a: c_g,
        weight_b: c_a,
    }
}

/// `L_final` together with `(c_l, c_t)`.
pub fn final_distribution(l: &[f64], t: &[f64]) -> Fusion {
    let c_l = confidence(l);
    let c_t = confidence(t);
    Fusion {
        distribution: fuse(l, c_l, t, c_t),
        weight_a: c_l,
        weight_b: c_t,
    }
}

/// Every intermediate of one eval-mode prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub primary: Vec<f64>,
    /// Empty when the head has no anchors.
    pub anchor_term: Vec<f64>,
    pub attentive_term: Vec<f64>,
    pub correction: Vec<f64>,
    pub final_dist: Vec<f64>,
    pub c_primary: f64,
    pub c_anchor: f64,
    pub c_attentive: f64,
    pub c_correction: f64,
    pub label: usize,
}

/// Eval-mode prediction for one input embedding. With `K = 0` the
/// correction is `t_a` alone and `c_g` is reported as 0.
pub fn predict(x: &[f64], params: &HeadParameters) -> Result<PredictionRecord> {
    let l = primary_distribution(x, params, Mode::Eval)?;
    let e = params.reduce(x)?;
    let t_a = attentive_correction(&e, params)?;
    let c_a = confidence(&t_a);
    let (t_g, c_g, t) = if params.config().anchors_per_class > 0 {
        let t_g = anchor_correction(&e, params)?;
        let fused = fuse_corrections(&t_g, &t_a);
        (t_g, fused.weight_a, fused.distribution)
    } else {
        (Vec::new(), 0.0, t_a.clone())
    };
    let fin = final_distribution(&l, &t);
    Ok(PredictionRecord {
        label: argmax(&fin.distribution),
        primary: l,
        anchor_term: t_g,
        attentive_term: t_a,
        correction: t,
        final_dist: fin.distribution,
        c_primary: fin.weight_a,
        c_anchor: c_g,
        c_attentive: c_a,
        c_correction: fin.weight_b,
    })
}

/// Eval-mode predictions for many embeddings through the batched engine.
pub fn predict_batch(inputs: &[&[f64]], params: &HeadParameters) -> Result<Vec<PredictionRecord>> {
    predict_batch_with_features(inputs, params).map(|(records, _)| records)
}

/// [`predict_batch`] plus each sample's last-hidden-layer features.
pub fn predict_batch_with_features(
    inputs: &[&[f64]],
    params: &HeadParameters,
) -> Result<(Vec<PredictionRecord>, Vec<Vec<f64>>)> {
    if inputs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let fwd = engine::forward(params, inputs, Mode::Eval)?;
    let features = (0..fwd.batch).map(|i| fwd.row(fwd.pre_logits(), i).to_vec()).collect();
    let has_anchors = params.config().anchors_per_class > 0;
    let records = (0..fwd.batch)
        .map(|i| {
            let fin = fwd.row(&fwd.final_dist, i).to_vec();
            PredictionRecord {
                label: argmax(&fin),
                primary: fwd.row(&fwd.primary, i).to_vec(),
                anchor_term: if has_anchors {
                    fwd.row(&fwd.anchor_term, i).to_vec()
                } else {
                    Vec::new()
                },
                attentive_term: fwd.row(&fwd.attentive_term, i).to_vec(),
                correction: fwd.row(&fwd.correction, i).to_vec(),
                final_dist: fin,
                c_primary: fwd.c_primary[i],
                c_anchor: fwd.c_anchor[i],
                c_attentive: fwd.c_attentive[i],
                c_correction: fwd.c_correction[i],
            }
        })
        .collect();
    Ok((records, features))
}

/// Convenience: default-initialized parameters for a config and seed.
pub fn init_params(config: HeadConfig, seed: u64) -> Result<HeadParameters> {
    HeadParameters::init(config, &mut RngState::new(seed))
}
