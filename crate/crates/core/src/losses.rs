//! Training objective: class-distribution NLL on the corrected distribution,
//! the (negative, pair-normalized) anchor spread, and the nearest-anchor
//! center loss, combined with fixed weights.
//!
//! All batch terms are means over the batch.

use serde::{Deserialize, Serialize};

use crate::data::smoothed_target;
use crate::error::{Error, Result};
use crate::head::engine::{self, Forward, Mode};
use crate::head::HeadParameters;
use crate::numerics::{squared_distance, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub anchor: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            anchor: 0.1,
            center: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.anchor, self.center];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values and the flat gradient of `total`, laid out like
/// [`HeadParameters::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub anchor: f64,
    pub center: f64,
    pub total: f64,
    pub gradient: Vec<f64>,
    /// Set when fewer than two anchors exist, so the anchor loss is 0.
    pub anchor_degenerate: bool,
}

/// Mean over the batch of `−Σ_j y_j ln max(L_j, floor)`.
pub fn class_distribution_loss(predicted: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (l, y) in predicted.iter().zip(targets) {
        if l.len() != y.len() {
            return Err(Error::Shape(format!("distribution of length {} vs target {}", l.len(), y.len())));
        }
        total += nll(l, y);
    }
    Ok(total / predicted.len() as f64)
}

#[inline]
fn nll(l: &[f64], y: &[f64]) -> f64 {
    -l.iter().zip(y).map(|(&p, &t)| t * p.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Anchor loss value; `degenerate` when there are fewer than two anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLoss {
    pub value: f64,
    pub degenerate: bool,
}

/// `−1/(P(P−1)) Σ_{p≠q} ‖a_p − a_q‖²` over ordered pairs of the `P`
/// anchors (rows of `anchors`, each `dim` wide).
pub fn anchor_loss(anchors: &[f64], dim: usize) -> AnchorLoss {
    let p = anchors.len().checked_div(dim).unwrap_or(0);
    if p < 2 {
        return AnchorLoss {
            value: 0.0,
            degenerate: true,
        };
    }
    // Σ_{p,q} ‖a_p − a_q‖² = 2P Σ‖a_p‖² − 2‖Σ a_p‖².
    let mut sum = vec![0.0; dim];
    let mut sq = 0.0;
    for a in anchors.chunks_exact(dim) {
        for (s, &x) in sum.iter_mut().zip(a) {
            *s += x;
        }
        sq += a.iter().map(|x| x * x).sum::<f64>();
    }
    let pf = p as f64;
    let pairs = 2.0 * pf * sq - 2.0 * sum.iter().map(|x| x * x).sum::<f64>();
    AnchorLoss {
        value: -pairs.max(0.0) / (pf * (pf - 1.0)),
        degenerate: false,
    }
}

/// Accumulates `weight · ∂anchor_loss/∂a_p = −4·weight·(P·a_p − Σa)/(P(P−1))`.
pub fn anchor_loss_grad(anchors: &[f64], dim: usize, weight: f64, grad: &mut [f64]) {
    let p = anchors.len() / dim.max(1);
    if p < 2 || weight == 0.0 {
        return;
    }
    let mut sum = vec![0.0; dim];
    for a in anchors.chunks_exact(dim) {
        for (s, &x) in sum.iter_mut().zip(a) {
            *s += x;
        }
    }
    let pf = p as f64;
    let coef = -4.0 * weight / (pf * (pf - 1.0));
    for (a, g) in anchors.chunks_exact(dim).zip(grad.chunks_exact_mut(dim)) {
        for j in 0..dim {
            g[j] += coef * (pf * a[j] - sum[j]);
        }
    }
}

/// Index of the nearest same-class anchor (lowest index on ties) and the
/// squared distance to it.
pub fn nearest_class_anchor(e: &[f64], label: usize, params: &HeadParameters) -> (usize, f64) {
    let k = params.config().anchors_per_class;
    let mut best = (0, f64::INFINITY);
    for j in 0..k {
        let dist = squared_distance(e, params.anchor(label, j));
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Mean over the batch of the squared distance from each head-space
/// embedding to its nearest same-class anchor.
pub fn center_loss(embeddings: &[Vec<f64>], labels: &[usize], params: &HeadParameters) -> Result<f64> {
    if params.config().anchors_per_class == 0 {
        return Err(Error::Disabled("center loss needs K ≥ 1"));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (e, &y) in embeddings.iter().zip(labels) {
        if e.len() != params.config().dim {
            return Err(Error::Shape(format!("embedding of width {}", e.len())));
        }
        if y >= params.config().num_classes {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        total += nearest_class_anchor(e, y, params).1;
    }
    Ok(total / embeddings.len() as f64)
}

/// A training minibatch: input embeddings, integer labels and the targets the
/// class loss compares against (usually smoothed one-hots).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a [f64]>, labels: Vec<usize>, num_classes: usize, smoothing: f64) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!("{} inputs for {} labels", inputs.len(), labels.len())));
        }
        let targets = labels
            .iter()
            .map(|&y| {
                if y >= num_classes {
                    Err(Error::InvalidInput(format!("label {y} out of range")))
                } else {
                    smoothed_target(y, num_classes, smoothing)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, labels, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Full forward in the given mode, all three losses, their weighted total
/// and the exact gradient of the total with respect to every parameter.
///
/// Gradients flow through the confidence weights, the similarity softmax and
/// the center-loss minimum (through the selected anchor only). Returns the
/// forward cache as well so callers can update batch-norm statistics.
pub fn total_loss_with_forward(
    batch: &Batch<'_>,
    params: &HeadParameters,
    weights: &LossWeights,
    mode: Mode<'_>,
) -> Result<(LossReport, Forward)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let cfg = params.config();
    let (b, n, d) = (batch.len(), cfg.num_classes, cfg.dim);
    let fwd = engine::forward(params, &batch.inputs, mode)?;
    let bf = b as f64;

    // Class-distribution loss on L_final.
    let mut cls = 0.0;
    let mut d_final = vec![0.0; b * n];
    for i in 0..b {
        let fin = fwd.row(&fwd.final_dist, i);
        let y = &batch.targets[i];
        cls += nll(fin, y);
        for j in 0..n {
            if fin[j] > LOG_FLOOR {
                d_final[i * n + j] = -weights.cls * y[j] / (fin[j] * bf);
            }
        }
    }
    cls /= bf;

    let mut gradient = vec![0.0; params.values().len()];
    let anchor_range = params.layout().anchors.clone();

    // Center loss: pulls each embedding and its nearest same-class anchor together.
    let mut d_embed = vec![0.0; b * d];
    let mut center = 0.0;
    if cfg.anchors_per_class > 0 {
        for i in 0..b {
            let e = fwd.row(&fwd.embeddings, i);
            let y = batch.labels[i];
            let (j, dist) = nearest_class_anchor(e, y, params);
            center += dist;
            if weights.center != 0.0 {
                let a = params.anchor(y, j);
                let start = anchor_range.start + (y * cfg.anchors_per_class + j) * d;
                let coef = 2.0 * weights.center / bf;
                for k in 0..d {
                    let g = coef * (e[k] - a[k]);
                    d_embed[i * d + k] += g;
                    gradient[start + k] -= g;
                }
            }
        }
        center /= bf;
    }

    let anchors = params.anchors();
    let anchor = anchor_loss(anchors, d);
    anchor_loss_grad(anchors, d, weights.anchor, &mut gradient[anchor_range]);

    engine::backward(params, &batch.inputs, &fwd, &d_final, &d_embed, &mut gradient);

    let total = weights.cls * cls + weights.anchor * anchor.value + weights.center * center;
    Ok((
        LossReport {
            cls,
            anchor: anchor.value,
            center,
            total,
            gradient,
            anchor_degenerate: anchor.degenerate,
        },
        fwd,
    ))
}

pub fn total_loss(
    batch: &Batch<'_>,
    params: &HeadParameters,
    weights: &LossWeights,
    mode: Mode<'_>,
) -> Result<LossReport> {
    total_loss_with_forward(batch, params, weights, mode).map(|(r, _)| r)
}

/// Loss value only (no reverse pass); used by finite-difference checks.
pub fn total_loss_value(batch: &Batch<'_>, params: &HeadParameters, weights: &LossWeights, mode: Mode<'_>) -> Result<f64> {
    let cfg = params.config();
    let fwd = engine::forward(params, &batch.inputs, mode)?;
    let b = batch.len();
    let finals: Vec<Vec<f64>> = (0..b).map(|i| fwd.row(&fwd.final_dist, i).to_vec()).collect();
    let cls = class_distribution_loss(&finals, &batch.targets)?;
    let anchor = anchor_loss(params.anchors(), cfg.dim).value;
    let center = if cfg.anchors_per_class > 0 {
        let embs: Vec<Vec<f64>> = (0..b).map(|i| fwd.row(&fwd.embeddings, i).to_vec()).collect();
        center_loss(&embs, &batch.labels, params)?
    } else {
        0.0
    };
    Ok(weights.cls * cls + weights.anchor * anchor + weights.center * center)
}
