//! Optimization loop: balanced per-epoch sampling, minibatch gradients,
//! Adam with per-epoch exponential learning-rate decay, and running
//! batch-norm statistics.

use serde::{Deserialize, Serialize};

use crate::data::{refine_indices, Dataset};
use crate::error::{Error, Result};
use crate::head::engine::{update_running_stats, Mode};
use crate::head::{predict_batch, HeadConfig, HeadParameters};
use crate::losses::{total_loss, total_loss_value, total_loss_with_forward, Batch, LossWeights};
use crate::numerics::RngState;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Per-epoch learning-rate decay factor `γ`.
    pub decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Label-smoothing term `s` (ε = s/100).
    pub smoothing: f64,
    /// Refinement stage-1 cap per group.
    pub per_group: usize,
    /// Refinement stage-2 quota per class.
    pub per_class: usize,
    /// Head shape. `input_dim` and `num_classes` are taken from the data,
    /// as is `dim` when there is no reduction layer.
    pub head: HeadConfig,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            base_lr: 3e-4,
            decay: 0.995,
            batch_size: 64,
            weights: LossWeights::default(),
            smoothing: 11.0,
            per_group: 512,
            per_class: 500,
            head: HeadConfig::default(),
            seed: 0,
            eval_every: 10,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 || self.per_group == 0 || self.per_class == 0 || self.eval_every == 0 {
            return fail("batch_size, per_group, per_class and eval_every must be ≥ 1".into());
        }
        if !(0.0..100.0).contains(&self.smoothing) {
            return fail(format!("smoothing must be in [0, 100), got {}", self.smoothing));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.weights.validate()
    }

    /// Head config adapted to a dataset's width and class count.
    pub fn head_for(&self, ds: &Dataset) -> HeadConfig {
        let mut head = self.head.clone();
        head.input_dim = ds.dim();
        head.num_classes = ds.num_classes();
        if !head.reduction {
            head.dim = ds.dim();
        }
        head
    }
}

/// `base_lr · γ^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            opt.first_moment.len()
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = opt.beta1 * opt.first_moment[i] + (1.0 - opt.beta1) * g;
        let v = opt.beta2 * opt.second_moment[i] + (1.0 - opt.beta2) * g * g;
        opt.first_moment[i] = m;
        opt.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + opt.eps);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_anchor: f64,
    pub loss_center: f64,
    pub loss_total: f64,
    pub eval_accuracy: Option<f64>,
}

/// Fraction of `ds` whose eval-mode prediction matches the label.
pub fn evaluate_accuracy(params: &HeadParameters, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for chunk in ds.samples().chunks(512) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.embedding.as_slice()).collect();
        let records = predict_batch(&inputs, params)?;
        correct += records.iter().zip(chunk).filter(|(r, s)| r.label == s.label).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn train(ds_train: &Dataset, ds_eval: &Dataset, cfg: &TrainConfig) -> Result<(HeadParameters, Vec<EpochRecord>)> {
    train_with_observer(ds_train, ds_eval, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `observer` after every epoch with that epoch's
/// record and the parameters at its end.
pub fn train_with_observer<F>(
    ds_train: &Dataset,
    ds_eval: &Dataset,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(HeadParameters, Vec<EpochRecord>)>
where
    F: FnMut(&EpochRecord, &HeadParameters) -> Result<()>,
{
    cfg.validate()?;
    if ds_train.num_classes() != ds_eval.num_classes() || ds_train.dim() != ds_eval.dim() {
        return Err(Error::Shape(format!(
            "train set is {} classes × {} dims, eval set is {} × {}",
            ds_train.num_classes(),
            ds_train.dim(),
            ds_eval.num_classes(),
            ds_eval.dim()
        )));
    }
    let root = RngState::new(cfg.seed);
    let mut params = HeadParameters::init(cfg.head_for(ds_train), &mut root.split(1))?;
    let mut sampler = root.split(2);
    let mut dropout = root.split(3);
    let mut opt = OptimizerState::new(params.values().len());
    let n = ds_train.num_classes();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = refine_indices(ds_train, cfg.per_group, cfg.per_class, &mut sampler)?;
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| ds_train.samples()[i].embedding.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| ds_train.samples()[i].label).collect();
            let batch = Batch::new(inputs, labels, n, cfg.smoothing)?;
            let (mut report, fwd) =
                total_loss_with_forward(&batch, &params, &cfg.weights, Mode::Train(&mut dropout))?;
            update_running_stats(&mut params, &fwd, BN_MOMENTUM);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut report.gradient, max_norm);
            }
            adam_step(params.values_mut(), &report.gradient, &mut opt, lr)?;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([report.cls, report.anchor, report.center, report.total]) {
                *s += w * v;
            }
        }
        let count = order.len() as f64;
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let record = EpochRecord {
            epoch,
            lr,
            loss_cls: sums[0] / count,
            loss_anchor: sums[1] / count,
            loss_center: sums[2] / count,
            loss_total: sums[3] / count,
            eval_accuracy: if evaluate && !ds_eval.is_empty() {
                Some(evaluate_accuracy(&params, ds_eval)?)
            } else {
                None
            },
        };
        observer(&record, &params)?;
        history.push(record);
    }
    Ok((params, history))
}

fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Gradient magnitudes below this are compared on an absolute scale.
pub const AUDIT_MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateError {
    pub index: usize,
    pub array: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    /// Every coordinate over the tolerance.
    pub failures: Vec<CoordinateError>,
    pub tolerance: f64,
    pub step: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − n| / max(|a|, |n|, AUDIT_MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(AUDIT_MAGNITUDE_FLOOR)
}

/// Compares the analytic gradient of the total loss against central
/// differences on every coordinate.
///
/// With `dropout_seed` set the loss is evaluated in train mode with the same
/// dropout masks for every evaluation; otherwise in eval mode.
pub fn finite_difference_audit(
    params: &HeadParameters,
    batch: &Batch<'_>,
    weights: &LossWeights,
    step: f64,
    tolerance: f64,
    dropout_seed: Option<u64>,
) -> Result<AuditReport> {
    let analytic = match dropout_seed {
        Some(seed) => total_loss(batch, params, weights, Mode::Train(&mut RngState::new(seed)))?,
        None => total_loss(batch, params, weights, Mode::Eval)?,
    }
    .gradient;
    audit_gradient(params, batch, weights, &analytic, step, tolerance, dropout_seed)
}

/// Audits a caller-supplied gradient (e.g. to check that a corrupted gradient
/// is caught).
pub fn audit_gradient(
    params: &HeadParameters,
    batch: &Batch<'_>,
    weights: &LossWeights,
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    dropout_seed: Option<u64>,
) -> Result<AuditReport> {
    if analytic.len() != params.values().len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters have {}",
            analytic.len(),
            params.values().len()
        )));
    }
    let eval = |p: &HeadParameters| -> Result<f64> {
        match dropout_seed {
            Some(seed) => total_loss_value(batch, p, weights, Mode::Train(&mut RngState::new(seed))),
            None => total_loss_value(batch, p, weights, Mode::Eval),
        }
    };
    let mut probe = params.clone();
    let mut report = AuditReport {
        coordinates: analytic.len(),
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance,
        step,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.values_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(a, numeric);
        let (array, offset) = params.layout().locate(i).unwrap_or(("?", i));
        let err = CoordinateError {
            index: i,
            array: array.to_string(),
            offset,
            analytic: a,
            numeric,
            rel_error: rel,
        };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some(err.clone());
        }
        if !(rel < tolerance) {
            report.failures.push(err);
        }
    }
    Ok(report)
}
