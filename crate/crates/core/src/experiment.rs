//! Noisy-label benchmark construction, single train+eval cells and the
//! ablation sweeps over anchors, noise, smoothing and anchor-loss weight.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, inject_label_noise, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::head::{predict_batch_with_features, HeadParameters, PredictionRecord};
use crate::metrics::MetricsReport;
use crate::numerics::RngState;
use crate::train::{train_with_observer, EpochRecord, TrainConfig};

/// Synthetic data plus the per-class train/test cut. Label noise is applied
/// to the training half only; the held-out half keeps its true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub data: SyntheticSpec,
    pub train_per_class: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            train_per_class: 1000,
        }
    }
}

impl Benchmark {
    /// Clean train and held-out sets.
    pub fn split(&self) -> Result<(Dataset, Dataset)> {
        if self.train_per_class == 0 || self.train_per_class >= self.data.per_class {
            return Err(Error::Config(format!(
                "train_per_class must be in [1, {}), got {}",
                self.data.per_class, self.train_per_class
            )));
        }
        Ok(generate_synthetic(&self.data)?.split_per_class(self.train_per_class))
    }
}

/// Flips `noise_percent`% of the labels, seeded by `seed`.
pub fn noisy_copy(ds: &Dataset, noise_percent: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=100.0).contains(&noise_percent) {
        return Err(Error::InvalidInput(format!(
            "noise must be a percentage in [0, 100], got {noise_percent}"
        )));
    }
    let mut rng = RngState::new(seed).split(4);
    inject_label_noise(ds, noise_percent / 100.0, &mut rng)
}

/// Eval-mode predictions, last-hidden-layer features and the metrics built
/// from them.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    pub features: Vec<Vec<f64>>,
    pub report: MetricsReport,
}

pub fn evaluate(params: &HeadParameters, ds: &Dataset) -> Result<Evaluation> {
    let cfg = params.config();
    if ds.dim() != cfg.input_dim || ds.num_classes() != cfg.num_classes {
        return Err(Error::Incompatible(format!(
            "head expects {} classes × {} dims, dataset has {} × {}",
            cfg.num_classes,
            cfg.input_dim,
            ds.num_classes(),
            ds.dim()
        )));
    }
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let mut records = Vec::with_capacity(ds.len());
    let mut features = Vec::with_capacity(ds.len());
    for chunk in ds.samples().chunks(512) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.embedding.as_slice()).collect();
        let (r, f) = predict_batch_with_features(&inputs, params)?;
        records.extend(r);
        features.extend(f);
    }
    let report = MetricsReport::build(&records, &ds.labels(), ds.num_classes(), &features)?;
    Ok(Evaluation {
        records,
        features,
        report,
    })
}

/// Result of one train+eval cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub params: HeadParameters,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Trains on `train` with `noise_percent`% flipped labels (noise seeded by
/// `cfg.seed`) and evaluates on `test`.
pub fn run_cell(train: &Dataset, test: &Dataset, cfg: &TrainConfig, noise_percent: f64) -> Result<CellOutcome> {
    run_cell_with_observer(train, test, cfg, noise_percent, |_, _| Ok(()))
}

pub fn run_cell_with_observer<F>(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    noise_percent: f64,
    observer: F,
) -> Result<CellOutcome>
where
    F: FnMut(&EpochRecord, &HeadParameters) -> Result<()>,
{
    let noisy = noisy_copy(train, noise_percent, cfg.seed)?;
    let (params, history) = train_with_observer(&noisy, test, cfg, observer)?;
    let report = evaluate(&params, test)?.report;
    Ok(CellOutcome {
        params,
        history,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Values are anchor counts `K`.
    Anchors,
    /// Values are label-noise percentages, crossed with the plan's anchor grid.
    Noise,
    /// Values are smoothing terms `s` (ε = s/100).
    Smoothing,
    /// Values multiply the base anchor-loss weight.
    LambdaA,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Anchors => "anchors",
            SweepAxis::Noise => "noise",
            SweepAxis::Smoothing => "smoothing",
            SweepAxis::LambdaA => "lambda-a",
        }
    }

    /// Standard ablation grid for each axis.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Anchors => vec![0.0, 1.0, 2.0, 4.0, 8.0],
            SweepAxis::Noise => vec![0.0, 10.0, 20.0, 30.0, 40.0],
            SweepAxis::Smoothing => vec![0.0, 10.0, 11.0, 20.0, 30.0, 50.0],
            SweepAxis::LambdaA => vec![0.0, 0.01, 1.0, 100.0],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchors" => Ok(SweepAxis::Anchors),
            "noise" => Ok(SweepAxis::Noise),
            "smoothing" => Ok(SweepAxis::Smoothing),
            "lambda-a" => Ok(SweepAxis::LambdaA),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected anchors, noise, smoothing or lambda-a)"
            ))),
        }
    }
}

/// What to sweep and over which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Anchor counts crossed with the values on the noise axis.
    pub noise_anchors: Vec<usize>,
    /// Label noise (percent) for every axis except `noise`.
    pub noise: f64,
    pub base: TrainConfig,
}

/// One independent train+eval run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: f64,
    pub anchors: usize,
    pub seed: u64,
    pub noise: f64,
    pub config: TrainConfig,
}

impl SweepCell {
    /// Stable name for the cell's output directory.
    pub fn slug(&self) -> String {
        format!("v{}_k{}_s{}", self.value, self.anchors, self.seed)
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.axis == SweepAxis::Noise && self.noise_anchors.is_empty() {
            return Err(Error::Config("noise sweep needs at least one anchor count".into()));
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Anchors => v >= 0.0 && v.fract() == 0.0 && v <= 4096.0,
                SweepAxis::Noise => (0.0..=100.0).contains(&v),
                SweepAxis::Smoothing => (0.0..100.0).contains(&v),
                SweepAxis::LambdaA => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("invalid {} value {v}", self.axis)));
            }
        }
        Ok(())
    }

    /// Cells in output order: value-major, then anchor grid (noise axis
    /// only), then seed.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        self.validate()?;
        let mut cells = Vec::new();
        for &value in &self.values {
            let grid: Vec<usize> = match self.axis {
                SweepAxis::Noise => self.noise_anchors.clone(),
                SweepAxis::Anchors => vec![value as usize],
                _ => vec![self.base.head.anchors_per_class],
            };
            for &anchors in &grid {
                for &seed in &self.seeds {
                    let mut config = self.base.clone();
                    config.seed = seed;
                    config.head.anchors_per_class = anchors;
                    let mut noise = self.noise;
                    match self.axis {
                        SweepAxis::Anchors => {}
                        SweepAxis::Noise => noise = value,
                        SweepAxis::Smoothing => config.smoothing = value,
                        SweepAxis::LambdaA => config.weights.anchor = self.base.weights.anchor * value,
                    }
                    cells.push(SweepCell {
                        value,
                        anchors,
                        seed,
                        noise,
                        config,
                    });
                }
            }
        }
        Ok(cells)
    }
}

/// One line of the long-form sweep table. Metric fields are `None` and
/// `error` is set when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub anchors: usize,
    pub seed: u64,
    pub noise: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

/// Runs every cell, concurrently, returning rows in [`SweepPlan::cells`]
/// order. `after` sees each finished cell; its error becomes that cell's
/// error row.
pub fn run_sweep<F>(plan: &SweepPlan, train: &Dataset, test: &Dataset, after: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&SweepCell, &CellOutcome) -> Result<()> + Sync,
{
    let cells = plan.cells()?;
    let rows = cells
        .par_iter()
        .map(|cell| {
            let outcome = run_cell(train, test, &cell.config, cell.noise).and_then(|o| after(cell, &o).map(|_| o));
            let mut row = SweepRow {
                axis: plan.axis,
                value: cell.value,
                anchors: cell.anchors,
                seed: cell.seed,
                noise: cell.noise,
                accuracy: None,
                precision: None,
                recall: None,
                f1: None,
                error: None,
            };
            match outcome {
                Ok(o) => {
                    row.accuracy = Some(o.report.accuracy);
                    row.precision = Some(o.report.precision);
                    row.recall = Some(o.report.recall);
                    row.f1 = Some(o.report.f1);
                }
                Err(e) => row.error = Some(format!("{}: {e}", e.class())),
            }
            row
        })
        .collect();
    Ok(rows)
}

fn cell_text(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Quotes a CSV field when it needs it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per cell.
pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,anchors,seed,noise,accuracy,precision,recall,f1,error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.anchors,
            r.seed,
            r.noise,
            cell_text(r.accuracy),
            cell_text(r.precision),
            cell_text(r.recall),
            cell_text(r.f1),
            csv_field(r.error.as_deref().unwrap_or(""))
        );
    }
    out
}

/// Mean and population standard deviation over successful seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub std: f64,
    pub ok: usize,
    pub failed: usize,
}

pub fn seed_stats(values: &[Option<f64>]) -> SeedStats {
    let ok: Vec<f64> = values.iter().flatten().copied().collect();
    let failed = values.len() - ok.len();
    if ok.is_empty() {
        return SeedStats {
            mean: f64::NAN,
            std: f64::NAN,
            ok: 0,
            failed,
        };
    }
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    let var = ok.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    SeedStats {
        mean,
        std: var.sqrt(),
        ok: ok.len(),
        failed,
    }
}

/// Seed statistics of accuracy for the cells matching `value` and `anchors`.
pub fn cell_accuracy(rows: &[SweepRow], value: f64, anchors: usize) -> SeedStats {
    let picked: Vec<Option<f64>> = rows
        .iter()
        .filter(|r| r.value == value && r.anchors == anchors)
        .map(|r| r.accuracy)
        .collect();
    seed_stats(&picked)
}

fn stats_text(s: SeedStats) -> String {
    if s.ok == 0 {
        String::new()
    } else {
        format!("{:.6},{:.6}", s.mean, s.std)
    }
}

/// Ablation table with per-cell seed spread.
///
/// The noise axis gives one row per anchor count and a mean/std column pair
/// per noise level. Every other axis gives one row per value with mean/std
/// of accuracy, precision, recall and F1.
pub fn summary_csv(plan: &SweepPlan, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    if plan.axis == SweepAxis::Noise {
        out.push_str("anchors");
        for v in &plan.values {
            let _ = write!(out, ",acc_noise{v},std_noise{v}");
        }
        out.push_str(",failed\n");
        for &k in &plan.noise_anchors {
            let _ = write!(out, "{k}");
            let mut failed = 0;
            for &v in &plan.values {
                let s = cell_accuracy(rows, v, k);
                failed += s.failed;
                let text = stats_text(s);
                let _ = write!(out, ",{}", if text.is_empty() { ",".into() } else { text });
            }
            let _ = writeln!(out, ",{failed}");
        }
        return out;
    }
    let _ = writeln!(
        out,
        "{},accuracy,accuracy_std,precision,precision_std,recall,recall_std,f1,f1_std,seeds,failed",
        plan.axis
    );
    for &v in &plan.values {
        let picked: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
        let column = |f: fn(&SweepRow) -> Option<f64>| seed_stats(&picked.iter().map(|r| f(r)).collect::<Vec<_>>());
        let stats = [
            column(|r| r.accuracy),
            column(|r| r.precision),
            column(|r| r.recall),
            column(|r| r.f1),
        ];
        let _ = write!(out, "{v}");
        for s in stats {
            let text = stats_text(s);
            let _ = write!(out, ",{}", if text.is_empty() { ",".into() } else { text });
        }
        let _ = writeln!(out, ",{},{}", stats[0].ok, stats[0].failed);
    }
    out
}
