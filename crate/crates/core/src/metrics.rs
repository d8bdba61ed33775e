//! Classification metrics, cluster validity indices and distribution
//! stability statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{confidence, PredictionRecord};
use crate::numerics::squared_distance;

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `confusion[truth][pred]` counts.
pub fn confusion_matrix(preds: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidInput(format!("class index out of range: pred {p}, truth {t}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted class means of precision, recall and F1 (F1 per class, then
/// averaged). Any 0/0 counts as 0.
pub fn macro_prf(confusion: &[Vec<u64>]) -> Result<MacroScores> {
    let n = confusion.len();
    if n == 0 || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("confusion matrix must be square and nonempty".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let tp = confusion[c][c];
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let nf = n as f64;
    Ok(MacroScores {
        precision: p_sum / nf,
        recall: r_sum / nf,
        f1: f_sum / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

/// Davies–Bouldin (mean over clusters of the worst `(σ_i + σ_j)/‖c_i − c_j‖`,
/// σ the mean distance to the centroid) and Calinski–Harabasz
/// (`[B/(k−1)] / [W/(n−k)]` with between/within dispersions B, W) over the
/// classes present in `labels`.
pub fn cluster_scores(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<ClusterScores> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let Some(dim) = embeddings.first().map(Vec::len) else {
        return Err(Error::InvalidInput("no embeddings".into()));
    };
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; max_label + 1];
    let mut counts = vec![0usize; max_label + 1];
    for (e, &y) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::Shape("embeddings of different widths".into()));
        }
        counts[y] += 1;
        for (s, x) in sums[y].iter_mut().zip(e) {
            *s += x;
        }
    }
    let present: Vec<usize> = (0..=max_label).filter(|&c| counts[c] > 0).collect();
    let k = present.len();
    if k < 2 {
        return Err(Error::InvalidInput("cluster scores need at least two classes".into()));
    }
    let centroids: Vec<Vec<f64>> = (0..=max_label)
        .map(|c| sums[c].iter().map(|s| s / counts[c].max(1) as f64).collect())
        .collect();
    let n = embeddings.len();
    let overall: Vec<f64> = (0..dim)
        .map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n as f64)
        .collect();

    let mut scatter = vec![0.0; max_label + 1];
    let mut within = 0.0;
    for (e, &y) in embeddings.iter().zip(labels) {
        let sq = squared_distance(e, &centroids[y]);
        scatter[y] += sq.sqrt();
        within += sq;
    }
    for &c in &present {
        scatter[c] /= counts[c] as f64;
    }
    let mut db = 0.0;
    for &i in &present {
        let worst = present
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| {
                let sep = squared_distance(&centroids[i], &centroids[j]).sqrt();
                if sep == 0.0 {
                    f64::INFINITY
                } else {
                    (scatter[i] + scatter[j]) / sep
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        db += worst;
    }
    db /= k as f64;

    let between: f64 = present
        .iter()
        .map(|&c| counts[c] as f64 * squared_distance(&centroids[c], &overall))
        .sum();
    let ch = if n == k || within == 0.0 {
        f64::INFINITY
    } else {
        (between / (k - 1) as f64) / (within / (n - k) as f64)
    };
    Ok(ClusterScores {
        davies_bouldin: db,
        calinski_harabasz: ch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    /// Population standard deviation over every entry of every primary distribution.
    pub primary_std: f64,
    /// Same over every final distribution.
    pub corrected_std: f64,
    pub mean_confidence_primary: f64,
    pub mean_confidence_corrected: f64,
}

pub fn stability_stats(records: &[PredictionRecord]) -> Result<StabilityStats> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no prediction records".into()));
    }
    let std_of = |f: fn(&PredictionRecord) -> &Vec<f64>| {
        let values: Vec<f64> = records.iter().flat_map(|r| f(r).iter().copied()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
    };
    let n = records.len() as f64;
    Ok(StabilityStats {
        primary_std: std_of(|r| &r.primary),
        corrected_std: std_of(|r| &r.final_dist),
        mean_confidence_primary: records.iter().map(|r| confidence(&r.primary)).sum::<f64>() / n,
        mean_confidence_corrected: records.iter().map(|r| confidence(&r.final_dist)).sum::<f64>() / n,
    })
}

/// Everything `eval` reports, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
    pub primary_std: f64,
    pub corrected_std: f64,
    pub mean_confidence_primary: f64,
    pub mean_confidence_corrected: f64,
}

impl MetricsReport {
    /// Builds the report from predictions, true labels and the embeddings the
    /// cluster indices are computed on.
    pub fn build(records: &[PredictionRecord], truth: &[usize], num_classes: usize, cluster_space: &[Vec<f64>]) -> Result<Self> {
        let preds: Vec<usize> = records.iter().map(|r| r.label).collect();
        let confusion = confusion_matrix(&preds, truth, num_classes)?;
        let prf = macro_prf(&confusion)?;
        let clusters = cluster_scores(cluster_space, truth)?;
        let stab = stability_stats(records)?;
        Ok(Self {
            accuracy: accuracy(&preds, truth)?,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            confusion,
            davies_bouldin: clusters.davies_bouldin,
            calinski_harabasz: clusters.calinski_harabasz,
            primary_std: stab.primary_std,
            corrected_std: stab.corrected_std,
            mean_confidence_primary: stab.mean_confidence_primary,
            mean_confidence_corrected: stab.mean_confidence_corrected,
        })
    }
}
