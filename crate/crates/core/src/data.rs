//! Embedding datasets, synthetic generation, label noise, label smoothing and
//! the per-epoch balanced sampler.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embedding: Vec<f64>,
    pub label: usize,
    /// Video / identity id. `None` means the sample is its own group.
    pub group: Option<u32>,
}

/// Immutable collection of labelled embeddings sharing one width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidInput("dataset needs at least one class and dimension".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, dataset dim is {dim}",
                    s.embedding.len()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.label
                )));
            }
            if s.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {i} has non-finite features")));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Same samples with replaced labels.
    pub fn with_labels(&self, labels: &[usize]) -> Result<Dataset> {
        if labels.len() != self.samples.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &label)| Sample {
                label,
                ..s.clone()
            })
            .collect();
        Dataset::new(samples, self.num_classes, self.dim)
    }

    /// Splits each class into its first `train_per_class` samples (in dataset
    /// order) and the rest.
    pub fn split_per_class(&self, train_per_class: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.num_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for s in &self.samples {
            if seen[s.label] < train_per_class {
                train.push(s.clone());
            } else {
                test.push(s.clone());
            }
            seen[s.label] += 1;
        }
        let mk = |samples| Dataset {
            samples,
            num_classes: self.num_classes,
            dim: self.dim,
        };
        (mk(train), mk(test))
    }

    /// Text format: header `d N`, then `label group v1 … vd` per sample, with
    /// `-` for a missing group.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim, self.num_classes);
        for s in &self.samples {
            let _ = write!(out, "{} ", s.label);
            match s.group {
                Some(g) => {
                    let _ = write!(out, "{g}");
                }
                None => out.push('-'),
            }
            for v in &s.embedding {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut head = header.split_whitespace();
        let dim: usize = head
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(1, "header must be `d N`".into()))?;
        let num_classes: usize = head
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(1, "header must be `d N`".into()))?;
        if head.next().is_some() || dim == 0 || num_classes == 0 {
            return Err(err(1, "header must be `d N` with positive values".into()));
        }
        let mut samples = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let label: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(line_no, "bad label".into()))?;
            if label >= num_classes {
                return Err(err(line_no, format!("label {label} out of range for {num_classes} classes")));
            }
            let group = match toks.next() {
                Some("-") => None,
                Some(t) => Some(t.parse().map_err(|_| err(line_no, format!("bad group `{t}`")))?),
                None => return Err(err(line_no, "missing group".into())),
            };
            let embedding = toks
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line_no, format!("bad feature value `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if embedding.len() != dim {
                return Err(err(
                    line_no,
                    format!("expected {dim} features, found {}", embedding.len()),
                ));
            }
            samples.push(Sample {
                embedding,
                label,
                group,
            });
        }
        Dataset::new(samples, num_classes, dim)
    }

    /// Binary format, all little-endian: magic `RBDS`, `u32` sample count,
    /// `u32` dim, `u32` class count, then per sample `u32` label, `u32` group
    /// (`u32::MAX` for none) and `dim` `f64` features.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.samples.len() * (8 + 8 * self.dim));
        out.extend_from_slice(BINARY_MAGIC);
        for v in [self.samples.len(), self.dim, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.extend_from_slice(&s.group.unwrap_or(u32::MAX).to_le_bytes());
            for v in &s.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8], source_name: &str) -> Result<Self> {
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: 0,
            message,
        };
        if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
            return Err(err("missing binary dataset header".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let (n, dim, num_classes) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize);
        let record = 8 + 8 * dim;
        if bytes.len() != 16 + n * record {
            return Err(err(format!(
                "expected {} bytes for {n} samples of dim {dim}, found {}",
                16 + n * record,
                bytes.len()
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let base = 16 + i * record;
            let label = u32_at(base) as usize;
            let group = match u32_at(base + 4) {
                u32::MAX => None,
                g => Some(g),
            };
            let embedding = bytes[base + 8..base + record]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            samples.push(Sample {
                embedding,
                label,
                group,
            });
        }
        Dataset::new(samples, num_classes, dim)
    }

    /// Reads either format; binary files are recognized by their magic.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes, &name)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
                source_name: name.clone(),
                line: 0,
                message: "not UTF-8 text and no binary header".into(),
            })?;
            Self::from_text(&text, &name)
        }
    }

    pub fn write(&self, path: &Path, format: DatasetFormat) -> Result<()> {
        let bytes = match format {
            DatasetFormat::Text => self.to_text().into_bytes(),
            DatasetFormat::Binary => self.to_binary(),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the binary encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_binary()))
    }
}

const BINARY_MAGIC: &[u8; 4] = b"RBDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Text,
    Binary,
}

/// Train/test pointers written next to generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: String,
    pub test: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_sha256: Option<String>,
}

impl SplitManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Parameters of the Gaussian-cluster stand-in for backbone embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Isotropic per-class standard deviation.
    pub spread: f64,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 128,
            per_class: 1200,
            spread: 1.0,
            separation: 2.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic data needs classes ≥ 1 and dim ≥ 1".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!("spread must be positive, got {}", self.spread)));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be nonnegative, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    /// Class means: isotropic normal directions scaled to the separation radius.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = RngState::new(self.seed).split(0);
        (0..self.num_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x *= self.separation / norm;
                }
                v
            })
            .collect()
    }
}

/// Draws `per_class` samples for every class, interleaved class by class
/// (sample 0 of every class, then sample 1, …). Group id = class index.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = RngState::new(spec.seed).split(1);
    let mut samples = Vec::with_capacity(spec.per_class * spec.num_classes);
    for _ in 0..spec.per_class {
        for (label, mean) in means.iter().enumerate() {
            let embedding = mean.iter().map(|m| m + spec.spread * rng.normal()).collect();
            samples.push(Sample {
                embedding,
                label,
                group: Some(label as u32),
            });
        }
    }
    Dataset::new(samples, spec.num_classes, spec.dim)
}

/// Symmetric label flips: each label independently, with probability `rate`,
/// moves to a uniformly chosen *different* class.
pub fn inject_label_noise(ds: &Dataset, rate: f64, rng: &mut RngState) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("noise rate {rate} outside [0, 1]")));
    }
    let n = ds.num_classes();
    let labels: Vec<usize> = ds
        .samples()
        .iter()
        .map(|s| {
            // The flip coin is drawn for every sample so the stream position
            // does not depend on earlier outcomes.
            let flip = rng.bernoulli(rate);
            if flip && n > 1 {
                (s.label + 1 + rng.below(n - 1)) % n
            } else {
                s.label
            }
        })
        .collect();
    ds.with_labels(&labels)
}

/// Uniform label smoothing with `ε = term / 100`: `(1 − ε)·y + ε/N`.
pub fn smooth_labels(y: &[f64], term: f64) -> Result<Vec<f64>> {
    if !(0.0..100.0).contains(&term) {
        return Err(Error::InvalidInput(format!(
            "smoothing term must be in [0, 100), got {term}"
        )));
    }
    let eps = term / 100.0;
    let uniform = eps / y.len() as f64;
    Ok(y.iter().map(|&v| (1.0 - eps) * v + uniform).collect())
}

/// One-hot target for `label`, smoothed by `term`.
pub fn smoothed_target(label: usize, num_classes: usize, term: f64) -> Result<Vec<f64>> {
    let mut y = vec![0.0; num_classes];
    y[label] = 1.0;
    smooth_labels(&y, term)
}

/// Two-stage balanced sampling, returning indices into `ds`.
///
/// Stage 1 draws up to `per_group` samples without replacement from every
/// group (groups visited in ascending id order, ungrouped samples each their
/// own group) into a pool. Stage 2 takes exactly `per_class` samples of every
/// class from the pool: without replacement when the class has enough pooled
/// samples, otherwise every pooled sample once plus uniform draws with
/// replacement for the remainder. The result is shuffled.
pub fn refine_indices(ds: &Dataset, per_group: usize, per_class: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if per_group == 0 || per_class == 0 {
        return Err(Error::InvalidInput("per-group and per-class counts must be ≥ 1".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut pool = Vec::new();
    for (i, s) in ds.samples().iter().enumerate() {
        match s.group {
            Some(g) => groups.entry(g).or_default().push(i),
            None => pool.push(i),
        }
    }
    for members in groups.values() {
        let picks = rng.sample_without_replacement(members.len(), per_group);
        pool.extend(picks.into_iter().map(|p| members[p]));
    }
    pool.sort_unstable();

    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for &i in &pool {
        by_class[ds.samples()[i].label].push(i);
    }
    let mut out = Vec::with_capacity(per_class * ds.num_classes());
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::MissingClass { class });
        }
        if members.len() >= per_class {
            let picks = rng.sample_without_replacement(members.len(), per_class);
            out.extend(picks.into_iter().map(|p| members[p]));
        } else {
            out.extend_from_slice(members);
            for _ in members.len()..per_class {
                out.push(members[rng.below(members.len())]);
            }
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// [`refine_indices`] materialized as a dataset.
pub fn refine_batch(ds: &Dataset, per_group: usize, per_class: usize, rng: &mut RngState) -> Result<Dataset> {
    Ok(ds.select(&refine_indices(ds, per_group, per_class, rng)?))
}
