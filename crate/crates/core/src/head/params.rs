use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Shape of the head. Everything trainable is derived from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Width of the incoming embeddings.
    pub input_dim: usize,
    /// Width of the embedding space the head works in (`d`).
    pub dim: usize,
    pub num_classes: usize,
    /// Anchors per class (`K`); 0 disables anchor correction.
    pub anchors_per_class: usize,
    /// Width of both hidden MLP layers.
    pub hidden: usize,
    /// Number of tokens the embedding is split into for self-attention.
    pub tokens: usize,
    pub heads: usize,
    /// Softmax temperature `δ` of the anchor similarities.
    pub temperature: f64,
    pub dropout: f64,
    /// Learn a linear `input_dim → dim` reduction; identity otherwise
    /// (requires `input_dim == dim`).
    pub reduction: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            dim: 128,
            num_classes: 8,
            anchors_per_class: 8,
            hidden: 64,
            tokens: 8,
            heads: 4,
            temperature: 1.0,
            dropout: 0.5,
            reduction: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.dim == 0 || self.num_classes == 0 || self.hidden == 0 {
            return fail("dimensions and class count must be positive".into());
        }
        if !self.reduction && self.input_dim != self.dim {
            return fail(format!(
                "identity reduction needs input_dim == dim, got {} and {}",
                self.input_dim, self.dim
            ));
        }
        if self.tokens == 0 || !self.dim.is_multiple_of(self.tokens) {
            return fail(format!(
                "embedding dim {} is not divisible into {} tokens",
                self.dim, self.tokens
            ));
        }
        if self.heads == 0 || !self.token_dim().is_multiple_of(self.heads) {
            return fail(format!(
                "token dim {} is not divisible across {} heads",
                self.token_dim(),
                self.heads
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.dim / self.tokens
    }

    /// Per-head projection width.
    pub fn head_dim(&self) -> usize {
        self.token_dim() / self.heads
    }

    pub fn num_anchors(&self) -> usize {
        self.num_classes * self.anchors_per_class
    }
}

/// One named array inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Offsets of every trainable array in the flat parameter vector, in
/// declaration order. The same layout indexes gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub reduction_weight: Range<usize>,
    pub reduction_bias: Range<usize>,
    pub fc1_weight: Range<usize>,
    pub fc1_bias: Range<usize>,
    pub bn1_scale: Range<usize>,
    pub bn1_shift: Range<usize>,
    pub fc2_weight: Range<usize>,
    pub fc2_bias: Range<usize>,
    pub bn2_scale: Range<usize>,
    pub bn2_shift: Range<usize>,
    pub out_weight: Range<usize>,
    pub out_bias: Range<usize>,
    pub anchors: Range<usize>,
    pub query: Range<usize>,
    pub key: Range<usize>,
    pub value: Range<usize>,
    pub attn_out: Range<usize>,
    entries: Vec<ArraySpec>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &HeadConfig) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: &'static str, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let range = offset..offset + len;
            offset += len;
            if len > 0 {
                entries.push(ArraySpec {
                    name,
                    shape,
                    range: range.clone(),
                });
            }
            range
        };
        let (d, h, n) = (cfg.dim, cfg.hidden, cfg.num_classes);
        let red = if cfg.reduction { cfg.input_dim } else { 0 };
        let red_rows = if cfg.reduction { d } else { 0 };
        let proj = [cfg.heads, cfg.head_dim(), cfg.token_dim()];
        let reduction_weight = push("reduction.weight", vec![red_rows, red]);
        let reduction_bias = push("reduction.bias", vec![red_rows]);
        let fc1_weight = push("mlp.fc1.weight", vec![h, d]);
        let fc1_bias = push("mlp.fc1.bias", vec![h]);
        let bn1_scale = push("mlp.bn1.scale", vec![h]);
        let bn1_shift = push("mlp.bn1.shift", vec![h]);
        let fc2_weight = push("mlp.fc2.weight", vec![h, h]);
        let fc2_bias = push("mlp.fc2.bias", vec![h]);
        let bn2_scale = push("mlp.bn2.scale", vec![h]);
        let bn2_shift = push("mlp.bn2.shift", vec![h]);
        let out_weight = push("mlp.out.weight", vec![n, h]);
        let out_bias = push("mlp.out.bias", vec![n]);
        let anchors = push("anchors", vec![n, cfg.anchors_per_class, d]);
        let query = push("attention.query", proj.to_vec());
        let key = push("attention.key", proj.to_vec());
        let value = push("attention.value", proj.to_vec());
        let attn_out = push("attention.out", vec![n, cfg.heads * cfg.head_dim()]);
        Self {
            reduction_weight,
            reduction_bias,
            fc1_weight,
            fc1_bias,
            bn1_scale,
            bn1_shift,
            fc2_weight,
            fc2_bias,
            bn2_scale,
            bn2_shift,
            out_weight,
            out_bias,
            anchors,
            query,
            key,
            value,
            attn_out,
            entries,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[ArraySpec] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn find(&self, name: &str) -> Option<&ArraySpec> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Name of the array containing flat coordinate `index`.
    pub fn locate(&self, index: usize) -> Option<(&'static str, usize)> {
        self.entries
            .iter()
            .find(|e| e.range.contains(&index))
            .map(|e| (e.name, index - e.range.start))
    }
}

/// Running batch-norm statistics for the two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: [Vec<f64>; 2],
    pub var: [Vec<f64>; 2],
}

impl BatchNormStats {
    fn new(width: usize) -> Self {
        Self {
            mean: [vec![0.0; width], vec![0.0; width]],
            var: [vec![1.0; width], vec![1.0; width]],
        }
    }
}

/// All head state: trainable values in one flat vector plus running
/// batch-norm statistics. Anchor label distributions are fixed one-hots and
/// are derived from the anchor's class, not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    config: HeadConfig,
    layout: Layout,
    pub(crate) values: Vec<f64>,
    pub(crate) bn: BatchNormStats,
}

impl HeadParameters {
    /// Linear maps ~ N(0, 1/fan_in), biases 0, batch-norm scale 1 / shift 0,
    /// anchors ~ N(0, 1/d).
    pub fn init(config: HeadConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut values = vec![0.0; layout.len()];
        let mut fill = |range: &Range<usize>, std: f64| {
            for v in &mut values[range.clone()] {
                *v = std * rng.normal();
            }
        };
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        fill(&layout.reduction_weight, inv_sqrt(config.input_dim));
        fill(&layout.fc1_weight, inv_sqrt(config.dim));
        fill(&layout.fc2_weight, inv_sqrt(config.hidden));
        fill(&layout.out_weight, inv_sqrt(config.hidden));
        fill(&layout.anchors, inv_sqrt(config.dim));
        fill(&layout.query, inv_sqrt(config.token_dim()));
        fill(&layout.key, inv_sqrt(config.token_dim()));
        fill(&layout.value, inv_sqrt(config.token_dim()));
        fill(&layout.attn_out, inv_sqrt(config.heads * config.head_dim()));
        for r in [&layout.bn1_scale, &layout.bn2_scale] {
            values[r.clone()].fill(1.0);
        }
        let bn = BatchNormStats::new(config.hidden);
        Ok(Self {
            config,
            layout,
            values,
            bn,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn batch_norm(&self) -> &BatchNormStats {
        &self.bn
    }

    pub fn batch_norm_mut(&mut self) -> &mut BatchNormStats {
        &mut self.bn
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        let spec = self.layout.find(name)?;
        Some(&self.values[spec.range.clone()])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range.clone();
        Some(&mut self.values[range])
    }

    /// Anchor `j` of class `i`.
    pub fn anchor(&self, class: usize, j: usize) -> &[f64] {
        let d = self.config.dim;
        let start = self.layout.anchors.start + (class * self.config.anchors_per_class + j) * d;
        &self.values[start..start + d]
    }

    pub fn anchors(&self) -> &[f64] {
        &self.values[self.layout.anchors.clone()]
    }

    /// Fixed label distribution `m` of the anchors of `class`: a one-hot.
    pub fn anchor_label(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.config.num_classes];
        m[class] = 1.0;
        m
    }

    /// Maps an input embedding into the head's embedding space.
    pub fn reduce(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "embedding has {} features, head expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding is not finite".into()));
        }
        if !self.config.reduction {
            return Ok(x.to_vec());
        }
        let mut e = self.values[self.layout.reduction_bias.clone()].to_vec();
        let w = &self.values[self.layout.reduction_weight.clone()];
        for (r, out) in e.iter_mut().enumerate() {
            *out += crate::numerics::dot(&w[r * x.len()..(r + 1) * x.len()], x);
        }
        Ok(e)
    }

    /// Checkpoint layout, little-endian throughout:
    ///
    /// ```text
    /// magic "RBHEADCK" | u32 version | u32 N | u32 K | u32 d | u32 T | u32 n_heads | f64 δ
    /// u32 array count
    /// per array: u32 name length | name bytes | u32 rank | u32 dims… | f64 values…
    /// ```
    ///
    /// Arrays follow declaration order, then the four running batch-norm
    /// arrays. Input width, hidden width and the presence of a reduction layer
    /// are recovered from array shapes.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            c.num_classes as u32,
            c.anchors_per_class as u32,
            c.dim as u32,
            c.tokens as u32,
            c.heads as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.temperature.to_le_bytes())?;
        let bn_arrays: [(&str, &Vec<f64>); 4] = [
            ("mlp.bn1.running_mean", &self.bn.mean[0]),
            ("mlp.bn1.running_var", &self.bn.var[0]),
            ("mlp.bn2.running_mean", &self.bn.mean[1]),
            ("mlp.bn2.running_var", &self.bn.var[1]),
        ];
        let count = self.layout.entries().len() + bn_arrays.len();
        w.write_all(&(count as u32).to_le_bytes())?;
        let mut write_array = |name: &str, shape: &[usize], data: &[f64]| -> std::io::Result<()> {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &s in shape {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for e in self.layout.entries() {
            write_array(e.name, &e.shape, &self.values[e.range.clone()])?;
        }
        for (name, data) in bn_arrays {
            write_array(name, &[data.len()], data)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Incompatible("not a head checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let t = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let temperature = r.f64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Incompatible("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let size: usize = shape.iter().product();
            let data = (0..size).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Incompatible("trailing bytes after checkpoint arrays".into()));
        }
        let shape_of = |name: &str| arrays.iter().find(|a| a.0 == name).map(|a| a.1.clone());
        let hidden = shape_of("mlp.fc1.weight")
            .and_then(|s| s.first().copied())
            .ok_or_else(|| Error::Incompatible("missing array mlp.fc1.weight".into()))?;
        let (reduction, input_dim) = match shape_of("reduction.weight") {
            Some(s) if s.len() == 2 => (true, s[1]),
            Some(_) => return Err(Error::Incompatible("reduction.weight must be rank 2".into())),
            None => (false, d),
        };
        let config = HeadConfig {
            input_dim,
            dim: d,
            num_classes: n,
            anchors_per_class: k,
            hidden,
            tokens: t,
            heads,
            temperature,
            dropout: HeadConfig::default().dropout,
            reduction,
        };
        config
            .validate()
            .map_err(|e| Error::Incompatible(format!("header describes an invalid head: {e}")))?;
        let layout = Layout::new(&config);
        let mut values = vec![0.0; layout.len()];
        let mut bn = BatchNormStats::new(hidden);
        let mut seen = vec![false; layout.entries().len()];
        for (name, shape, data) in arrays {
            if let Some(pos) = layout.entries().iter().position(|e| e.name == name) {
                let spec = &layout.entries()[pos];
                if shape != spec.shape {
                    return Err(Error::Incompatible(format!(
                        "array {name} has shape {shape:?}, header implies {:?}",
                        spec.shape
                    )));
                }
                values[spec.range.clone()].copy_from_slice(&data);
                seen[pos] = true;
                continue;
            }
            let slot = match name.as_str() {
                "mlp.bn1.running_mean" => &mut bn.mean[0],
                "mlp.bn1.running_var" => &mut bn.var[0],
                "mlp.bn2.running_mean" => &mut bn.mean[1],
                "mlp.bn2.running_var" => &mut bn.var[1],
                other => return Err(Error::Incompatible(format!("unexpected array {other}"))),
            };
            if shape != [hidden] {
                return Err(Error::Incompatible(format!(
                    "array {name} has shape {shape:?}, expected [{hidden}]"
                )));
            }
            slot.copy_from_slice(&data);
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(Error::Incompatible(format!(
                "missing array {}",
                layout.entries()[pos].name
            )));
        }
        Ok(Self {
            config,
            layout,
            values,
            bn,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RBHEADCK";
const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Incompatible("checkpoint is truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HeadConfig {
        HeadConfig {
            input_dim: 6,
            dim: 8,
            num_classes: 3,
            anchors_per_class: 2,
            hidden: 5,
            tokens: 2,
            heads: 2,
            temperature: 0.7,
            dropout: 0.5,
            reduction: true,
        }
    }

    #[test]
    fn layout_is_contiguous_and_ordered() {
        let layout = Layout::new(&tiny());
        let mut end = 0;
        for e in layout.entries() {
            assert_eq!(e.range.start, end);
            assert_eq!(e.range.len(), e.shape.iter().product::<usize>());
            end = e.range.end;
        }
        assert_eq!(end, layout.len());
        assert_eq!(layout.entries()[0].name, "reduction.weight");
        assert_eq!(layout.locate(layout.anchors.start + 3), Some(("anchors", 3)));
    }

    #[test]
    fn disabled_parts_take_no_space() {
        let cfg = HeadConfig {
            anchors_per_class: 0,
            reduction: false,
            input_dim: 8,
            ..tiny()
        };
        let layout = Layout::new(&cfg);
        assert!(layout.anchors.is_empty());
        assert!(layout.find("anchors").is_none());
        assert!(layout.find("reduction.weight").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::default().validate().is_ok());
        let bad_tokens = HeadConfig { tokens: 3, ..tiny() };
        assert!(matches!(bad_tokens.validate(), Err(Error::Config(_))));
        let bad_heads = HeadConfig { heads: 3, ..tiny() };
        assert!(bad_heads.validate().is_err());
        let bad_identity = HeadConfig {
            reduction: false,
            ..tiny()
        };
        assert!(bad_identity.validate().is_err());
        let bad_delta = HeadConfig {
            temperature: 0.0,
            ..tiny()
        };
        assert!(bad_delta.validate().is_err());
    }

    #[test]
    fn default_geometry() {
        let c = HeadConfig::default();
        assert_eq!(c.token_dim(), 16);
        assert_eq!(c.head_dim(), 4);
        assert_eq!(c.num_anchors(), 64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = HeadParameters::init(tiny(), &mut RngState::new(4)).unwrap();
        p.bn.mean[1][2] = 0.25;
        p.bn.var[0][0] = 3.5;
        let bytes = p.to_checkpoint_bytes();
        let q = HeadParameters::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let p = HeadParameters::init(tiny(), &mut RngState::new(4)).unwrap();
        let mut bytes = p.to_checkpoint_bytes();
        assert!(matches!(
            HeadParameters::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Incompatible(_))
        ));
        // Claim K = 3 in the header; the anchors array no longer fits.
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        let err = HeadParameters::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("anchors"), "{err}");
        assert!(HeadParameters::from_checkpoint_bytes(b"garbage!").is_err());
    }

    #[test]
    fn reduce_checks_width() {
        let p = HeadParameters::init(tiny(), &mut RngState::new(1)).unwrap();
        assert_eq!(p.reduce(&[0.0; 6]).unwrap().len(), 8);
        assert!(matches!(p.reduce(&[0.0; 8]), Err(Error::Shape(_))));
    }
}
