//! Flat `key = value` run configuration shared by every command.
//!
//! Every key can also be given as a `--key value` flag; flags win over the
//! file. The fully resolved configuration is written next to each command's
//! outputs and can be fed back with `--config` to reproduce the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relbal_core::data::DatasetFormat;
use relbal_core::{Error, Result, SyntheticSpec, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RELBAL_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train_per_class: usize,
    pub format: DatasetFormat,
    /// Percentage of training labels flipped before training.
    pub noise: f64,
    pub train: TrainConfig,
    /// Split manifest written by `gen`; supplies both dataset paths.
    pub data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            train_per_class: 1000,
            format: DatasetFormat::Text,
            noise: 0.0,
            train: TrainConfig::default(),
            data: None,
            train_data: None,
            test_data: None,
            checkpoint: None,
            out: None,
        }
    }
}

/// Every accepted key, in the order the resolved file lists them.
pub const KEYS: &[&str] = &[
    "classes",
    "dim",
    "per-class",
    "spread",
    "separation",
    "data-seed",
    "train-per-class",
    "format",
    "noise",
    "epochs",
    "lr",
    "decay",
    "batch-size",
    "lambda-cls",
    "lambda-a",
    "lambda-c",
    "smoothing",
    "refine-per-group",
    "refine-per-class",
    "anchors",
    "temperature",
    "tokens",
    "heads",
    "hidden",
    "dropout",
    "reduction",
    "head-dim",
    "seed",
    "eval-every",
    "grad-clip",
    "data",
    "train-data",
    "test-data",
    "checkpoint",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` cannot be `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{value}`"))),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "classes" => self.synthetic.num_classes = parse(key, value)?,
            "dim" => self.synthetic.dim = parse(key, value)?,
            "per-class" => self.synthetic.per_class = parse(key, value)?,
            "spread" => self.synthetic.spread = parse(key, value)?,
            "separation" => self.synthetic.separation = parse(key, value)?,
            "data-seed" => self.synthetic.seed = parse(key, value)?,
            "train-per-class" => self.train_per_class = parse(key, value)?,
            "format" => {
                self.format = match value {
                    "text" => DatasetFormat::Text,
                    "binary" => DatasetFormat::Binary,
                    _ => return Err(Error::Config(format!("`format` must be text or binary, got `{value}`"))),
                }
            }
            "noise" => self.noise = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr" => t.base_lr = parse(key, value)?,
            "decay" => t.decay = parse(key, value)?,
            "batch-size" => t.batch_size = parse(key, value)?,
            "lambda-cls" => t.weights.cls = parse(key, value)?,
            "lambda-a" => t.weights.anchor = parse(key, value)?,
            "lambda-c" => t.weights.center = parse(key, value)?,
            "smoothing" => t.smoothing = parse(key, value)?,
            "refine-per-group" => t.per_group = parse(key, value)?,
            "refine-per-class" => t.per_class = parse(key, value)?,
            "anchors" => t.head.anchors_per_class = parse(key, value)?,
            "temperature" => t.head.temperature = parse(key, value)?,
            "tokens" => t.head.tokens = parse(key, value)?,
            "heads" => t.head.heads = parse(key, value)?,
            "hidden" => t.head.hidden = parse(key, value)?,
            "dropout" => t.head.dropout = parse(key, value)?,
            "reduction" => t.head.reduction = parse_bool(key, value)?,
            "head-dim" => t.head.dim = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval-every" => t.eval_every = parse(key, value)?,
            "grad-clip" => {
                t.grad_clip = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data" => self.data = path_or_none(value),
            "train-data" => self.train_data = path_or_none(value),
            "test-data" => self.test_data = path_or_none(value),
            "checkpoint" => self.checkpoint = path_or_none(value),
            "out" => self.out = path_or_none(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        match key {
            "classes" => self.synthetic.num_classes.to_string(),
            "dim" => self.synthetic.dim.to_string(),
            "per-class" => self.synthetic.per_class.to_string(),
            "spread" => format!("{:?}", self.synthetic.spread),
            "separation" => format!("{:?}", self.synthetic.separation),
            "data-seed" => self.synthetic.seed.to_string(),
            "train-per-class" => self.train_per_class.to_string(),
            "format" => match self.format {
                DatasetFormat::Text => "text".into(),
                DatasetFormat::Binary => "binary".into(),
            },
            "noise" => format!("{:?}", self.noise),
            "epochs" => t.epochs.to_string(),
            "lr" => format!("{:?}", t.base_lr),
            "decay" => format!("{:?}", t.decay),
            "batch-size" => t.batch_size.to_string(),
            "lambda-cls" => format!("{:?}", t.weights.cls),
            "lambda-a" => format!("{:?}", t.weights.anchor),
            "lambda-c" => format!("{:?}", t.weights.center),
            "smoothing" => format!("{:?}", t.smoothing),
            "refine-per-group" => t.per_group.to_string(),
            "refine-per-class" => t.per_class.to_string(),
            "anchors" => t.head.anchors_per_class.to_string(),
            "temperature" => format!("{:?}", t.head.temperature),
            "tokens" => t.head.tokens.to_string(),
            "heads" => t.head.heads.to_string(),
            "hidden" => t.head.hidden.to_string(),
            "dropout" => format!("{:?}", t.head.dropout),
            "reduction" => t.head.reduction.to_string(),
            "head-dim" => t.head.dim.to_string(),
            "seed" => t.seed.to_string(),
            "eval-every" => t.eval_every.to_string(),
            "grad-clip" => t.grad_clip.map_or("none".into(), |c| format!("{c:?}")),
            "data" => path(&self.data),
            "train-data" => path(&self.train_data),
            "test-data" => path(&self.test_data),
            "checkpoint" => path(&self.checkpoint),
            "out" => path(&self.out),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Applies a config file's lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// `--out`, else `$RELBAL_OUT/<command>`.
    pub fn output_dir(&self, command: &str) -> Result<PathBuf> {
        if let Some(out) = &self.out {
            return Ok(out.clone());
        }
        match std::env::var_os(OUT_ENV) {
            Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(command)),
            _ => Err(Error::Config(format!(
                "no output directory: pass --out or set {OUT_ENV}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        let mut back = RunConfig::default();
        back.train.epochs = 3;
        back.apply_text(&text, "resolved").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn values_are_parsed() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\nclasses = 3\n\ndim=16\nreduction = false  # inline\ngrad-clip = 2.5\nformat = binary\nout = /tmp/x\n",
            "f",
        )
        .unwrap();
        assert_eq!((cfg.synthetic.num_classes, cfg.synthetic.dim), (3, 16));
        assert!(!cfg.train.head.reduction);
        assert_eq!(cfg.train.grad_clip, Some(2.5));
        assert_eq!(cfg.format, DatasetFormat::Binary);
        assert_eq!(cfg.out, Some(PathBuf::from("/tmp/x")));
        let again = {
            let mut c = RunConfig::default();
            c.apply_text(&cfg.to_text(), "r").unwrap();
            c
        };
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("epochs = 3\nbogus = 1\n", "run.cfg").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = cfg.apply_text("epochs = many\n", "run.cfg").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = cfg.apply_text("epochs\n", "run.cfg").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
