use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relbal_core::data::SplitManifest;
use relbal_core::experiment::{
    evaluate, noisy_copy, rows_csv, run_sweep, summary_csv, Benchmark, SweepAxis, SweepPlan,
};
use relbal_core::head::HeadParameters;
use relbal_core::losses::Batch;
use relbal_core::train::{finite_difference_audit, train_with_observer};
use relbal_core::{Dataset, Error, RngState};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    AuditFailed(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::AuditFailed(_) => "audit-failed",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

/// Creates the output directory and records the resolved config in it.
fn prepare_output(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir(command)?;
    create_dir(&dir)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

pub fn parse_list<T: FromStr>(text: &str) -> std::result::Result<Vec<T>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list entry `{s}` in `{text}`"))))
        .collect()
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let bench = Benchmark {
        data: cfg.synthetic.clone(),
        train_per_class: cfg.train_per_class,
    };
    let (train, test) = bench.split()?;
    let dir = prepare_output(cfg, "gen")?;
    let ext = match cfg.format {
        relbal_core::data::DatasetFormat::Text => "txt",
        relbal_core::data::DatasetFormat::Binary => "bin",
    };
    let (train_name, test_name) = (format!("train.{ext}"), format!("test.{ext}"));
    train.write(&dir.join(&train_name), cfg.format)?;
    test.write(&dir.join(&test_name), cfg.format)?;
    let manifest = SplitManifest {
        train: train_name,
        test: test_name,
        seed: cfg.synthetic.seed,
        num_classes: Some(train.num_classes()),
        dim: Some(train.dim()),
        train_sha256: Some(train.checksum()),
        test_sha256: Some(test.checksum()),
    };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    println!(
        "wrote {} train and {} test samples ({} classes, dim {}) to {}",
        train.len(),
        test.len(),
        train.num_classes(),
        train.dim(),
        manifest_path.display()
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(Dataset, Dataset)> {
    let manifest = SplitManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |name: &str, sha: &Option<String>| -> Result<Dataset> {
        let ds = Dataset::read(&base.join(name))?;
        if let Some(expected) = sha {
            if &ds.checksum() != expected {
                return Err(Error::InvalidInput(format!("{name} does not match the checksum in {}", path.display())).into());
            }
        }
        Ok(ds)
    };
    Ok((load(&manifest.train, &manifest.train_sha256)?, load(&manifest.test, &manifest.test_sha256)?))
}

/// Train and test sets from `data` (a manifest) or the explicit paths.
fn load_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if let Some(manifest) = &cfg.data {
        return load_manifest(manifest);
    }
    match (&cfg.train_data, &cfg.test_data) {
        (Some(tr), Some(te)) => Ok((Dataset::read(tr)?, Dataset::read(te)?)),
        _ => Err(Error::Config("pass --data <manifest> or both --train-data and --test-data".into()).into()),
    }
}

fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(te) = &cfg.test_data {
        return Ok(Dataset::read(te)?);
    }
    if cfg.data.is_some() {
        return Ok(load_pair(cfg)?.1);
    }
    Err(Error::Config("pass --test-data or --data <manifest>".into()).into())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (train, test) = load_pair(cfg)?;
    let dir = prepare_output(cfg, "train")?;
    let noisy = noisy_copy(&train, cfg.noise, cfg.train.seed)?;
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let log_path = dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let (params, history) = train_with_observer(&noisy, &test, &cfg.train, |rec, params| {
        let line = serde_json::to_string(rec).expect("serializable");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if rec.eval_accuracy.is_some() {
            params.save(&ckpt_dir.join(format!("epoch-{:04}.ckpt", rec.epoch + 1)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    params.save(&dir.join("checkpoint.ckpt"))?;
    let report = evaluate(&params, &test)?.report;
    write_json(&dir.join("metrics.json"), &report)?;
    println!(
        "trained {} epochs; held-out accuracy {:.4}; outputs in {}",
        history.len(),
        report.accuracy,
        dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, dump_records: bool) -> Result<()> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("pass --checkpoint".into()))?;
    let params = HeadParameters::load(ckpt)?;
    let test = load_test(cfg)?;
    let evaluation = evaluate(&params, &test)?;
    let dir = prepare_output(cfg, "eval")?;
    write_json(&dir.join("metrics.json"), &evaluation.report)?;
    if dump_records {
        let path = dir.join("records.jsonl");
        let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for rec in &evaluation.records {
            let line = serde_json::to_string(rec).expect("serializable");
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
    }
    println!("{}", serde_json::to_string(&evaluation.report).expect("serializable"));
    Ok(())
}

pub struct SweepOptions {
    pub axis: SweepAxis,
    pub values: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub noise_anchors: Vec<usize>,
    pub threads: usize,
}

pub fn sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<()> {
    let (train, test) = if cfg.data.is_some() || cfg.train_data.is_some() {
        load_pair(cfg)?
    } else {
        Benchmark {
            data: cfg.synthetic.clone(),
            train_per_class: cfg.train_per_class,
        }
        .split()?
    };
    let plan = SweepPlan {
        axis: opts.axis,
        values: opts.values.clone().unwrap_or_else(|| opts.axis.default_values()),
        seeds: opts.seeds.clone(),
        noise_anchors: opts.noise_anchors.clone(),
        noise: cfg.noise,
        base: cfg.train.clone(),
    };
    plan.validate()?;
    let dir = prepare_output(cfg, "sweep")?;
    write_json(&dir.join("plan.json"), &plan)?;
    let cells_dir = dir.join("cells");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        run_sweep(&plan, &train, &test, |cell, outcome| {
            let cell_dir = cells_dir.join(cell.slug());
            fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
            let text = serde_json::to_string_pretty(&outcome.report).expect("serializable") + "\n";
            let path = cell_dir.join("metrics.json");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        })
    })?;
    write_file(&dir.join("rows.csv"), rows_csv(&rows))?;
    let summary = summary_csv(&plan, &rows);
    write_file(&dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see rows.csv", rows.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct AuditLine {
    instance: u64,
    coordinates: usize,
    max_rel_error: f64,
    failures: usize,
    worst_array: Option<String>,
    worst_offset: Option<usize>,
}

pub fn audit(cfg: &RunConfig, instances: u64, batch_size: usize, step: f64, tolerance: f64) -> Result<()> {
    if instances == 0 || batch_size == 0 {
        return Err(Error::Config("audit needs at least one instance and one sample".into()).into());
    }
    let mut head = cfg.train.head.clone();
    head.num_classes = cfg.synthetic.num_classes;
    head.input_dim = if head.reduction { cfg.synthetic.dim } else { head.dim };
    head.validate()?;
    let dir = prepare_output(cfg, "audit")?;
    let root = RngState::new(cfg.train.seed);
    let mut lines = String::new();
    let mut failing = 0;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = root.split(i);
        let params = HeadParameters::init(head.clone(), &mut rng)?;
        let inputs: Vec<Vec<f64>> = (0..batch_size)
            .map(|_| (0..head.input_dim).map(|_| rng.normal()).collect())
            .collect();
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.below(head.num_classes)).collect();
        let batch = Batch::new(
            inputs.iter().map(|x| x.as_slice()).collect(),
            labels,
            head.num_classes,
            cfg.train.smoothing,
        )?;
        let report = finite_difference_audit(&params, &batch, &cfg.train.weights, step, tolerance, Some(rng.next_u64()))?;
        failing += usize::from(!report.passed());
        worst = worst.max(report.max_rel_error);
        let line = AuditLine {
            instance: i,
            coordinates: report.coordinates,
            max_rel_error: report.max_rel_error,
            failures: report.failures.len(),
            worst_array: report.worst.as_ref().map(|w| w.array.clone()),
            worst_offset: report.worst.as_ref().map(|w| w.offset),
        };
        lines.push_str(&serde_json::to_string(&line).expect("serializable"));
        lines.push('\n');
    }
    write_file(&dir.join("audit.jsonl"), &lines)?;
    println!("{instances} instances, worst relative error {worst:.3e}, {failing} failing (tolerance {tolerance:e})");
    if failing > 0 {
        return Err(CliError::AuditFailed(format!(
            "{failing} of {instances} instances exceed tolerance {tolerance:e}"
        )));
    }
    Ok(())
}
