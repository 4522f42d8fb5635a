//! Command implementations behind the `mscloudcam` binary. Each command
//! writes human-readable output to `out` and files under its run directory.

pub mod render;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mscloudcam::config::{KvFile, ModelConfig};
use mscloudcam::datapipe::{collate, load_mst, save_mst, MstFile, RasterSample, IGNORE_LABEL};
use mscloudcam::gradsuite::{run_suite, Scope};
use mscloudcam::metrics::{emit_csv, emit_table, ConfusionMatrix};
use mscloudcam::model::{
    argmax_classes, count_params, estimate_flops, load_checkpoint, Checkpoint, MsCloudCam,
    PAPER_GFLOPS, PAPER_PARAMS,
};
use mscloudcam::params::ParamStore;
use mscloudcam::train::{TrainSettings, Trainer, LOG_HEADER};
use mscloudcam::Error;

pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.msck";
pub const TRAIN_LOG: &str = "train.log";

/// Failure of a command, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Checks ran but some did not pass.
    Failed(String),
}

impl CliError {
    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Numeric(_) | Error::Autodiff(_) => 4,
                // malformed rasters and manifests; config-file syntax is remapped on load
                Error::Data(_)
                | Error::Parse { .. }
                | Error::Shape { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. } => 3,
            },
            CliError::Failed(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numeric",
        }
    }
}

impl fmt::Display for CliError {
    /// `error[<kind>]: <message>` on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Core(e) => e.to_string(),
            CliError::Failed(m) => m.clone(),
        };
        write!(
            f,
            "error[{}]: {}",
            self.kind(),
            msg.replace(['\n', '\r'], " ")
        )
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Infer,
    Gradcheck,
    Summary,
}

/// Options shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Model and training settings resolved from a config file plus `--seed`.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl Resolved {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut kv = match path {
            Some(p) => KvFile::load(p).map_err(|e| match e {
                Error::Parse { .. } | Error::Io { .. } => Error::Config(e.to_string()),
                other => other,
            })?,
            None => KvFile::default(),
        };
        if let Some(s) = seed {
            kv.set("model.seed", s.to_string());
        }
        let model = ModelConfig::from_kv(&mut kv)?;
        let train = TrainSettings::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Resolved { model, train })
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))
}

/// Creates `dir` with `config.txt` inside, all or nothing: contents are staged
/// in a sibling temporary directory and renamed into place.
pub fn create_run_dir(dir: &Path, config_text: &str) -> CliResult<()> {
    if dir.exists() {
        return Err(
            Error::Config(format!("output directory {} already exists", dir.display())).into(),
        );
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let staging = tempfile::Builder::new()
        .prefix(".mscloudcam-run-")
        .tempdir_in(&parent)
        .map_err(io_err(&parent))?;
    let echo = staging.path().join(CONFIG_ECHO);
    fs::write(&echo, config_text).map_err(io_err(&echo))?;
    let staged = staging.keep();
    fs::rename(&staged, dir).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        io_err(dir)(e)
    })
}

fn require<'a>(value: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    value.ok_or_else(|| Error::Config(format!("{flag} is required for this command")).into())
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    /// Continue from `<out>/checkpoint.msck` instead of starting fresh.
    pub resume: bool,
}

/// Trains and leaves `config.txt`, `train.log` and `checkpoint.msck` in the run
/// directory. The checkpoint is rewritten after every epoch, so an abort keeps
/// the last good one.
pub fn cmd_train(run: &RunConfig, args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = require(run.config.as_deref(), "--config")?;
    let dir = require(run.out.as_deref(), "--out")?;
    let resolved = Resolved::load(Some(config), run.seed)?;
    let net = MsCloudCam::new(&resolved.model)?;
    let bands = resolved.model.encoder.in_channels;
    let train = resolved
        .train
        .load_split(&resolved.train.train_split, bands)?;
    let val = if resolved.train.val_every > 0 {
        resolved
            .train
            .load_split(&resolved.train.val_split, bands)?
    } else {
        Vec::new()
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut trainer = if args.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        Trainer::resume(net, resolved.train.clone(), &ckpt)?
    } else {
        create_run_dir(dir, &resolved.to_text())?;
        Trainer::new(net, resolved.train.clone())
    };
    let log_path = dir.join(TRAIN_LOG);
    let fresh_log = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if fresh_log {
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    }
    log::info!(
        "training on {} samples, validating on {}",
        train.len(),
        val.len()
    );
    trainer.run(&train, &val, &mut log, Some(&ckpt_path))?;
    let report = trainer
        .evaluate(&train)?
        .report_with(resolved.train.macro_mean)?;
    write_out(
        out,
        &format!(
            "trained to step {}; training mIoU {:.4}; checkpoint {}\n",
            trainer.step,
            report.miou,
            ckpt_path.display()
        ),
    )
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    /// Split name; defaults to `data.eval_split`.
    pub split: Option<String>,
    /// Score the ground truth against itself instead of running the model.
    pub oracle: bool,
}

/// Accumulates a confusion matrix over the split (sharded across workers),
/// prints the metrics table and, with `--out`, writes `metrics.csv`.
pub fn cmd_eval(run: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let resolved = Resolved::load(run.config.as_deref(), run.seed)?;
    let split = args
        .split
        .clone()
        .unwrap_or_else(|| resolved.train.eval_split.clone());
    let samples = resolved
        .train
        .load_split(&split, resolved.model.encoder.in_channels)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")).into());
    }
    let batch = resolved.train.batch_size;
    let cm = if args.oracle {
        oracle_confusion(&samples)?
    } else {
        let path = require(args.checkpoint.as_deref(), "--checkpoint")?;
        let (net, params) = restore(path, &resolved.model)?;
        evaluate_sharded(&net, &params, &samples, batch)?
    };
    let rows = vec![(split.clone(), cm.report_with(resolved.train.macro_mean)?)];
    write_out(out, &emit_table(&rows)?)?;
    if let Some(dir) = &run.out {
        create_run_dir(dir, &resolved.to_text())?;
        let csv_path = dir.join("metrics.csv");
        fs::write(&csv_path, emit_csv(&rows)?).map_err(io_err(&csv_path))?;
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the configured model.
pub fn restore(path: &Path, model: &ModelConfig) -> CliResult<(MsCloudCam, ParamStore<f32>)> {
    let ckpt: Checkpoint = load_checkpoint(path)?;
    let net = MsCloudCam::new(model)?;
    let params = ckpt.restore(&net)?;
    Ok((net, params))
}

fn oracle_confusion(samples: &[RasterSample]) -> CliResult<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no labels", s.id)))?;
        let (_, _, w) = s.dims();
        // the oracle predicts the truth; ignored pixels still drop out
        let pred: Vec<u8> = labels
            .iter()
            .map(|&l| if l == IGNORE_LABEL { 0 } else { l })
            .collect();
        cm.accumulate(&pred, labels, w, IGNORE_LABEL)?;
    }
    Ok(cm)
}

/// Evaluation with batches spread over the rayon pool; per-batch matrices are
/// merged, so the result is independent of scheduling.
pub fn evaluate_sharded(
    net: &MsCloudCam,
    params: &ParamStore<f32>,
    samples: &[RasterSample],
    batch: usize,
) -> CliResult<ConfusionMatrix> {
    let parts: Vec<mscloudcam::Result<ConfusionMatrix>> = samples
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let refs: Vec<&RasterSample> = chunk.iter().collect();
            let (images, labels) = collate(&refs)?;
            let width = images.shape()[3];
            let pred = argmax_classes(&net.predict_logits(params, images)?)?;
            let mut cm = ConfusionMatrix::new();
            cm.accumulate(&pred, &labels, width, IGNORE_LABEL)?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Default)]
pub struct InferArgs {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

/// Writes `labels.mst` (class indices) and `labels.ppm` (colour map).
pub fn cmd_infer(run: &RunConfig, args: &InferArgs, out: &mut dyn Write) -> CliResult<()> {
    let ckpt_path = require(args.checkpoint.as_deref(), "--checkpoint")?;
    let input = require(args.input.as_deref(), "--input")?;
    let dir = require(run.out.as_deref(), "--out")?;
    let ckpt = load_checkpoint(ckpt_path)?;
    // without --config the checkpoint's own snapshot defines the model
    let model = match &run.config {
        Some(_) => Resolved::load(run.config.as_deref(), run.seed)?.model,
        None => ckpt.config.clone(),
    };
    let net = MsCloudCam::new(&model)?;
    let params = ckpt.restore(&net)?;
    let id = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sample = RasterSample::from_mst(id, load_mst(input)?)?;
    let (c, h, w) = sample.dims();
    if c != model.encoder.in_channels {
        return Err(Error::Data(format!(
            "{}: {c} channels ({}) but the checkpoint expects {}",
            input.display(),
            sample.sensor.name(),
            model.encoder.in_channels
        ))
        .into());
    }
    let logits = net.predict_logits(&params, sample.image())?;
    let labels = argmax_classes(&logits)?;
    create_run_dir(dir, &model.to_text())?;
    let mst_path = dir.join("labels.mst");
    save_mst(
        &MstFile::label_map(sample.sensor, h, w, labels.clone()),
        &mst_path,
    )?;
    let ppm_path = dir.join("labels.ppm");
    fs::write(&ppm_path, render::encode_ppm(&labels, h, w)?).map_err(io_err(&ppm_path))?;
    let mut counts = [0usize; 4];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    write_out(
        out,
        &format!(
            "{}: {h}x{w}; clear {} thick {} thin {} shadow {}; wrote {} and {}\n",
            input.display(),
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            mst_path.display(),
            ppm_path.display()
        ),
    )
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub scope: Scope,
    /// Append the deliberately broken op (negative control).
    pub inject_fault: bool,
}

/// One line per check; fails naming every op over its threshold.
pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let entries = run_suite(args.scope, args.inject_fault)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for e in &entries {
        let r = &e.report;
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        text += &format!(
            "{:<9} {:<34} worst {:.3e}  threshold {:.0e}  coords {:>5}  {verdict}\n",
            e.module, r.name, r.worst_rel_error, r.threshold, r.coordinates
        );
        if !r.passed() {
            failed.push(format!("{}/{}", e.module, r.name));
        }
    }
    write_out(out, &text)?;
    if failed.is_empty() {
        write_out(out, &format!("{} checks passed\n", entries.len()))
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// Per-module parameter counts and a FLOP sweep next to the published totals.
pub fn cmd_summary(run: &RunConfig, sizes: &[usize], out: &mut dyn Write) -> CliResult<()> {
    let resolved = Resolved::load(run.config.as_deref(), run.seed)?;
    let cfg = &resolved.model;
    let params = count_params(cfg)?;
    let mut text = String::from("parameters\n");
    text += &params.render();
    let delta = (params.total as f64 - PAPER_PARAMS) / PAPER_PARAMS * 100.0;
    text += &format!(
        "  reference {:.2}M; delta {:+.2}M ({delta:+.1}%)\n",
        PAPER_PARAMS / 1e6,
        (params.total as f64 - PAPER_PARAMS) / 1e6
    );
    text +=
        "flops (2 x multiply-accumulates of convolutions, linear maps and attention products)\n";
    let mut gflops = Vec::new();
    for &s in sizes {
        let r = estimate_flops(cfg, (s, s))?;
        text += &format!("  {s}x{s}: {:.2} GFLOPs\n", r.gflops());
        gflops.push(r.gflops());
    }
    let below = gflops.iter().any(|&g| g <= PAPER_GFLOPS);
    let above = gflops.iter().any(|&g| g >= PAPER_GFLOPS);
    text += &format!(
        "  reference {PAPER_GFLOPS:.2} GFLOPs (input size unstated): {}\n",
        if below && above {
            "bracketed by the sweep"
        } else {
            "NOT bracketed by the sweep"
        }
    );
    write_out(out, &text)
}
