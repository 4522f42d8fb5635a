//! Supervised training loop: deterministic batching, Adam updates, per-epoch
//! logging and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvFile;
use crate::datapipe::{
    collate, load_mst, synth_dataset, RasterSample, SplitManifest, IGNORE_LABEL,
};
use crate::decoder::{supervised_loss, LossWeights};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MacroMean};
use crate::model::{argmax_classes, save_checkpoint, Checkpoint, MsCloudCam};
use crate::numerics::{Adam, AdamConfig, Graph};
use crate::params::ParamStore;

/// Header of the line-oriented training log.
pub const LOG_HEADER: &str = "epoch step loss_final loss_aux1 loss_aux2 val_miou";

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `<dir>/<id>.mst` files listed in a split manifest.
    Manifest { manifest: PathBuf, dir: PathBuf },
    /// Procedural scenes; the validation split is a disjoint seed.
    Synthetic {
        train: usize,
        val: usize,
        size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub data: DataSource,
    pub train_split: String,
    pub val_split: String,
    pub eval_split: String,
    /// Evaluate on the validation split every this many epochs (0 disables).
    pub val_every: usize,
    pub macro_mean: MacroMean,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            data: DataSource::Synthetic {
                train: 16,
                val: 4,
                size: 64,
                seed: 1,
            },
            train_split: "train".into(),
            val_split: "val".into(),
            eval_split: "test".into(),
            val_every: 1,
            macro_mean: MacroMean::AllClasses,
        }
    }
}

impl TrainSettings {
    /// Consumes `train.*` and `data.*` keys; relative paths resolve against the
    /// config file's directory.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let mut s = TrainSettings::default();
        let base = kv
            .source()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        if let Some(v) = kv.take_parsed("train.batch_size")? {
            s.batch_size = v;
        }
        if let Some(v) = kv.take_parsed("train.epochs")? {
            s.epochs = v;
        }
        s.max_steps = kv.take_parsed("train.max_steps")?;
        if let Some(v) = kv.take_parsed("train.lr")? {
            s.adam.lr = v;
        }
        if let Some(v) = kv.take_parsed("train.weight_decay")? {
            s.adam.weight_decay = v;
        }
        if let Some(v) = kv.take_parsed("train.lambda_final")? {
            s.loss.final_weight = v;
        }
        if let Some(v) = kv.take_parsed("train.lambda_aux1")? {
            s.loss.aux1 = v;
        }
        if let Some(v) = kv.take_parsed("train.lambda_aux2")? {
            s.loss.aux2 = v;
        }
        if let Some(v) = kv.take_parsed("train.val_every")? {
            s.val_every = v;
        }
        if let Some(v) = kv.take_parsed("eval.macro_mean")? {
            s.macro_mean = v;
        }
        for (key, slot) in [
            ("data.train_split", &mut s.train_split),
            ("data.val_split", &mut s.val_split),
            ("data.eval_split", &mut s.eval_split),
        ] {
            if let Some(v) = kv.take(key) {
                *slot = v;
            }
        }
        let source = kv.take("data.source").unwrap_or_else(|| "synthetic".into());
        s.data = match source.as_str() {
            "synthetic" => {
                let DataSource::Synthetic {
                    mut train,
                    mut val,
                    mut size,
                    mut seed,
                } = s.data
                else {
                    unreachable!()
                };
                train = kv.take_parsed("data.synthetic_train")?.unwrap_or(train);
                val = kv.take_parsed("data.synthetic_val")?.unwrap_or(val);
                size = kv.take_parsed("data.synthetic_size")?.unwrap_or(size);
                seed = kv.take_parsed("data.synthetic_seed")?.unwrap_or(seed);
                DataSource::Synthetic {
                    train,
                    val,
                    size,
                    seed,
                }
            }
            "manifest" => {
                let manifest = kv.take("data.manifest").ok_or_else(|| {
                    Error::Config("data.source = manifest requires data.manifest".into())
                })?;
                let manifest = base.join(manifest);
                let dir = kv
                    .take("data.dir")
                    .map(|d| base.join(d))
                    .unwrap_or_else(|| {
                        manifest.parent().map(Path::to_path_buf).unwrap_or_default()
                    });
                DataSource::Manifest { manifest, dir }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source must be synthetic or manifest, got {other:?}"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.adam.lr
            )));
        }
        self.loss.validate()
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("train.batch_size = {}", self.batch_size),
            format!("train.epochs = {}", self.epochs),
            format!("train.lr = {}", self.adam.lr),
            format!("train.weight_decay = {}", self.adam.weight_decay),
            format!("train.lambda_final = {}", self.loss.final_weight),
            format!("train.lambda_aux1 = {}", self.loss.aux1),
            format!("train.lambda_aux2 = {}", self.loss.aux2),
            format!("train.val_every = {}", self.val_every),
            format!("data.train_split = {}", self.train_split),
            format!("data.val_split = {}", self.val_split),
            format!("data.eval_split = {}", self.eval_split),
            format!("eval.macro_mean = {}", self.macro_mean),
        ];
        if let Some(m) = self.max_steps {
            lines.push(format!("train.max_steps = {m}"));
        }
        match &self.data {
            DataSource::Synthetic {
                train,
                val,
                size,
                seed,
            } => lines.extend([
                "data.source = synthetic".to_string(),
                format!("data.synthetic_train = {train}"),
                format!("data.synthetic_val = {val}"),
                format!("data.synthetic_size = {size}"),
                format!("data.synthetic_seed = {seed}"),
            ]),
            DataSource::Manifest { manifest, dir } => lines.extend([
                "data.source = manifest".to_string(),
                format!("data.manifest = {}", manifest.display()),
                format!("data.dir = {}", dir.display()),
            ]),
        }
        lines.join("\n") + "\n"
    }

    /// Samples of a named split (`train`, `val`, or any manifest split).
    pub fn load_split(&self, split: &str, bands: usize) -> Result<Vec<RasterSample>> {
        match &self.data {
            DataSource::Synthetic {
                train,
                val,
                size,
                seed,
            } => {
                let (n, s) = if split == self.train_split {
                    (*train, *seed)
                } else {
                    // every non-training split draws from a different stream
                    (
                        *val,
                        seed.wrapping_add(0x5eed_0000_0000 + split.len() as u64),
                    )
                };
                Ok(synth_dataset(n, *size, bands, s))
            }
            DataSource::Manifest { manifest, dir } => {
                let m = SplitManifest::load(manifest)?;
                let mut out = Vec::new();
                for (id, path) in m.ids(split)?.iter().zip(m.paths(split, dir)?) {
                    let sample = RasterSample::from_mst(id.clone(), load_mst(&path)?)?;
                    if sample.sensor.bands() != bands {
                        return Err(Error::Data(format!(
                            "{id}: {} bands ({}) but the model expects {bands}",
                            sample.sensor.bands(),
                            sample.sensor.name()
                        )));
                    }
                    out.push(sample);
                }
                Ok(out)
            }
        }
    }
}

/// Unweighted loss terms of one step or the mean over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub final_term: f64,
    pub aux1: f64,
    pub aux2: f64,
}

pub struct Trainer {
    pub net: MsCloudCam,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub settings: TrainSettings,
    /// Completed optimiser steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(net: MsCloudCam, settings: TrainSettings) -> Self {
        let params = net.init_params();
        let adam = Adam::new(settings.adam, &params);
        Trainer {
            net,
            params,
            adam,
            settings,
            step: 0,
        }
    }

    pub fn resume(net: MsCloudCam, settings: TrainSettings, ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.restore(&net)?;
        let adam = ckpt
            .adam(settings.adam)
            .unwrap_or_else(|| Adam::new(settings.adam, &params));
        Ok(Trainer {
            net,
            params,
            adam,
            settings,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net.config, &self.params, self.step, Some(&self.adam))
    }

    /// One forward/backward/update on `batch`. A non-finite loss aborts before
    /// the parameters change.
    pub fn train_step(&mut self, batch: &[&RasterSample]) -> Result<StepLosses> {
        let (images, labels) = collate(batch)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, true);
        let x = g.constant(images);
        let out = self.net.forward(&mut g, &p, x)?;
        let loss = supervised_loss(&mut g, &out, labels, &self.settings.loss)?;
        let total = g.value(loss.total).data()[0] as f64;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} at step {}",
                self.step + 1
            )));
        }
        g.backward(loss.total)?;
        let grads = self.params.collect_grads(&g, &p);
        self.adam.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(StepLosses {
            total,
            final_term: loss.final_term,
            aux1: loss.aux1_term,
            aux2: loss.aux2_term,
        })
    }

    /// Order of sample indices in `epoch`, fixed by the model seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.net.config.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407),
        );
        order.shuffle(&mut rng);
        order
    }

    /// Trains until `settings.epochs` or `settings.max_steps`, appending one log
    /// line per epoch and saving `checkpoint` after every epoch. Resumes mid-run
    /// from `self.step`.
    pub fn run(
        &mut self,
        train: &[RasterSample],
        val: &[RasterSample],
        log: &mut dyn Write,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let per_epoch = train.len().div_ceil(self.settings.batch_size) as u64;
        let limit = self
            .settings
            .max_steps
            .unwrap_or(u64::MAX)
            .min(per_epoch * self.settings.epochs as u64);
        let io = |e: std::io::Error| Error::io("<training log>", e);
        while self.step < limit {
            let epoch = (self.step / per_epoch) as usize;
            let order = self.epoch_order(epoch, train.len());
            let mut sum = StepLosses::default();
            let mut count = 0.0;
            for chunk in order
                .chunks(self.settings.batch_size)
                .skip((self.step % per_epoch) as usize)
            {
                if self.step >= limit {
                    break;
                }
                let batch: Vec<&RasterSample> = chunk.iter().map(|&i| &train[i]).collect();
                let l = self.train_step(&batch)?;
                sum.total += l.total;
                sum.final_term += l.final_term;
                sum.aux1 += l.aux1;
                sum.aux2 += l.aux2;
                count += 1.0;
                log::debug!("step {} loss {:.6}", self.step, l.total);
            }
            let ve = self.settings.val_every;
            let val_miou = if !val.is_empty() && ve > 0 && (epoch + 1).is_multiple_of(ve) {
                self.evaluate(val)?
                    .report_with(self.settings.macro_mean)?
                    .miou
            } else {
                f64::NAN
            };
            writeln!(
                log,
                "{} {} {:.6} {:.6} {:.6} {:.6}",
                epoch + 1,
                self.step,
                sum.final_term / count,
                sum.aux1 / count,
                sum.aux2 / count,
                val_miou
            )
            .map_err(io)?;
            log.flush().map_err(io)?;
            if let Some(path) = checkpoint {
                save_checkpoint(&self.checkpoint(), path)?;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, samples: &[RasterSample]) -> Result<ConfusionMatrix> {
        evaluate(&self.net, &self.params, samples, self.settings.batch_size)
    }
}

/// Confusion matrix of final-head predictions over `samples`.
pub fn evaluate(
    net: &MsCloudCam,
    params: &ParamStore<f32>,
    samples: &[RasterSample],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&RasterSample> = chunk.iter().collect();
        let (images, labels) = collate(&refs)?;
        let width = images.shape()[3];
        let logits = net.predict_logits(params, images)?;
        let pred = argmax_classes(&logits)?;
        cm.accumulate(&pred, &labels, width, IGNORE_LABEL)?;
    }
    Ok(cm)
}
