//! End-to-end training: sequence L1 loss, Adam with step decay, checkpoints.
//!
//! One epoch visits every training clip `clip_repeat` times in a
//! seed-determined order.
//! Each sample is a random window of `seq_len` frames and an aligned random
//! patch. The prebuilder runs once per sample, the recurrent cell is unrolled
//! over the whole window, and gradients flow back through the full unroll
//! into the prebuilder.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{sample_patch, ClipRecord};
use crate::error::{Error, Result};
use crate::metrics::{MetricSettings, MetricsReport};
use crate::model::Iprrn;
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub use crate::model::l1_loss as loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Samples averaged per optimizer step.
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    /// Required; there is no sensible default epoch budget.
    pub max_epochs: Option<usize>,
    /// Frames per training sample.
    pub seq_len: usize,
    /// Samples drawn from each clip per epoch.
    pub clip_repeat: usize,
    /// HR patch side; `None` trains on full frames.
    pub hr_patch: Option<usize>,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
    /// Write `epoch_NNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_every: 60,
            max_epochs: None,
            seq_len: 7,
            clip_repeat: 1,
            hr_patch: Some(256),
            grad_clip: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every key accepted in a `[train]` table.
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "lr0",
        "beta1",
        "beta2",
        "eps",
        "decay_factor",
        "decay_every",
        "max_epochs",
        "seq_len",
        "clip_repeat",
        "hr_patch",
        "grad_clip",
        "checkpoint_every",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.seq_len == 0 || self.decay_every == 0 || self.clip_repeat == 0 {
            return bad("batch_size, seq_len, clip_repeat and decay_every must be positive".into());
        }
        if self.max_epochs.is_none() {
            return bad("max_epochs must be set".into());
        }
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0) || !(self.eps > 0.0) {
            return bad("lr0, decay_factor and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.hr_patch == Some(0) {
            return bad("hr_patch must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Learning rate during epoch `epoch` (0-based): decayed once for every
    /// positive multiple of `decay_every` reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn max_epochs(&self) -> usize {
        self.max_epochs.unwrap_or(0)
    }
}

/// Exact trainable-scalar count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    cfg.count_params()
}

/// Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Mean training loss over the epoch's optimizer steps.
    pub loss: f64,
    pub lr: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<EpochLog>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

const MAGIC: &[u8; 8] = b"IPRRNCK1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    epochs_completed: usize,
    adam_step: u64,
    param_count: usize,
    /// Parameter tensors in payload order, `(name, len)`.
    layout: Vec<(String, usize)>,
    log: Vec<EpochLog>,
}

/// Model parameters, optimizer state and configs. The data-order RNG for an
/// epoch is derived from `(train.seed, epoch)`, so `epochs_completed` fully
/// determines where a resumed run continues.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epochs_completed: usize,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Iprrn> {
        let mut model = Iprrn::zeros(&self.model_config)?;
        model.load_flat(&self.params)?;
        Ok(model)
    }

    /// Binary container: magic, little-endian header length, JSON header,
    /// then parameters and both Adam moments as little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = self.model()?;
        let header = CheckpointHeader {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            epochs_completed: self.epochs_completed,
            adam_step: self.adam.step,
            param_count: self.params.len(),
            layout: model.layout(),
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let n = header.param_count;
        let payload = &bytes[16 + len..];
        if payload.len() != 3 * n * 8 {
            return Err(bad("payload size does not match the parameter count"));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params: Vec<f64> = floats.by_ref().take(n).collect();
        let m: Vec<f64> = floats.by_ref().take(n).collect();
        let v: Vec<f64> = floats.collect();
        let ck = Self {
            model_config: header.model,
            train_config: header.train,
            epochs_completed: header.epochs_completed,
            params,
            adam: Adam {
                m,
                v,
                step: header.adam_step,
            },
            log: header.log,
        };
        let model = ck.model().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.layout() != header.layout {
            return Err(bad("parameter layout does not match the embedded model config"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Training state: model, optimizer and log.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Iprrn,
    config: TrainConfig,
    adam: Adam,
    epoch: usize,
    log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Iprrn, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.param_count());
        Ok(Self {
            model,
            config,
            adam,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.train_config.validate()?;
        Ok(Self {
            model: ck.model()?,
            config: ck.train_config.clone(),
            adam: ck.adam.clone(),
            epoch: ck.epochs_completed,
            log: ck.log.clone(),
        })
    }

    pub fn model(&self) -> &Iprrn {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// Swaps in a structurally different model (e.g. after grafting a
    /// prebuilder) and restarts the optimizer state and epoch counter.
    pub fn replace_model(&mut self, model: Iprrn) {
        self.adam = Adam::new(model.param_count());
        self.model = model;
        self.epoch = 0;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            epochs_completed: self.epoch,
            params: self.model.flatten(),
            adam: self.adam.clone(),
            log: self.log.clone(),
        }
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        rng
    }

    fn sample(&self, clip: &ClipRecord, rng: &mut ChaCha8Rng) -> Result<ClipRecord> {
        let len = self.config.seq_len.min(clip.len());
        let start = rng.gen_range(0..=clip.len() - len);
        let window = clip.window(start, len)?;
        match self.config.hr_patch {
            Some(p) => sample_patch(&window, p, rng),
            None => Ok(window),
        }
    }

    /// One pass over `clips`. On a non-finite loss or gradient the model is
    /// left at its pre-step parameters and [`Error::Diverged`] is returned.
    pub fn run_epoch(&mut self, clips: &[ClipRecord]) -> Result<EpochLog> {
        if clips.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut rng = self.epoch_rng();
        let mut order: Vec<usize> = (0..clips.len() * self.config.clip_repeat)
            .map(|i| i % clips.len())
            .collect();
        order.shuffle(&mut rng);
        let lr = self.config.lr_at(self.epoch);
        let mut losses = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| self.sample(&clips[i], &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; self.adam.m.len()];
            let mut batch_loss = 0.0;
            for s in &samples {
                let (l, g) = self.model.loss_and_grad(&s.lr, &s.hr)?;
                batch_loss += l;
                for (acc, v) in grad.iter_mut().zip(g.flatten()) {
                    *acc += v;
                }
            }
            let inv = 1.0 / samples.len() as f64;
            batch_loss *= inv;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    reason: format!("non-finite loss or gradient (loss = {batch_loss})"),
                    diagnostic: None,
                });
            }
            if let Some(max) = self.config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    grad.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            let mut params = self.model.flatten();
            self.adam.update(&mut params, &grad, lr, &self.config);
            self.model.load_flat(&params)?;
            losses.push(batch_loss);
        }
        let entry = EpochLog {
            epoch: self.epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
        };
        self.log.push(entry);
        self.epoch += 1;
        Ok(entry)
    }

    /// Runs epochs until `max_epochs` have completed. With `out_dir`, writes
    /// `train_log.csv`, periodic checkpoints and `final.ckpt`; on divergence
    /// a `diverged.ckpt` with the last finite state is left for inspection.
    pub fn fit(&mut self, clips: &[ClipRecord], out_dir: Option<&Path>) -> Result<Checkpoint> {
        self.fit_epochs(clips, self.config.max_epochs().saturating_sub(self.epoch), out_dir)
    }

    pub fn fit_epochs(&mut self, clips: &[ClipRecord], epochs: usize, out_dir: Option<&Path>) -> Result<Checkpoint> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for _ in 0..epochs {
            match self.run_epoch(clips) {
                Ok(_) => {}
                Err(Error::Diverged { epoch, reason, .. }) => {
                    let diagnostic = match out_dir {
                        Some(dir) => {
                            let path = dir.join("diverged.ckpt");
                            self.checkpoint().save(&path)?;
                            write_log_csv(&dir.join("train_log.csv"), &self.log)?;
                            Some(path)
                        }
                        None => None,
                    };
                    return Err(Error::Diverged {
                        epoch,
                        reason,
                        diagnostic,
                    });
                }
                Err(e) => return Err(e),
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint().save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                }
            }
        }
        let ck = self.checkpoint();
        if let Some(dir) = out_dir {
            write_log_csv(&dir.join("train_log.csv"), &self.log)?;
            ck.save(&dir.join("final.ckpt"))?;
        }
        Ok(ck)
    }
}

/// Trains a fresh model from `model_cfg` for `train_cfg.max_epochs` epochs.
pub fn train(
    clips: &[ClipRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(Iprrn::new(model_cfg)?, train_cfg.clone())?;
    trainer.fit(clips, out_dir)
}

/// Reconstructs every clip in full and scores it against its HR frames.
/// SR frames are clamped to `[0, 1]` before scoring.
pub fn evaluate(model: &Iprrn, clips: &[ClipRecord], settings: MetricSettings) -> Result<Vec<(String, MetricsReport, Vec<Tensor>)>> {
    clips
        .iter()
        .map(|clip| {
            if clip.scale() != model.config().scale {
                return Err(Error::Input(format!(
                    "clip {} has scale {} but the model upsamples by {}",
                    clip.id,
                    clip.scale(),
                    model.config().scale
                )));
            }
            let sr: Vec<Tensor> = model.forward(&clip.lr)?.iter().map(Tensor::clamp01).collect();
            let report = MetricsReport::evaluate(&sr, &clip.hr, settings)?;
            Ok((clip.id.clone(), report, sr))
        })
        .collect()
}

/// Default location of the final checkpoint inside a training output directory.
pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}
