//! The optimization loop: flow-matching loss, AdamW, clipping, EMA,
//! learning-rate step-down, metric logging and resumable checkpoints.

mod optim;

pub use optim::{adamw_step, clip_gradients, ema_update, global_norm, AdamState, AdamW};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::flow::{drop_labels, make_flow_batch, training_loss, TimestepSampler, ToyAlignmentEncoder};
use crate::model::{model_header, Checkpoint, PixelDit, PARAM_PREFIX};
use crate::tensor::{Tape, Tensor};

pub const EMA_PREFIX: &str = "ema/";
pub const ADAM_M_PREFIX: &str = "adam_m/";
pub const ADAM_V_PREFIX: &str = "adam_v/";

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_BAD_STEPS: u32 = 10;

/// CSV header of the metric stream.
pub const METRICS_HEADER: &str = "step,loss,loss_diff,loss_repa,grad_norm,lr";

/// Seed of the frozen alignment encoder, offset from the run seed.
const ENCODER_SEED_OFFSET: u64 = 0x5eed;

/// Stream ids keep per-step and per-epoch randomness apart.
const STEP_STREAM: u64 = 1 << 62;
const EPOCH_STREAM: u64 = 2 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_after_switch: f64,
    /// Step at which lr and the clip norm drop; `None` never switches.
    pub switch_step: Option<u64>,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub clip_after_switch: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub class_drop_prob: f64,
    pub lambda_repa: f64,
    pub timesteps: TimestepSampler,
    pub seed: u64,
    /// Write a checkpoint every this many steps (and at the end).
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_after_switch: 1e-5,
            switch_step: None,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            clip_norm: 1.0,
            clip_after_switch: 0.5,
            batch_size: 64,
            total_steps: 2000,
            class_drop_prob: 0.1,
            lambda_repa: 0.5,
            timesteps: TimestepSampler::default(),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.clip_norm > 0.0 && self.clip_after_switch > 0.0) {
            return bad("clip norms must be > 0".into());
        }
        if !(self.lr >= 0.0 && self.lr_after_switch >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return bad(format!("class_drop_prob must lie in [0, 1], got {}", self.class_drop_prob));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    /// `(lr, clip_norm)` in force at `step`.
    pub fn schedule(&self, step: u64) -> (f64, f64) {
        match self.switch_step {
            Some(s) if step >= s => (self.lr_after_switch, self.clip_after_switch),
            _ => (self.lr, self.clip_norm),
        }
    }
}

/// One row of the metric stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub loss_diff: f64,
    pub loss_repa: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.loss_diff, self.loss_repa, self.grad_norm, self.lr
        )
    }
}

/// Render rows as CSV with the header line.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Everything beyond the model parameters that a resumed run needs.
///
/// Randomness is derived from `(seed, step)` and `(seed, epoch)`, so the step
/// counter stands in for a generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    pub ema: Vec<Tensor>,
    /// Consecutive non-finite steps.
    pub bad_streak: u32,
}

/// Round every value to the nearest f32, the checkpoint precision.
fn quantize(ts: &mut [Tensor]) {
    ts.iter_mut().for_each(Tensor::round_to_f32);
}

/// Generator for per-step draws (noise, timesteps, label dropout).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(STEP_STREAM | step);
    r
}

/// Sample order for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(EPOCH_STREAM | epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut r);
    idx
}

/// Model, optimizer state and config for one training run.
pub struct Trainer {
    pub model: PixelDit,
    pub config: TrainConfig,
    pub state: TrainState,
    encoder: Option<ToyAlignmentEncoder>,
    perm: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(mut model: PixelDit, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        quantize(model.params.tensors_mut());
        let adam = AdamState::zeros_like(model.params.tensors());
        let ema = model.params.tensors().iter().map(|t| Tensor::new(t.shape(), t.data().to_vec())).collect::<Result<_>>()?;
        let encoder = Self::make_encoder(&model, &config)?;
        Ok(Self {
            model,
            config,
            state: TrainState {
                step: 0,
                adam,
                ema,
                bad_streak: 0,
            },
            encoder,
            perm: None,
        })
    }

    fn make_encoder(model: &PixelDit, config: &TrainConfig) -> Result<Option<ToyAlignmentEncoder>> {
        let c = &model.config;
        match &c.repa {
            Some(r) if config.lambda_repa != 0.0 => Ok(Some(ToyAlignmentEncoder::new(
                c.patch_size,
                c.channels,
                r.feature_dim,
                config.seed.wrapping_add(ENCODER_SEED_OFFSET),
            )?)),
            _ => Ok(None),
        }
    }

    /// Header plus raw, EMA and Adam records.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut header = model_header(&self.model.config)?;
        let train = toml::Table::try_from(&self.config).map_err(|e| Error::Config(format!("train config: {e}")))?;
        header.insert("train".into(), toml::Value::Table(train));
        for (k, v) in [
            ("step", self.state.step),
            ("adam_t", self.state.adam.t),
            ("skipped", self.state.adam.skipped),
            ("bad_streak", self.state.bad_streak as u64),
        ] {
            header.insert(k.into(), toml::Value::Integer(v as i64));
        }
        let mut ck = Checkpoint::new(header);
        ck.push_params(PARAM_PREFIX, &self.model.params);
        let names = self.model.params.names();
        for (prefix, ts) in [
            (EMA_PREFIX, &self.state.ema),
            (ADAM_M_PREFIX, &self.state.adam.m),
            (ADAM_V_PREFIX, &self.state.adam.v),
        ] {
            for (n, t) in names.iter().zip(ts) {
                ck.push(format!("{prefix}{n}"), t);
            }
        }
        Ok(ck)
    }

    /// Resume from a checkpoint written by [`Trainer::checkpoint`].
    ///
    /// `config` may differ from the stored one (for example a larger
    /// `total_steps`); the model config always comes from the file.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = PixelDit::from_checkpoint(ck, PARAM_PREFIX)?;
        let mut tr = Self::new(model, config)?;
        let names = tr.model.params.names().to_vec();
        let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    ck.get(&format!("{prefix}{n}"))
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("checkpoint is missing {prefix}{n}")))
                })
                .collect()
        };
        tr.state.ema = fetch(EMA_PREFIX)?;
        tr.state.adam.m = fetch(ADAM_M_PREFIX)?;
        tr.state.adam.v = fetch(ADAM_V_PREFIX)?;
        let field = |k: &str| ck.header_u64(k).ok_or_else(|| Error::Config(format!("checkpoint header lacks {k}")));
        tr.state.step = field("step")?;
        tr.state.adam.t = field("adam_t")?;
        tr.state.adam.skipped = field("skipped")?;
        tr.state.bad_streak = field("bad_streak")? as u32;
        Ok(tr)
    }

    /// A model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<PixelDit> {
        let mut m = self.model.clone();
        for (dst, src) in m.params.tensors_mut().iter_mut().zip(&self.state.ema) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(m)
    }

    fn batch_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        let b = self.config.batch_size;
        let per_epoch = (n / b) as u64;
        if per_epoch == 0 {
            return Err(Error::Config(format!("dataset of {n} samples is smaller than batch size {b}")));
        }
        let epoch = self.state.step / per_epoch;
        let pos = (self.state.step % per_epoch) as usize;
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            self.perm = Some((epoch, epoch_permutation(self.config.seed, epoch, n)));
        }
        let perm = &self.perm.as_ref().expect("just set").1;
        Ok(perm[pos * b..(pos + 1) * b].to_vec())
    }

    /// Run one optimizer step on the next batch of `data`.
    pub fn step(&mut self, data: &ToyDataset) -> Result<MetricRow> {
        let cfg = self.config.clone();
        let step = self.state.step;
        let (lr, clip) = cfg.schedule(step);
        let indices = self.batch_indices(data.len())?;
        let (x0, labels) = data.batch(&indices)?;
        let mut rng = step_rng(cfg.seed, step);
        let labels = drop_labels(&labels, cfg.class_drop_prob, self.model.config.null_class(), &mut rng);
        let batch = make_flow_batch(&x0, &mut rng, &cfg.timesteps)?;

        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let encoder = self.encoder.as_ref().map(|e| e as &dyn crate::flow::AlignmentEncoder);
        let outcome = match training_loss(&self.model, &tape, &p, &batch, &labels, encoder, cfg.lambda_repa) {
            Ok(parts) => {
                let loss = parts.total.value().item();
                let g = tape.backward(parts.total)?;
                let grads: Vec<Tensor> = p.vars().iter().map(|&v| g.tensor(v)).collect();
                Some((loss, parts.diffusion, parts.repa, grads))
            }
            Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        let mut row = MetricRow {
            step,
            loss: f64::NAN,
            loss_diff: f64::NAN,
            loss_repa: f64::NAN,
            grad_norm: f64::NAN,
            lr,
        };
        let mut applied = false;
        if let Some((loss, diff, repa, mut grads)) = outcome {
            row.loss = loss;
            row.loss_diff = diff;
            row.loss_repa = repa;
            row.grad_norm = global_norm(&grads);
            if loss.is_finite() && row.grad_norm.is_finite() {
                clip_gradients(&mut grads, clip)?;
                let hp = AdamW {
                    lr,
                    beta1: cfg.betas[0],
                    beta2: cfg.betas[1],
                    eps: cfg.eps,
                    weight_decay: cfg.weight_decay,
                };
                applied = adamw_step(self.model.params.tensors_mut(), &grads, &mut self.state.adam, &hp)?;
            }
        }
        if applied {
            quantize(self.model.params.tensors_mut());
            quantize(&mut self.state.adam.m);
            quantize(&mut self.state.adam.v);
            ema_update(&mut self.state.ema, self.model.params.tensors(), cfg.ema_decay)?;
            quantize(&mut self.state.ema);
            self.state.bad_streak = 0;
        } else {
            // A finite norm implies finite gradients, so adamw_step never
            // rejects here; count the skip ourselves.
            self.state.adam.skipped += 1;
            self.state.bad_streak += 1;
        }
        self.state.step += 1;
        if self.state.bad_streak >= MAX_BAD_STEPS {
            return Err(Error::Numeric(format!(
                "training aborted at step {step}: {MAX_BAD_STEPS} consecutive non-finite steps \
                 (last loss {}, grad norm {}, lr {lr}, {} steps skipped in total)",
                row.loss, row.grad_norm, self.state.adam.skipped
            )));
        }
        Ok(row)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub checkpoint_dir: Option<PathBuf>,
}

/// Checkpoint file name for `step`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Train until `config.total_steps`, streaming metric rows to `metrics`
/// (header first when the run starts at step 0) and writing checkpoints.
pub fn run(trainer: &mut Trainer, data: &ToyDataset, metrics: &mut dyn Write, out: &RunOutputs) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if trainer.state.step == 0 {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    while trainer.state.step < trainer.config.total_steps {
        let row = trainer.step(data)?;
        writeln!(metrics, "{}", row.csv())?;
        rows.push(row);
        let s = trainer.state.step;
        let due = trainer.config.checkpoint_every.is_some_and(|k| s % k == 0) || s == trainer.config.total_steps;
        if let (Some(dir), true) = (&out.checkpoint_dir, due) {
            trainer.checkpoint()?.save(checkpoint_path(dir, s))?;
        }
    }
    metrics.flush()?;
    Ok(rows)
}

/// Train a fresh run in memory and return the trainer and its metrics.
pub fn train(model: PixelDit, data: &ToyDataset, config: TrainConfig) -> Result<(Trainer, Vec<MetricRow>)> {
    let mut tr = Trainer::new(model, config)?;
    let rows = run(&mut tr, data, &mut std::io::sink(), &RunOutputs::default())?;
    Ok((tr, rows))
}
