//! Objective, optimizer, learning-rate program and the training loop.

mod loss;
mod optim;

pub use loss::{loss_seq, loss_struct, loss_struct_with, total_loss, SeqLossItem};
pub use optim::{adamw_step, adamw_update, decay_mask, AdamWConfig, OptimizerState};

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_backward, init_params, DiffusionDraw, LossSpec, ModelConfig, ModelParams, TrainExample};
use crate::rng::{substream, Stream};
use crate::schedules::{
    corruption_positions, default_ddpm_schedule, sample_task_mode, seq_reweight, struct_reweight, DdpmSchedule,
    TaskMix, TaskMode,
};
use crate::token_space::{fit_scaler, TokenScaler, TrackPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Mask-schedule length `T`.
    pub mask_steps: u32,
    /// DDPM length `T'`; must equal the model's.
    pub ddpm_steps: u32,
    pub mix: TaskMix,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_frac: f64,
    pub adamw: AdamWConfig,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            mask_steps: 100,
            ddpm_steps: 100,
            mix: TaskMix::default(),
            batch_size: 32,
            steps: 1500,
            lr_peak: 1e-3,
            lr_floor: 1e-4,
            warmup_frac: 0.05,
            adamw: AdamWConfig::default(),
            max_grad_norm: None,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// Recipe for the default toy world on one core in under ten minutes.
    /// Most of the mix goes to the fold setting: the emission law is a
    /// three-token lookup that the model only picks up with many complete
    /// sequences shown against a fully masked structure track.
    pub fn toy_world() -> Self {
        Self {
            mix: TaskMix { seq: 0.05, structure: 0.05, cogen: 0.25, fold: 0.55, inverse_fold: 0.1 },
            batch_size: 16,
            steps: 26_000,
            checkpoint_every: 5_000,
            log_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.mask_steps == 0 || self.ddpm_steps == 0 {
            return Err(Error::Config("mask_steps and ddpm_steps must be >= 1".into()));
        }
        self.mix.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be >= 1".into()));
        }
        if !(self.lr_floor > 0.0 && self.lr_peak >= self.lr_floor) {
            return Err(Error::Config("need 0 < lr_floor <= lr_peak".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("max_grad_norm must be > 0".into()));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.adamw.validate()
    }

    /// Stable 64-bit digest of the configuration, recorded in checkpoints.
    pub fn digest(&self) -> u64 {
        let text = format!("{self:?}");
        crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182).checksum(text.as_bytes())
    }
}

/// Linear warmup from `lr_floor` to `lr_peak`, then linear decay back.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(total_steps);
    let warm = (cfg.warmup_frac * total_steps as f64).round() as u64;
    let span = cfg.lr_peak - cfg.lr_floor;
    if step < warm {
        cfg.lr_floor + span * step as f64 / warm as f64
    } else if total_steps == warm {
        cfg.lr_peak
    } else {
        cfg.lr_floor + span * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

/// Corrupts one clean, scaled pair under `mode`, drawing from the
/// substreams keyed by `(step, index)`.
pub fn build_example(
    pair: &TrackPair,
    mode: TaskMode,
    mask_steps: u32,
    sched: &DdpmSchedule,
    mask_id: u16,
    seed: u64,
    step: u64,
    index: u64,
) -> Result<TrainExample<f32>> {
    let len = pair.len();
    let ds = pair.dim();
    let seq_mask = corruption_positions(len, mode.t_s, mask_steps, &mut substream(seed, Stream::SeqCorruption, step, index));
    let struct_mask =
        corruption_positions(len, mode.t_z, mask_steps, &mut substream(seed, Stream::StructCorruption, step, index));
    let seq_input = pair.seq.iter().zip(&seq_mask).map(|(&s, &m)| if m { mask_id } else { s }).collect();
    let seq_weight = if mode.trains_seq() { Some(seq_reweight(mode.t_s, mask_steps)?) } else { None };
    let struct_weight = if mode.trains_struct() { Some(struct_reweight(mode.t_z)) } else { None };
    let mut draws = Vec::new();
    if struct_weight.is_some() {
        let mut rng = substream(seed, Stream::DiffusionDraw, step, index);
        for i in (0..len).filter(|&i| struct_mask[i]) {
            let t_prime = rng.gen_range(1..=sched.steps());
            let eps = crate::schedules::standard_normal_vec(&mut rng, ds).into_iter().map(|x| x as f32).collect();
            draws.push(DiffusionDraw { position: i, t_prime, eps });
        }
    }
    Ok(TrainExample {
        seq_input,
        seq_target: pair.seq.clone(),
        struct_clean: pair.struct_tokens.clone(),
        struct_mask,
        seq_weight,
        struct_weight,
        draws,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_seq: f64,
    pub loss_struct: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "step\tlr\tloss_total\tloss_seq\tloss_struct\tgrad_norm\twall_ms";

impl StepMetrics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step, self.lr, self.loss_total, self.loss_seq, self.loss_struct, self.grad_norm, self.wall_ms
        )
    }
}

/// Training state handed to the checkpoint callback.
pub struct Snapshot<'a> {
    pub step: u64,
    pub params: &'a ModelParams<f32>,
    pub optimizer: &'a OptimizerState<f32>,
    pub scaler: &'a TokenScaler,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub scaler: TokenScaler,
    pub history: Vec<StepMetrics>,
    /// Samples whose structure term was evaluated, over the whole run.
    pub struct_loss_evaluations: u64,
    pub seq_loss_evaluations: u64,
}

/// Optional outputs of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives the header and one record per log interval.
    pub metrics: Option<&'a mut dyn Write>,
    /// Called every `checkpoint_every` steps and after the final step.
    pub checkpoint: Option<&'a mut dyn FnMut(&Snapshot<'_>) -> Result<()>>,
    pub quiet: bool,
}

/// Runs the full program on a clean raw-space dataset.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[TrackPair],
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.ddpm_steps != model_cfg.ddpm_steps {
        return Err(Error::Config(format!(
            "train ddpm_steps {} differs from model ddpm_steps {}",
            cfg.ddpm_steps, model_cfg.ddpm_steps
        )));
    }
    if dataset.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    for p in dataset {
        if p.dim() != model_cfg.struct_dim {
            return Err(Error::arg(format!("dataset dim {} but model expects {}", p.dim(), model_cfg.struct_dim)));
        }
        if p.len() > model_cfg.max_len {
            return Err(Error::Length { len: p.len(), max_len: model_cfg.max_len });
        }
        if p.seq.iter().any(|&s| s as usize >= model_cfg.vocab_size) {
            return Err(Error::arg("dataset contains tokens outside the vocabulary"));
        }
    }
    let scaler = fit_scaler(dataset)?;
    let scaled: Vec<TrackPair> = dataset
        .iter()
        .map(|p| {
            let mut q = p.clone();
            scaler.apply_pair(&mut q);
            q
        })
        .collect();
    train_scaled(model_cfg, cfg, &scaled, scaler, hooks)
}

/// Like [`train`] but on data already mapped through `scaler`.
pub fn train_scaled(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scaled: &[TrackPair],
    scaler: TokenScaler,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let sched = default_ddpm_schedule(cfg.ddpm_steps)?;
    let mut params: ModelParams<f32> = init_params(model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::for_params(&params);
    let decay = decay_mask(params.layout());
    let spec = LossSpec { gamma: cfg.gamma };
    let mask_id = model_cfg.vocab().mask_id();
    let mut history = Vec::new();
    let mut struct_evals = 0u64;
    let mut seq_evals = 0u64;
    let started = Instant::now();
    if let Some(w) = hooks.metrics.as_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics log", e))?;
    }

    for step in 0..cfg.steps {
        let mut batch_rng = substream(cfg.seed, Stream::Batch, step, 0);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size as u64 {
            let pair = &scaled[batch_rng.gen_range(0..scaled.len())];
            let mode = sample_task_mode(&mut substream(cfg.seed, Stream::TaskMode, step, k), &cfg.mix, cfg.mask_steps)?;
            batch.push(build_example(pair, mode, cfg.mask_steps, &sched, mask_id, cfg.seed, step, k)?);
        }
        let (loss, mut grads) = forward_backward(&params, &batch, &spec, &sched).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        struct_evals += loss.struct_samples as u64;
        seq_evals += loss.seq_samples as u64;
        let grad_norm = grads.l2_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Training { step, reason: "non-finite gradient norm".into() });
        }
        if let Some(c) = cfg.max_grad_norm {
            if grad_norm > c {
                let s = (c / grad_norm) as f32;
                grads.flat_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = lr_at(step, cfg.steps, cfg);
        adamw_update(params.flat_mut(), grads.flat(), &decay, &mut opt, lr, &cfg.adamw)
            .map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training { step, reason },
                other => other,
            })?;
        if !params.all_finite() {
            return Err(Error::Training { step, reason: "parameters diverged".into() });
        }

        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps || step == 0 {
            let m = StepMetrics {
                step: done,
                lr,
                loss_total: loss.total,
                loss_seq: loss.seq,
                loss_struct: loss.structure,
                grad_norm,
                wall_ms: started.elapsed().as_millis(),
            };
            if let Some(w) = hooks.metrics.as_mut() {
                writeln!(w, "{}", m.tsv()).map_err(|e| Error::io("metrics log", e))?;
            }
            if !hooks.quiet {
                eprintln!(
                    "step {done}/{} loss {:.4} (seq {:.4}, struct {:.4}) lr {lr:.2e}",
                    cfg.steps, m.loss_total, m.loss_seq, m.loss_struct
                );
            }
            history.push(m);
        }
        let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if periodic || done == cfg.steps {
            if let Some(cb) = hooks.checkpoint.as_mut() {
                cb(&Snapshot { step: done, params: &params, optimizer: &opt, scaler: &scaler })?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        scaler,
        history,
        struct_loss_evaluations: struct_evals,
        seq_loss_evaluations: seq_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_at(0, total, &cfg), cfg.lr_floor);
        assert!((lr_at(50, total, &cfg) - cfg.lr_peak).abs() < 1e-15);
        assert!((lr_at(total, total, &cfg) - cfg.lr_floor).abs() < 1e-12);
        assert!((lr_at(25, total, &cfg) - 5.5e-4).abs() < 1e-12);
        assert!(lr_at(600, total, &cfg) < lr_at(500, total, &cfg));
    }

    #[test]
    fn config_guards() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        let bad_mix = TaskMix { seq: 0.5, structure: 0.5, cogen: 0.5, fold: 0.0, inverse_fold: 0.0 };
        assert!(TrainConfig { mix: bad_mix, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn digest_tracks_changes() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
