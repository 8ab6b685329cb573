//! Noising mathematics for both tracks.
//!
//! The discrete track and the "which positions are masked" side of the
//! continuous track share a linear absorbing-mask schedule over `T` steps.
//! Inside a masked continuous token, a DDPM chain over `T'` steps models the
//! token value itself.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_space::{TokenId, TrackPair, Vocabulary};

/// Linear absorbing-mask schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    steps: u32,
}

impl MaskSchedule {
    pub fn new(steps: u32) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("mask schedule needs T >= 1"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }
}

/// Probability that a clean token survives to step `t`: `1 - t/T`.
pub fn mask_keep_prob(t: u32, total: u32) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::arg(format!("mask step {t} outside [0, {total}]")));
    }
    Ok(1.0 - t as f64 / total as f64)
}

/// Sequence loss weight `1 - (t_s - 1)/T`.
pub fn seq_reweight(t_s: u32, total: u32) -> Result<f64> {
    if t_s == 0 || t_s > total {
        return Err(Error::arg(format!("sequence step {t_s} outside [1, {total}]")));
    }
    Ok(1.0 - (t_s - 1) as f64 / total as f64)
}

/// Structure loss weight; constant.
pub fn struct_reweight(_t_z: u32) -> f64 {
    1.0
}

/// Number of masked positions at step `t` for a track of length `len`.
pub fn masked_count(t: u32, total: u32, len: usize) -> usize {
    // round half away from zero, computed in integers: (2*t*L + T) / (2*T)
    let num = 2 * t as u64 * len as u64 + total as u64;
    (num / (2 * total as u64)) as usize
}

/// DDPM coefficients for a linear beta schedule. Index `k` holds step `t' = k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Linear-schedule endpoints for a 1000-step chain.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
const REFERENCE_STEPS: f64 = 1000.0;

/// Default linear endpoints for a `steps`-long chain: the 1000-step
/// endpoints scaled by `1000 / steps` (end capped at 0.999), so the chain
/// ends near pure noise for any length.
pub fn default_beta_range(steps: u32) -> (f64, f64) {
    let s = REFERENCE_STEPS / steps.max(1) as f64;
    let end = (DEFAULT_BETA_END * s).min(0.999);
    ((DEFAULT_BETA_START * s).min(end), end)
}

pub fn default_ddpm_schedule(steps: u32) -> Result<DdpmSchedule> {
    let (start, end) = default_beta_range(steps);
    make_ddpm_schedule(steps, start, end)
}

impl DdpmSchedule {
    pub fn steps(&self) -> u32 {
        self.beta.len() as u32
    }

    fn idx(&self, t_prime: u32) -> Result<usize> {
        if t_prime == 0 || t_prime > self.steps() {
            return Err(Error::arg(format!("DDPM step {t_prime} outside [1, {}]", self.steps())));
        }
        Ok(t_prime as usize - 1)
    }

    pub fn alpha_at(&self, t_prime: u32) -> Result<f64> {
        Ok(self.alpha[self.idx(t_prime)?])
    }

    pub fn alpha_bar_at(&self, t_prime: u32) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t_prime)?])
    }

    pub fn sigma_at(&self, t_prime: u32) -> Result<f64> {
        Ok(self.sigma[self.idx(t_prime)?])
    }
}

pub fn make_ddpm_schedule(steps: u32, beta_start: f64, beta_end: f64) -> Result<DdpmSchedule> {
    if steps == 0 {
        return Err(Error::arg("DDPM schedule needs T' >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let n = steps as usize;
    let beta: Vec<f64> = (0..n)
        .map(|k| {
            if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(DdpmSchedule { beta, alpha, alpha_bar, sigma })
}

/// `sqrt(abar) * z0 + sqrt(1 - abar) * eps`.
pub fn ddpm_forward(z0: &[f64], t_prime: u32, eps: &[f64], sched: &DdpmSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::arg(format!("dimension mismatch: z0 {} vs eps {}", z0.len(), eps.len())));
    }
    let ab = sched.alpha_bar_at(t_prime)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    SeqGen,
    StructGen,
    CoGen,
    Fold,
    InverseFold,
}

/// A pair of scheduler positions and the task they encode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskMode {
    pub kind: TaskKind,
    pub t_s: u32,
    pub t_z: u32,
}

impl TaskMode {
    pub fn new(kind: TaskKind, t_s: u32, t_z: u32, total: u32) -> Result<Self> {
        if t_s > total || t_z > total {
            return Err(Error::arg(format!("scheduler steps ({t_s}, {t_z}) exceed T={total}")));
        }
        let ok = match kind {
            TaskKind::SeqGen => t_z == total,
            TaskKind::StructGen => t_s == total,
            TaskKind::CoGen => t_s == t_z,
            TaskKind::Fold => t_s == 0 && t_z == total,
            TaskKind::InverseFold => t_z == 0,
        };
        if !ok {
            return Err(Error::arg(format!("({t_s}, {t_z}) is not a valid {kind:?} setting")));
        }
        Ok(Self { kind, t_s, t_z })
    }

    /// Whether the sequence track contributes to the training loss. A track
    /// pinned fully masked by its task only serves as absent context.
    pub fn trains_seq(&self) -> bool {
        !matches!(self.kind, TaskKind::StructGen | TaskKind::Fold)
    }

    pub fn trains_struct(&self) -> bool {
        !matches!(self.kind, TaskKind::SeqGen | TaskKind::InverseFold)
    }
}

/// Training mix over sequence generation, structure generation and
/// co-generation, optionally extended with the two conditional settings:
/// folding (sequence clean, structure fully masked, as at inference) and
/// inverse folding (structure clean, sequence masked at `t`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub seq: f64,
    pub structure: f64,
    pub cogen: f64,
    #[serde(default)]
    pub fold: f64,
    #[serde(default)]
    pub inverse_fold: f64,
}

impl TaskMix {
    pub fn new(seq: f64, structure: f64, cogen: f64) -> Result<Self> {
        Self::with_conditional(seq, structure, cogen, 0.0, 0.0)
    }

    pub fn with_conditional(seq: f64, structure: f64, cogen: f64, fold: f64, inverse_fold: f64) -> Result<Self> {
        let mix = Self { seq, structure, cogen, fold, inverse_fold };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.seq, self.structure, self.cogen, self.fold, self.inverse_fold];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::arg(format!("mix entries must be non-negative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("mix must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { seq: 0.2, structure: 0.2, cogen: 0.6, fold: 0.0, inverse_fold: 0.0 }
    }
}

pub fn sample_task_mode<R: Rng + ?Sized>(rng: &mut R, mix: &TaskMix, total: u32) -> Result<TaskMode> {
    mix.validate()?;
    if total == 0 {
        return Err(Error::arg("T must be >= 1"));
    }
    let u: f64 = rng.gen();
    let t = rng.gen_range(1..=total);
    let weights = [mix.seq, mix.structure, mix.cogen, mix.fold, mix.inverse_fold];
    // round-off in the cumulative sum falls to the last branch with weight
    let mut branch = weights.iter().rposition(|&w| w > 0.0).expect("validated mix has positive mass");
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            branch = k;
            break;
        }
    }
    let mode = match branch {
        0 => TaskMode { kind: TaskKind::SeqGen, t_s: t, t_z: total },
        1 => TaskMode { kind: TaskKind::StructGen, t_s: total, t_z: t },
        2 => TaskMode { kind: TaskKind::CoGen, t_s: t, t_z: t },
        3 => TaskMode { kind: TaskKind::Fold, t_s: 0, t_z: total },
        _ => TaskMode { kind: TaskKind::InverseFold, t_s: t, t_z: 0 },
    };
    Ok(mode)
}

/// Positions to mask at step `t`: exactly `round(t/T * L)`, uniform without replacement.
pub fn corruption_positions<R: Rng + ?Sized>(len: usize, t: u32, total: u32, rng: &mut R) -> Vec<bool> {
    let k = masked_count(t, total, len).min(len);
    let mut mask = vec![false; len];
    for i in sample_indices(rng, len, k).into_iter() {
        mask[i] = true;
    }
    mask
}

pub fn corrupt_sequence<R: Rng + ?Sized>(
    seq: &[TokenId],
    t_s: u32,
    total: u32,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if t_s > total {
        return Err(Error::arg(format!("t_s={t_s} exceeds T={total}")));
    }
    if seq.iter().any(|&s| !vocab.is_real(s)) {
        return Err(Error::arg("sequence already contains mask tokens"));
    }
    let mask = corruption_positions(seq.len(), t_s, total, rng);
    Ok(seq
        .iter()
        .zip(&mask)
        .map(|(&s, &m)| if m { vocab.mask_id() } else { s })
        .collect())
}

/// Sets structure mask flags on a clean pair. The numeric content is kept
/// so the loss can still read the clean target.
pub fn corrupt_structure<R: Rng + ?Sized>(
    pair: &TrackPair,
    t_z: u32,
    total: u32,
    rng: &mut R,
) -> Result<TrackPair> {
    if t_z > total {
        return Err(Error::arg(format!("t_z={t_z} exceeds T={total}")));
    }
    if pair.struct_mask.iter().any(|&m| m) {
        return Err(Error::arg("structure track already contains masks"));
    }
    let mut out = pair.clone();
    out.struct_mask = corruption_positions(pair.len(), t_z, total, rng);
    Ok(out)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keep_prob_endpoints() {
        assert_eq!(mask_keep_prob(0, 100).unwrap(), 1.0);
        assert_eq!(mask_keep_prob(100, 100).unwrap(), 0.0);
        assert_eq!(mask_keep_prob(25, 100).unwrap(), 0.75);
        assert!(mask_keep_prob(101, 100).is_err());
    }

    #[test]
    fn reweight_values() {
        assert_eq!(seq_reweight(1, 100).unwrap(), 1.0);
        assert!((seq_reweight(100, 100).unwrap() - 0.01).abs() < 1e-15);
        assert!(seq_reweight(0, 100).is_err());
        assert!(seq_reweight(101, 100).is_err());
        let w: Vec<f64> = (1..=100).map(|t| seq_reweight(t, 100).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert_eq!(struct_reweight(1), 1.0);
        assert_eq!(struct_reweight(100), 1.0);
    }

    #[test]
    fn ddpm_schedule_shape() {
        let s = make_ddpm_schedule(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0 - 1e-4);
        assert!((s.alpha_bar_at(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|p| p[1] < p[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((s.beta[99] - 0.02).abs() < 1e-15);
        let one = make_ddpm_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(one.beta, vec![0.3]);
        assert_eq!(one.alpha_bar, vec![0.7]);
        assert!(make_ddpm_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_ddpm_schedule(10, 0.0, 0.02).is_err());
        assert!(make_ddpm_schedule(10, 0.03, 0.02).is_err());
        assert!(make_ddpm_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn ddpm_forward_cases() {
        let s = make_ddpm_schedule(10, 1e-4, 0.02).unwrap();
        let z0 = [1.0, -2.0];
        let out = ddpm_forward(&z0, 3, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar[2].sqrt();
        assert_eq!(out, vec![a, -2.0 * a]);
        assert!(ddpm_forward(&z0, 3, &[0.0], &s).is_err());
        assert!(ddpm_forward(&z0, 0, &[0.0, 0.0], &s).is_err());
        // tiny beta: output approaches z0
        let tiny = make_ddpm_schedule(1, 1e-12, 1e-12).unwrap();
        let out = ddpm_forward(&z0, 1, &[0.5, 0.5], &tiny).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn ddpm_forward_preserves_unit_variance() {
        let s = make_ddpm_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z0 = standard_normal_vec(&mut rng, 1);
            let eps = standard_normal_vec(&mut rng, 1);
            let x = ddpm_forward(&z0, 40, &eps, &s).unwrap()[0];
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn task_mode_invariants() {
        assert!(TaskMode::new(TaskKind::SeqGen, 3, 10, 10).is_ok());
        assert!(TaskMode::new(TaskKind::SeqGen, 3, 9, 10).is_err());
        assert!(TaskMode::new(TaskKind::StructGen, 9, 3, 10).is_err());
        assert!(TaskMode::new(TaskKind::Fold, 0, 10, 10).is_ok());
        assert!(TaskMode::new(TaskKind::Fold, 0, 7, 10).is_err());
        assert!(TaskMode::new(TaskKind::InverseFold, 4, 0, 10).is_ok());
        assert!(TaskMode::new(TaskKind::CoGen, 4, 5, 10).is_err());
        assert!(TaskMode::new(TaskKind::CoGen, 11, 11, 10).is_err());
    }

    #[test]
    fn deterministic_mix_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = TaskMix::new(1.0, 0.0, 0.0).unwrap();
        for _ in 0..1000 {
            let m = sample_task_mode(&mut rng, &mix, 50).unwrap();
            assert_eq!(m.kind, TaskKind::SeqGen);
            assert_eq!(m.t_z, 50);
            assert!((1..=50).contains(&m.t_s));
        }
        assert!(TaskMix::new(0.5, 0.5, 0.5).is_err());
        assert!(TaskMix::new(-0.1, 0.6, 0.5).is_err());
    }

    #[test]
    fn cogen_draws_share_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mix = TaskMix::new(0.0, 0.0, 1.0).unwrap();
        for _ in 0..1000 {
            let m = sample_task_mode(&mut rng, &mix, 17).unwrap();
            assert_eq!(m.t_s, m.t_z);
        }
    }

    #[test]
    fn corruption_endpoints() {
        let vocab = Vocabulary::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq: Vec<TokenId> = vec![0, 1, 2, 3, 0, 1];
        assert_eq!(corrupt_sequence(&seq, 0, 10, &vocab, &mut rng).unwrap(), seq);
        let all = corrupt_sequence(&seq, 10, 10, &vocab, &mut rng).unwrap();
        assert!(all.iter().all(|&s| s == vocab.mask_id()));
        assert!(corrupt_sequence(&all, 1, 10, &vocab, &mut rng).is_err());

        let pair = TrackPair::clean(seq.clone(), vec![1.0; 12], 2).unwrap();
        let none = corrupt_structure(&pair, 0, 10, &mut rng).unwrap();
        assert!(none.struct_mask.iter().all(|&m| !m));
        let full = corrupt_structure(&pair, 10, 10, &mut rng).unwrap();
        assert!(full.struct_mask.iter().all(|&m| m));
        assert_eq!(full.struct_tokens, pair.struct_tokens);
    }

    #[test]
    fn corruption_count_exhaustive_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for total in 1..=32u32 {
            for len in 1..=32usize {
                for t in 0..=total {
                    // exact rational rounding, halves up
                    let (q, r) = ((t as usize * len) / total as usize, (t as usize * len) % total as usize);
                    let want = if 2 * r >= total as usize { q + 1 } else { q };
                    let mask = corruption_positions(len, t, total, &mut rng);
                    assert_eq!(mask.iter().filter(|&&m| m).count(), want, "L={len} T={total} t={t}");
                }
            }
        }
    }

    #[test]
    fn corruption_positions_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let mut hits = vec![0usize; 100];
        for _ in 0..trials {
            let m = corruption_positions(100, 37, 100, &mut rng);
            assert_eq!(m.iter().filter(|&&b| b).count(), 37);
            for (h, b) in hits.iter_mut().zip(m) {
                *h += b as usize;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.37).abs() < 0.02, "frequency {f}");
        }
    }
}
