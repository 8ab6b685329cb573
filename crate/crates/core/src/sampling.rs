//! Generation: the DDPM reverse chain with guidance, categorical sampling
//! with temperature, iterative unmasking, and the four generation modes.
//!
//! Public entry points take and return raw (unscaled) continuous tokens.
//! Every random draw comes from a substream keyed by (purpose, LM step,
//! position), so switching one consumer on or off never shifts another.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{categorical_head, denoise_head, fuse_and_encode, EncoderInput, ModelParams};
use crate::rng::{derive_seed, substream, Stream};
use crate::schedules::{default_ddpm_schedule, standard_normal_vec, DdpmSchedule};
use crate::token_space::{TokenId, TokenScaler, TrackPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    CoGen,
    Scaffold,
    Fold,
    InverseFold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmaskStrategy {
    Random,
    TopK,
}

/// Fixed tokens for scaffolding; `struct_tokens` is raw, `[positions.len(), dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Motif {
    pub positions: Vec<usize>,
    pub seq: Vec<TokenId>,
    pub struct_tokens: Vec<f32>,
}

pub const DEFAULT_ANTI_REPEAT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    pub mode: SampleMode,
    pub length: usize,
    /// LM steps; `None` uses the mode default.
    pub lm_steps: Option<u32>,
    pub tau_s: f64,
    pub tau_z: f64,
    pub cfg_scale: f64,
    /// DDPM steps; `None` uses the model's. Other values are rejected.
    pub ddpm_steps: Option<u32>,
    pub unmask: UnmaskStrategy,
    pub anti_repeat: Option<usize>,
    #[serde(skip)]
    pub motif: Option<Motif>,
    pub maintain_motif: bool,
    pub seed: u64,
    /// Selects an alternative step-noise stream; all other streams unchanged.
    pub step_noise_salt: u64,
    /// Evaluate the unconditional branch even when `cfg_scale == 1`.
    pub force_unconditional_pass: bool,
    pub trace: bool,
}

impl SampleOptions {
    pub fn cogen(length: usize, seed: u64) -> Self {
        Self {
            mode: SampleMode::CoGen,
            length,
            lm_steps: None,
            tau_s: 1.0,
            tau_z: 0.35,
            cfg_scale: 2.0,
            ddpm_steps: None,
            unmask: UnmaskStrategy::TopK,
            anti_repeat: None,
            motif: None,
            maintain_motif: true,
            seed,
            step_noise_salt: 0,
            force_unconditional_pass: false,
            trace: false,
        }
    }

    pub fn scaffold(length: usize, motif: Motif, seed: u64) -> Self {
        Self { mode: SampleMode::Scaffold, tau_z: 0.1, cfg_scale: 1.0, motif: Some(motif), ..Self::cogen(length, seed) }
    }

    pub fn fold(length: usize, seed: u64) -> Self {
        Self { mode: SampleMode::Fold, lm_steps: Some(1), tau_z: 0.0, cfg_scale: 1.0, ..Self::cogen(length, seed) }
    }

    pub fn inverse_fold(length: usize, seed: u64) -> Self {
        Self { mode: SampleMode::InverseFold, tau_s: 0.1, cfg_scale: 1.0, ..Self::cogen(length, seed) }
    }

    pub fn for_mode(mode: SampleMode, length: usize, seed: u64) -> Self {
        match mode {
            SampleMode::CoGen => Self::cogen(length, seed),
            SampleMode::Scaffold => Self { mode, tau_z: 0.1, cfg_scale: 1.0, ..Self::cogen(length, seed) },
            SampleMode::Fold => Self::fold(length, seed),
            SampleMode::InverseFold => Self::inverse_fold(length, seed),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau_s >= 0.0 && self.tau_s.is_finite()) || !(self.tau_z >= 0.0 && self.tau_z.is_finite()) {
            return Err(Error::arg("temperatures must be finite and >= 0"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::arg("cfg_scale must be finite and >= 0"));
        }
        if let Some(r) = self.anti_repeat {
            if r < 2 {
                return Err(Error::arg("anti_repeat run length must be >= 2"));
            }
        }
        if self.lm_steps == Some(0) {
            return Err(Error::arg("lm_steps must be >= 1"));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.cfg_scale != 1.0 || self.force_unconditional_pass
    }
}

/// Positions unmasked at one LM step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepTrace {
    pub step: u32,
    pub seq_positions: Vec<usize>,
    pub struct_positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub seq: Vec<TokenId>,
    /// Raw-space `[len, dim]`.
    pub struct_tokens: Vec<f32>,
    pub dim: usize,
    pub trace: Option<Vec<StepTrace>>,
}

impl GenerationResult {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn to_pair(&self) -> Result<TrackPair> {
        TrackPair::clean(self.seq.clone(), self.struct_tokens.clone(), self.dim)
    }

    pub fn struct_f64(&self) -> Vec<f64> {
        self.struct_tokens.iter().map(|&v| v as f64).collect()
    }
}

/// `(1 - omega) * uncond + omega * cond`, exact at `omega` of 0 and 1.
pub fn cfg_combine<F: crate::real::Real>(uncond: &[F], cond: &[F], omega: f64) -> Vec<F> {
    if omega == 1.0 {
        return cond.to_vec();
    }
    if omega == 0.0 {
        return uncond.to_vec();
    }
    let (a, b) = (F::lit(1.0 - omega), F::lit(omega));
    uncond.iter().zip(cond).map(|(&u, &c)| a * u + b * c).collect()
}

/// Reverse DDPM chain for one continuous token (scaled space).
///
/// `init` seeds `z^(T')`; `noise` supplies the per-step `delta`, which is
/// never drawn when `tau_z == 0`. Guidance is applied iff `c_uncond` is given.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_generate_token<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    params: &ModelParams<f32>,
    c: &[f32],
    c_uncond: Option<&[f32]>,
    sched: &DdpmSchedule,
    tau_z: f64,
    omega: f64,
    init: &mut R1,
    noise: &mut R2,
) -> Result<Vec<f64>> {
    let ds = params.config().struct_dim;
    let mut z = standard_normal_vec(init, ds);
    let mut zf = vec![0f32; ds];
    for t in (1..=sched.steps()).rev() {
        for (a, &b) in zf.iter_mut().zip(&z) {
            *a = b as f32;
        }
        let cond = denoise_head(params, &zf, t, c)?;
        let eps = match c_uncond {
            Some(cu) => cfg_combine(&denoise_head(params, &zf, t, cu)?, &cond, omega),
            None => cond,
        };
        let alpha = sched.alpha_at(t)?;
        let ab = sched.alpha_bar_at(t)?;
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        for k in 0..ds {
            z[k] = inv * (z[k] - coef * eps[k] as f64);
        }
        if t > 1 && tau_z != 0.0 {
            let s = sched.sigma_at(t)? * tau_z;
            for (zk, d) in z.iter_mut().zip(standard_normal_vec(noise, ds)) {
                *zk += s * d;
            }
        }
    }
    Ok(z)
}

/// Draws a token from `softmax(logits / tau)`; `tau == 0` is argmax with
/// the lowest index winning ties. Returns the token and its probability
/// under the tempered (or, for argmax, plain) softmax.
pub fn sample_sequence_token<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> (usize, f64) {
    sample_excluding(logits, tau, &[], rng).expect("non-empty logits")
}

fn tempered_probs(logits: &[f64], tau: f64, excluded: &[usize]) -> Vec<f64> {
    let t = if tau == 0.0 { 1.0 } else { tau };
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, &l)| l / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if excluded.contains(&i) { 0.0 } else { (l / t - max).exp() })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn sample_excluding<R: Rng + ?Sized>(logits: &[f64], tau: f64, excluded: &[usize], rng: &mut R) -> Option<(usize, f64)> {
    if excluded.len() >= logits.len() {
        return None;
    }
    let p = tempered_probs(logits, tau, excluded);
    if tau == 0.0 {
        let mut best = None::<usize>;
        for i in (0..logits.len()).filter(|i| !excluded.contains(i)) {
            if best.is_none_or(|b| logits[i] > logits[b]) {
                best = Some(i);
            }
        }
        return best.map(|b| (b, p[b]));
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        last = i;
        acc += pi;
        if u < acc {
            return Some((i, pi));
        }
    }
    Some((last, p[last]))
}

/// Chooses `k` positions from `candidates` (`(position, score)` pairs).
/// Returned positions are sorted ascending.
pub fn select_unmask<R: Rng + ?Sized>(
    strategy: UnmaskStrategy,
    candidates: &[(usize, f64)],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let k = k.min(candidates.len());
    let mut out: Vec<usize> = match strategy {
        UnmaskStrategy::Random => {
            sample_indices(rng, candidates.len(), k).into_iter().map(|j| candidates[j].0).collect()
        }
        UnmaskStrategy::TopK => {
            let mut order: Vec<&(usize, f64)> = candidates.iter().collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            order.into_iter().take(k).map(|c| c.0).collect()
        }
    };
    out.sort_unstable();
    out
}

/// Length of the run of `token` that placing it at `pos` would create.
fn run_length(seq: &[TokenId], mask_id: TokenId, pos: usize, token: TokenId) -> usize {
    let same = |i: usize| seq[i] == token && seq[i] != mask_id;
    let left = (0..pos).rev().take_while(|&i| same(i)).count();
    let right = (pos + 1..seq.len()).take_while(|&i| same(i)).count();
    1 + left + right
}

/// Replaces `candidate` when placing it at `pos` would create a run longer
/// than `max_run`, resampling from the remaining tokens.
#[allow(clippy::too_many_arguments)]
pub fn apply_anti_repeat<R: Rng + ?Sized>(
    seq: &[TokenId],
    mask_id: TokenId,
    pos: usize,
    candidate: TokenId,
    logits: &[f64],
    tau: f64,
    max_run: usize,
    rng: &mut R,
) -> TokenId {
    if run_length(seq, mask_id, pos, candidate) <= max_run {
        return candidate;
    }
    let mut excluded = vec![candidate as usize];
    for _ in 0..logits.len().saturating_sub(1) {
        let Some((tok, _)) = sample_excluding(logits, tau, &excluded, rng) else { break };
        if run_length(seq, mask_id, pos, tok as TokenId) <= max_run {
            return tok as TokenId;
        }
        excluded.push(tok);
    }
    match sample_excluding(logits, 0.0, &excluded, rng) {
        Some((tok, _)) => tok as TokenId,
        None => candidate,
    }
}

/// Number of positions to unmask at step `j` (1-based) of `steps` when `n`
/// must be filled; the cumulative count after step `j` is `round(n j / steps)`.
pub fn k_schedule(n: usize, steps: u32, j: u32) -> usize {
    let cum = |j: u32| (2 * n as u64 * j as u64 + steps as u64) / (2 * steps as u64);
    (cum(j) - cum(j - 1)) as usize
}

/// Mutable state of one generation run (scaled space).
struct Canvas {
    seq: Vec<TokenId>,
    z: Vec<f32>,
    struct_mask: Vec<bool>,
    /// Positions still to be generated on each track.
    seq_pending: Vec<bool>,
    struct_pending: Vec<bool>,
}

fn ddpm_for(params: &ModelParams<f32>, opts: &SampleOptions) -> Result<DdpmSchedule> {
    let steps = params.config().ddpm_steps;
    if let Some(t) = opts.ddpm_steps {
        if t != steps {
            return Err(Error::arg(format!("ddpm_steps {t} differs from the model's {steps}")));
        }
    }
    default_ddpm_schedule(steps)
}

fn run(params: &ModelParams<f32>, opts: &SampleOptions, mut cv: Canvas, steps: u32) -> Result<(Canvas, Vec<StepTrace>)> {
    let cfg = params.config();
    let ds = cfg.struct_dim;
    let len = cv.seq.len();
    let mask_id = cfg.vocab().mask_id();
    let sched = ddpm_for(params, opts)?;
    let n_seq = cv.seq_pending.iter().filter(|&&p| p).count();
    let n_struct = cv.struct_pending.iter().filter(|&&p| p).count();
    let noise_seed = derive_seed(opts.seed, Stream::StepNoise, opts.step_noise_salt, u64::MAX);
    let mut trace = Vec::new();

    for j in 1..=steps {
        let k_seq = k_schedule(n_seq, steps, j);
        let k_struct = k_schedule(n_struct, steps, j);
        if k_seq == 0 && k_struct == 0 {
            continue;
        }
        let input = EncoderInput { seq: &cv.seq, struct_tokens: &cv.z, struct_mask: &cv.struct_mask };
        let ctx = fuse_and_encode(params, &[input])?.items.remove(0);
        let mut step_trace = StepTrace { step: j, seq_positions: Vec::new(), struct_positions: Vec::new() };

        if k_seq > 0 {
            let mut drafts: Vec<(usize, TokenId, Vec<f64>)> = Vec::new();
            let mut scored = Vec::new();
            for i in (0..len).filter(|&i| cv.seq_pending[i]) {
                let logits: Vec<f64> = categorical_head(params, ctx.row(i)).iter().map(|&x| x as f64).collect();
                let mut rng = substream(opts.seed, Stream::Categorical, j as u64, i as u64);
                let (tok, prob) = sample_sequence_token(&logits, opts.tau_s, &mut rng);
                scored.push((i, prob));
                drafts.push((i, tok as TokenId, logits));
            }
            let chosen = select_unmask(opts.unmask, &scored, k_seq, &mut substream(opts.seed, Stream::Selection, j as u64, 0));
            for &i in &chosen {
                let (_, mut tok, ref logits) = drafts.iter().find(|d| d.0 == i).cloned().expect("draft exists");
                if let Some(r) = opts.anti_repeat {
                    let mut rng = substream(opts.seed, Stream::AntiRepeat, j as u64, i as u64);
                    tok = apply_anti_repeat(&cv.seq, mask_id, i, tok, logits, opts.tau_s, r, &mut rng);
                }
                cv.seq[i] = tok;
                cv.seq_pending[i] = false;
            }
            step_trace.seq_positions = chosen;
        }

        if k_struct > 0 {
            let cands: Vec<(usize, f64)> = (0..len).filter(|&i| cv.struct_pending[i]).map(|i| (i, 0.0)).collect();
            let chosen = select_unmask(
                UnmaskStrategy::Random,
                &cands,
                k_struct,
                &mut substream(opts.seed, Stream::Selection, j as u64, 1),
            );
            let uncond = if opts.guided() {
                // sequence track blanked, current structure track kept
                let blank = vec![mask_id; len];
                let input = EncoderInput { seq: &blank, struct_tokens: &cv.z, struct_mask: &cv.struct_mask };
                Some(fuse_and_encode(params, &[input])?.items.remove(0))
            } else {
                None
            };
            let mut fresh = Vec::with_capacity(chosen.len());
            for &i in &chosen {
                let mut init = substream(opts.seed, Stream::InitNoise, j as u64, i as u64);
                let mut noise = substream(noise_seed, Stream::StepNoise, j as u64, i as u64);
                let zi = ddpm_generate_token(
                    params,
                    ctx.row(i),
                    uncond.as_ref().map(|u| u.row(i)),
                    &sched,
                    opts.tau_z,
                    opts.cfg_scale,
                    &mut init,
                    &mut noise,
                )?;
                fresh.push((i, zi));
            }
            for (i, zi) in fresh {
                for (dst, v) in cv.z[i * ds..(i + 1) * ds].iter_mut().zip(zi) {
                    *dst = v as f32;
                }
                cv.struct_mask[i] = false;
                cv.struct_pending[i] = false;
            }
            step_trace.struct_positions = chosen;
        }
        trace.push(step_trace);
    }
    debug_assert!(!cv.seq_pending.iter().any(|&p| p) && !cv.struct_pending.iter().any(|&p| p));
    Ok((cv, trace))
}

fn check_length(params: &ModelParams<f32>, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::arg("length must be >= 1"));
    }
    let max_len = params.config().max_len;
    if len > max_len {
        return Err(Error::Length { len, max_len });
    }
    Ok(())
}

fn finish(cv: Canvas, trace: Vec<StepTrace>, scaler: &TokenScaler, ds: usize, keep_trace: bool) -> GenerationResult {
    GenerationResult {
        seq: cv.seq,
        struct_tokens: scaler.invert(&cv.z),
        dim: ds,
        trace: keep_trace.then_some(trace),
    }
}

/// Co-generation of both tracks from a fully masked start.
pub fn cogenerate(params: &ModelParams<f32>, scaler: &TokenScaler, opts: &SampleOptions) -> Result<GenerationResult> {
    opts.validate()?;
    let len = opts.length;
    check_length(params, len)?;
    let cfg = params.config();
    let cv = Canvas {
        seq: vec![cfg.vocab().mask_id(); len],
        z: vec![0.0; len * cfg.struct_dim],
        struct_mask: vec![true; len],
        seq_pending: vec![true; len],
        struct_pending: vec![true; len],
    };
    let steps = opts.lm_steps.unwrap_or(len as u32);
    let (cv, trace) = run(params, opts, cv, steps)?;
    Ok(finish(cv, trace, scaler, cfg.struct_dim, opts.trace))
}

/// Co-generation around fixed motif tokens on both tracks.
pub fn scaffold(params: &ModelParams<f32>, scaler: &TokenScaler, opts: &SampleOptions) -> Result<GenerationResult> {
    opts.validate()?;
    let len = opts.length;
    check_length(params, len)?;
    let cfg = params.config();
    let ds = cfg.struct_dim;
    let motif = opts.motif.as_ref().ok_or_else(|| Error::arg("scaffolding requires a motif"))?;
    let l = motif.positions.len();
    if motif.seq.len() != l || motif.struct_tokens.len() != l * ds {
        return Err(Error::arg("motif tracks disagree in length"));
    }
    let mut is_motif = vec![false; len];
    for &p in &motif.positions {
        if p >= len {
            return Err(Error::arg(format!("motif position {p} out of range for length {len}")));
        }
        if is_motif[p] {
            return Err(Error::arg(format!("motif position {p} repeated")));
        }
        is_motif[p] = true;
    }
    if motif.seq.iter().any(|&s| s as usize >= cfg.vocab_size) {
        return Err(Error::arg("motif contains tokens outside the vocabulary"));
    }
    let mut cv = Canvas {
        seq: vec![cfg.vocab().mask_id(); len],
        z: vec![0.0; len * ds],
        struct_mask: vec![true; len],
        seq_pending: vec![true; len],
        struct_pending: vec![true; len],
    };
    let scaled = scaler.apply(&motif.struct_tokens);
    for (m, &p) in motif.positions.iter().enumerate() {
        cv.seq[p] = motif.seq[m];
        cv.z[p * ds..(p + 1) * ds].copy_from_slice(&scaled[m * ds..(m + 1) * ds]);
        cv.struct_mask[p] = false;
        if opts.maintain_motif {
            cv.seq_pending[p] = false;
            cv.struct_pending[p] = false;
        }
    }
    let free = if opts.maintain_motif { len - l } else { len };
    let steps = opts.lm_steps.unwrap_or(free.max(1) as u32);
    let (cv, trace) = run(params, opts, cv, steps)?;
    let mut out = finish(cv, trace, scaler, ds, opts.trace);
    if opts.maintain_motif {
        // copy the raw motif so scaling round-off cannot touch it
        for (m, &p) in motif.positions.iter().enumerate() {
            out.seq[p] = motif.seq[m];
            out.struct_tokens[p * ds..(p + 1) * ds].copy_from_slice(&motif.struct_tokens[m * ds..(m + 1) * ds]);
        }
    }
    Ok(out)
}

/// Continuous track for a complete discrete track, generated in one pass.
pub fn fold(params: &ModelParams<f32>, scaler: &TokenScaler, seq: &[TokenId], opts: &SampleOptions) -> Result<Vec<f32>> {
    opts.validate()?;
    check_length(params, seq.len())?;
    let cfg = params.config();
    if seq.iter().any(|&s| s as usize >= cfg.vocab_size) {
        return Err(Error::arg("folding needs a complete sequence without mask tokens"));
    }
    let len = seq.len();
    let cv = Canvas {
        seq: seq.to_vec(),
        z: vec![0.0; len * cfg.struct_dim],
        struct_mask: vec![true; len],
        seq_pending: vec![false; len],
        struct_pending: vec![true; len],
    };
    let steps = opts.lm_steps.unwrap_or(1);
    let (cv, _) = run(params, opts, cv, steps)?;
    Ok(scaler.invert(&cv.z))
}

/// Discrete track for a complete raw continuous track (`[len, dim]`).
pub fn inverse_fold(
    params: &ModelParams<f32>,
    scaler: &TokenScaler,
    struct_tokens: &[f32],
    opts: &SampleOptions,
) -> Result<Vec<TokenId>> {
    opts.validate()?;
    let cfg = params.config();
    let ds = cfg.struct_dim;
    if struct_tokens.is_empty() || !struct_tokens.len().is_multiple_of(ds) {
        return Err(Error::arg("continuous track must be a complete [len, dim] array"));
    }
    if struct_tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("continuous track contains non-finite values"));
    }
    let len = struct_tokens.len() / ds;
    check_length(params, len)?;
    let cv = Canvas {
        seq: vec![cfg.vocab().mask_id(); len],
        z: scaler.apply(struct_tokens),
        struct_mask: vec![false; len],
        seq_pending: vec![true; len],
        struct_pending: vec![false; len],
    };
    let steps = opts.lm_steps.unwrap_or(len as u32);
    let (cv, _) = run(params, opts, cv, steps)?;
    Ok(cv.seq)
}

/// Dispatches on `opts.mode`. Fold and inverse fold read their condition
/// from `condition`.
pub fn generate(
    params: &ModelParams<f32>,
    scaler: &TokenScaler,
    opts: &SampleOptions,
    condition: Option<&TrackPair>,
) -> Result<GenerationResult> {
    let ds = params.config().struct_dim;
    match opts.mode {
        SampleMode::CoGen => cogenerate(params, scaler, opts),
        SampleMode::Scaffold => scaffold(params, scaler, opts),
        SampleMode::Fold => {
            let c = condition.ok_or_else(|| Error::arg("fold needs an input sequence"))?;
            let z = fold(params, scaler, &c.seq, opts)?;
            Ok(GenerationResult { seq: c.seq.clone(), struct_tokens: z, dim: ds, trace: None })
        }
        SampleMode::InverseFold => {
            let c = condition.ok_or_else(|| Error::arg("inverse folding needs an input structure"))?;
            if c.struct_mask.iter().any(|&m| m) {
                return Err(Error::arg("inverse folding needs an unmasked structure track"));
            }
            let seq = inverse_fold(params, scaler, &c.struct_tokens, opts)?;
            Ok(GenerationResult { seq, struct_tokens: c.struct_tokens.clone(), dim: ds, trace: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelParams<f32>, TokenScaler) {
        let cfg = ModelConfig {
            d_hidden: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 24,
            vocab_size: 5,
            struct_dim: 3,
            denoiser_hidden: 16,
            denoiser_layers: 2,
            time_embed_dim: 8,
            ddpm_steps: 10,
        };
        (init_params(&cfg, 3).unwrap(), TokenScaler::with_scale(2.0).unwrap())
    }

    #[test]
    fn cfg_combine_cases() {
        assert_eq!(cfg_combine(&[0.1f64], &[0.3], 1.0), vec![0.3]);
        assert_eq!(cfg_combine(&[0.1f64], &[0.3], 0.0), vec![0.1]);
        assert!((cfg_combine(&[0.1f64], &[0.3], 2.0)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_sequence_token(&[1.0, 5.0, 2.0], 0.0, &mut rng).0, 1);
        assert_eq!(sample_sequence_token(&[3.0, 3.0, 2.0], 0.0, &mut rng).0, 0);
    }

    #[test]
    fn k_schedule_is_exhaustive() {
        for n in 0..40 {
            for steps in 1..=40u32 {
                let total: usize = (1..=steps).map(|j| k_schedule(n, steps, j)).sum();
                assert_eq!(total, n);
            }
        }
        assert!((1..=10).all(|j| k_schedule(10, 10, j) == 1));
    }

    #[test]
    fn topk_picks_largest() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = [(0, 0.1), (3, 0.9), (5, 0.5), (7, 0.9)];
        assert_eq!(select_unmask(UnmaskStrategy::TopK, &c, 2, &mut rng), vec![3, 7]);
        assert_eq!(select_unmask(UnmaskStrategy::TopK, &c, 9, &mut rng), vec![0, 3, 5, 7]);
        assert_eq!(select_unmask(UnmaskStrategy::Random, &c, 4, &mut rng), vec![0, 3, 5, 7]);
    }

    #[test]
    fn anti_repeat_breaks_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = 9;
        let seq = [2, 2, 2, 2, m, 1];
        let logits = [0.0, 0.0, 10.0, 0.0];
        assert_eq!(apply_anti_repeat(&seq, m, 4, 1, &logits, 1.0, 4, &mut rng), 1);
        let t = apply_anti_repeat(&seq, m, 4, 2, &logits, 1.0, 4, &mut rng);
        assert_ne!(t, 2);
        assert_eq!(apply_anti_repeat(&seq, m, 4, 2, &logits, 0.0, 5, &mut rng), 2);
    }

    #[test]
    fn cogeneration_completes() {
        let (p, s) = small();
        for (len, steps) in [(1, 1), (7, 3), (10, 10), (12, 5)] {
            let opts = SampleOptions { lm_steps: Some(steps), trace: true, ..SampleOptions::cogen(len, 4) };
            let out = cogenerate(&p, &s, &opts).unwrap();
            assert_eq!(out.len(), len);
            assert!(out.seq.iter().all(|&t| t < 5));
            assert!(out.struct_tokens.iter().all(|v| v.is_finite()));
            let tr = out.trace.unwrap();
            let n: usize = tr.iter().map(|t| t.seq_positions.len()).sum();
            assert_eq!(n, len);
        }
    }

    #[test]
    fn one_position_per_step_when_steps_equal_length() {
        let (p, s) = small();
        let opts = SampleOptions { trace: true, ..SampleOptions::cogen(10, 1) };
        let tr = cogenerate(&p, &s, &opts).unwrap().trace.unwrap();
        assert_eq!(tr.len(), 10);
        assert!(tr.iter().all(|t| t.seq_positions.len() == 1 && t.struct_positions.len() == 1));
    }

    #[test]
    fn fold_rejects_masks() {
        let (p, s) = small();
        assert!(fold(&p, &s, &[0, 5, 1], &SampleOptions::fold(3, 0)).is_err());
        assert!(fold(&p, &s, &[0, 4, 1], &SampleOptions::fold(3, 0)).is_ok());
    }

    #[test]
    fn whole_protein_motif_is_returned() {
        let (p, s) = small();
        let motif = Motif { positions: vec![0, 1, 2], seq: vec![1, 2, 3], struct_tokens: vec![0.5; 9] };
        let out = scaffold(&p, &s, &SampleOptions::scaffold(3, motif.clone(), 0)).unwrap();
        assert_eq!(out.seq, motif.seq);
        assert_eq!(out.struct_tokens, motif.struct_tokens);
        let bad = Motif { positions: vec![0, 0, 2], ..motif };
        assert!(scaffold(&p, &s, &SampleOptions::scaffold(3, bad, 0)).is_err());
    }
}
