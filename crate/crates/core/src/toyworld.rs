//! Synthetic joint law over (discrete, continuous) tracks with exact oracles.
//!
//! The discrete track is a stationary first-order Markov chain. The
//! continuous token at position `i` is a fixed mean vector looked up from
//! the window `(s[i-1], s[i], s[i+1])` plus isotropic Gaussian noise;
//! out-of-range neighbours use a reserved edge index.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::token_space::{TokenId, TrackPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub struct_dim: usize,
    pub noise_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { seed: 2024, vocab_size: 8, struct_dim: 4, noise_sigma: 0.1 }
    }
}

/// Size and seed of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_samples: 20_000, min_len: 16, max_len: 64, seed: 1 }
    }
}

/// Clean samples together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub world: WorldConfig,
    pub config: DatasetConfig,
    pub samples: Vec<TrackPair>,
}

pub fn gen_toy_dataset(world_cfg: &WorldConfig, cfg: &DatasetConfig) -> Result<ToyDataset> {
    let world = gen_world_from(world_cfg)?;
    let samples = gen_dataset(&world, cfg.n_samples, cfg.min_len, cfg.max_len, cfg.seed)?;
    Ok(ToyDataset { world: world_cfg.clone(), config: cfg.clone(), samples })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    /// Row-stochastic `[V, V]`.
    pub transition: Vec<f64>,
    /// Stationary distribution of `transition`; also the initial law.
    pub initial: Vec<f64>,
    /// `[(V+1)^3, dim]` means indexed by `(left, centre, right)`, edge = V.
    pub emission: Vec<f64>,
    pub noise_sigma: f64,
}

pub fn gen_world(seed: u64, vocab_size: usize, dim: usize, noise_sigma: f64) -> Result<ToyWorld> {
    if vocab_size < 2 {
        return Err(Error::arg("toy world needs V >= 2"));
    }
    if dim == 0 {
        return Err(Error::arg("toy world needs d_struct >= 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::arg(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let v = vocab_size;
    let mut rng = substream(seed, Stream::World, 0, 0);
    let mut transition = vec![0.0; v * v];
    for row in transition.chunks_mut(v) {
        // symmetric Dirichlet(1): normalized unit exponentials
        for x in row.iter_mut() {
            *x = Exp1.sample(&mut rng);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    let mut rng = substream(seed, Stream::World, 1, 0);
    let edge = v + 1;
    let emission = (0..edge * edge * edge * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let initial = power_stationary(&transition, v);
    Ok(ToyWorld { seed, vocab_size, dim, transition, initial, emission, noise_sigma })
}

pub fn gen_world_from(cfg: &WorldConfig) -> Result<ToyWorld> {
    gen_world(cfg.seed, cfg.vocab_size, cfg.struct_dim, cfg.noise_sigma)
}

fn power_stationary(p: &[f64], v: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..10_000 {
        let mut next = vec![0.0; v];
        for a in 0..v {
            for b in 0..v {
                next[b] += pi[a] * p[a * v + b];
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

impl ToyWorld {
    pub fn edge(&self) -> usize {
        self.vocab_size
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.vocab_size + to]
    }

    /// Window indices `(left, centre, right)` at position `i`.
    pub fn window(&self, seq: &[TokenId], i: usize) -> (usize, usize, usize) {
        let left = if i == 0 { self.edge() } else { seq[i - 1] as usize };
        let right = if i + 1 == seq.len() { self.edge() } else { seq[i + 1] as usize };
        (left, seq[i] as usize, right)
    }

    pub fn emission_mean(&self, left: usize, centre: usize, right: usize) -> &[f64] {
        let e = self.vocab_size + 1;
        let k = (left * e + centre) * e + right;
        &self.emission[k * self.dim..(k + 1) * self.dim]
    }

    /// Bayes floor of per-position RMS error, `sigma * sqrt(dim)`.
    pub fn noise_floor(&self) -> f64 {
        self.noise_sigma * (self.dim as f64).sqrt()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.initial
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

pub fn sample_sequence<R: Rng + ?Sized>(world: &ToyWorld, len: usize, rng: &mut R) -> Vec<TokenId> {
    let v = world.vocab_size;
    let mut seq = Vec::with_capacity(len);
    let mut s = draw_categorical(&world.initial, rng);
    seq.push(s as TokenId);
    for _ in 1..len {
        s = draw_categorical(&world.transition[s * v..(s + 1) * v], rng);
        seq.push(s as TokenId);
    }
    seq
}

pub fn sample_protein<R: Rng + ?Sized>(world: &ToyWorld, len: usize, rng: &mut R) -> Result<TrackPair> {
    if len == 0 {
        return Err(Error::arg("sample length must be >= 1"));
    }
    let seq = sample_sequence(world, len, rng);
    let mut tokens = Vec::with_capacity(len * world.dim);
    for i in 0..len {
        let (a, b, c) = world.window(&seq, i);
        for &m in world.emission_mean(a, b, c) {
            let noise: f64 = StandardNormal.sample(rng);
            tokens.push((m + world.noise_sigma * noise) as f32);
        }
    }
    TrackPair::clean(seq, tokens, world.dim)
}

/// `n` samples with lengths uniform in `[min_len, max_len]`; sample `k`
/// draws from its own substream so any prefix is reproducible.
pub fn gen_dataset(world: &ToyWorld, n: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<TrackPair>> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::arg(format!("invalid length range [{min_len}, {max_len}]")));
    }
    (0..n)
        .map(|k| {
            let mut rng = substream(seed, Stream::Data, world.seed, k as u64);
            let len = rng.gen_range(min_len..=max_len);
            sample_protein(world, len, &mut rng)
        })
        .collect()
}

/// `E[z | s]`: the emission mean of every window, row-major `[len, dim]`.
pub fn oracle_fold(world: &ToyWorld, seq: &[TokenId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq.len() * world.dim);
    for i in 0..seq.len() {
        let (a, b, c) = world.window(seq, i);
        out.extend_from_slice(world.emission_mean(a, b, c));
    }
    out
}

/// Unnormalized log joint density `log p(s) + log p(z | s)` (up to constants).
pub fn log_joint(world: &ToyWorld, seq: &[TokenId], z: &[f64]) -> f64 {
    let mut lp = world.initial[seq[0] as usize].ln();
    for w in seq.windows(2) {
        lp += world.transition_prob(w[0] as usize, w[1] as usize).ln();
    }
    let inv = emission_precision(world);
    for i in 0..seq.len() {
        let (a, b, c) = world.window(seq, i);
        lp -= inv * sq_dist(world.emission_mean(a, b, c), &z[i * world.dim..(i + 1) * world.dim]);
    }
    lp
}

fn emission_precision(world: &ToyWorld) -> f64 {
    // sigma = 0 degenerates to nearest-mean matching
    1.0 / (2.0 * (world.noise_sigma * world.noise_sigma).max(1e-200))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact MAP discrete track given a complete continuous track (`[len, dim]`).
///
/// Dynamic programming over consecutive token pairs, since each emission
/// depends on a three-token window.
pub fn oracle_inverse_fold(world: &ToyWorld, z: &[f64]) -> Result<Vec<TokenId>> {
    let dim = world.dim;
    if z.is_empty() || !z.len().is_multiple_of(dim) {
        return Err(Error::arg("continuous track must be a non-empty [len, dim] array"));
    }
    let len = z.len() / dim;
    let v = world.vocab_size;
    let e = world.edge();
    let inv = emission_precision(world);
    let emit = |i: usize, a: usize, b: usize, c: usize| -> f64 {
        -inv * sq_dist(world.emission_mean(a, b, c), &z[i * dim..(i + 1) * dim])
    };
    let log_init: Vec<f64> = world.initial.iter().map(|p| p.ln()).collect();
    let log_trans: Vec<f64> = world.transition.iter().map(|p| p.ln()).collect();

    if len == 1 {
        let best = (0..v)
            .map(|a| (a, log_init[a] + emit(0, e, a, e)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        return Ok(vec![best.0 as TokenId]);
    }

    // score[(a, b)] = best log-prob of s[..=i] ending with (s[i-1], s[i]) = (a, b),
    // with emissions accounted up to position i-1.
    let mut score = vec![f64::NEG_INFINITY; v * v];
    for a in 0..v {
        for b in 0..v {
            score[a * v + b] = log_init[a] + log_trans[a * v + b] + emit(0, e, a, b);
        }
    }
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(len - 2);
    for i in 2..len {
        let mut next = vec![f64::NEG_INFINITY; v * v];
        let mut ptr = vec![0usize; v * v];
        for b in 0..v {
            for c in 0..v {
                let mut best = (0, f64::NEG_INFINITY);
                for a in 0..v {
                    let s = score[a * v + b] + emit(i - 1, a, b, c);
                    if s > best.1 {
                        best = (a, s);
                    }
                }
                next[b * v + c] = best.1 + log_trans[b * v + c];
                ptr[b * v + c] = best.0;
            }
        }
        score = next;
        back.push(ptr);
    }
    let mut best = (0, 0, f64::NEG_INFINITY);
    for a in 0..v {
        for b in 0..v {
            let s = score[a * v + b] + emit(len - 1, a, b, e);
            if s > best.2 {
                best = (a, b, s);
            }
        }
    }
    let mut seq = vec![0 as TokenId; len];
    seq[len - 2] = best.0 as TokenId;
    seq[len - 1] = best.1 as TokenId;
    for i in (2..len).rev() {
        let (b, c) = (seq[i - 1] as usize, seq[i] as usize);
        seq[i - 2] = back[i - 2][b * v + c] as TokenId;
    }
    Ok(seq)
}

/// RMS over positions of the distance between `z` and `oracle_fold(seq)`.
pub fn self_consistency(world: &ToyWorld, seq: &[TokenId], z: &[f64]) -> Result<f64> {
    if seq.is_empty() || z.len() != seq.len() * world.dim {
        return Err(Error::arg("tracks must be complete and aligned"));
    }
    let mean = oracle_fold(world, seq);
    Ok((sq_dist(&mean, z) / seq.len() as f64).sqrt())
}

pub fn to_f64(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| v as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(5, 8, 4, 0.1).unwrap();
        let b = gen_world(5, 8, 4, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.emission, gen_world(6, 8, 4, 0.1).unwrap().emission);
        assert!(gen_world(5, 1, 4, 0.1).is_err());
    }

    #[test]
    fn rows_are_stochastic() {
        let w = gen_world(1, 8, 4, 0.1).unwrap();
        for row in w.transition.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        assert!((w.initial.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_samples_equal_emission_means() {
        let w = gen_world(2, 5, 3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_protein(&w, 20, &mut rng).unwrap();
        let means = oracle_fold(&w, &p.seq);
        for (a, b) in p.struct_tokens.iter().zip(&means) {
            assert_eq!(*a, *b as f32);
        }
        assert!(self_consistency(&w, &p.seq, &to_f64(&p.struct_tokens)).unwrap() < 1e-6);
    }

    #[test]
    fn oracle_fold_is_pure() {
        let w = gen_world(2, 5, 3, 0.1).unwrap();
        let seq = vec![0, 4, 2, 2, 1];
        assert_eq!(oracle_fold(&w, &seq), oracle_fold(&w, &seq));
        assert_eq!(self_consistency(&w, &seq, &oracle_fold(&w, &seq)).unwrap(), 0.0);
    }

    #[test]
    fn single_position_inverse_fold() {
        let w = gen_world(3, 4, 2, 0.1).unwrap();
        let z = w.emission_mean(w.edge(), 2, w.edge()).to_vec();
        assert_eq!(oracle_inverse_fold(&w, &z).unwrap(), vec![2]);
    }

    #[test]
    fn dataset_is_reproducible() {
        let w = gen_world(4, 8, 4, 0.1).unwrap();
        let a = gen_dataset(&w, 20, 16, 64, 9).unwrap();
        let b = gen_dataset(&w, 30, 16, 64, 9).unwrap();
        assert_eq!(a[..], b[..20]);
        assert!(a.iter().all(|p| (16..=64).contains(&p.len())));
    }
}
