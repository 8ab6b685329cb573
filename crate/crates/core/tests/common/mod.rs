#![allow(dead_code)]

use hybrid_diffusion::network::{DiffusionDraw, ModelConfig, TrainExample};
use hybrid_diffusion::token_space::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_hidden: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 6,
        vocab_size: 4,
        struct_dim: 3,
        denoiser_hidden: 10,
        denoiser_layers: 3,
        time_embed_dim: 4,
        ddpm_steps: 20,
    }
}

/// A random corrupted batch where each sample has both losses active.
pub fn random_batch(cfg: &ModelConfig, seed: u64, n: usize, len: usize) -> Vec<TrainExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = cfg.vocab_size;
    (0..n)
        .map(|_| {
            let seq_target: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..v) as TokenId).collect();
            let seq_mask: Vec<bool> = (0..len).map(|i| i % 2 == 0 || rng.gen_bool(0.3)).collect();
            let seq_input = seq_target
                .iter()
                .zip(&seq_mask)
                .map(|(&s, &m)| if m { v as TokenId } else { s })
                .collect();
            let struct_clean: Vec<f64> =
                (0..len * cfg.struct_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let struct_mask: Vec<bool> = (0..len).map(|i| i % 2 == 1 || rng.gen_bool(0.3)).collect();
            let draws = (0..len)
                .filter(|&i| struct_mask[i])
                .map(|i| DiffusionDraw {
                    position: i,
                    t_prime: rng.gen_range(1..=cfg.ddpm_steps),
                    eps: (0..cfg.struct_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                })
                .collect();
            TrainExample {
                seq_input,
                seq_target,
                struct_clean,
                struct_mask,
                seq_weight: Some(rng.gen_range(0.1..1.0)),
                struct_weight: Some(1.0),
                draws,
            }
        })
        .collect()
}

/// Independent MAP decoder: scores every one of the `V^L` sequences.
pub fn brute_force_inverse_fold(world: &hybrid_diffusion::toyworld::ToyWorld, z: &[f64]) -> Vec<TokenId> {
    let v = world.vocab_size;
    let dim = world.dim;
    let len = z.len() / dim;
    let edge = v;
    let e = v + 1;
    let s2 = world.noise_sigma * world.noise_sigma;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let total = v.pow(len as u32);
    for code in 0..total {
        let mut seq = vec![0usize; len];
        let mut c = code;
        for slot in seq.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        let mut score = world.initial[seq[0]].ln();
        for i in 1..len {
            score += world.transition[seq[i - 1] * v + seq[i]].ln();
        }
        for i in 0..len {
            let l = if i == 0 { edge } else { seq[i - 1] };
            let r = if i + 1 == len { edge } else { seq[i + 1] };
            let k = (l * e + seq[i]) * e + r;
            let mean = &world.emission[k * dim..(k + 1) * dim];
            let d2: f64 = (0..dim).map(|j| (z[i * dim + j] - mean[j]).powi(2)).sum();
            score -= d2 / (2.0 * s2);
        }
        if score > best.0 {
            best = (score, seq);
        }
    }
    best.1.into_iter().map(|s| s as TokenId).collect()
}

/// Exhaustive comparison grid: `(V, L)` pairs with `V^L <= 4096`.
pub fn inverse_fold_grid() -> Vec<(usize, usize)> {
    let mut grid: Vec<(usize, usize)> = (1..=12).map(|l| (2, l)).collect();
    grid.extend((1..=6).map(|l| (4, l)));
    grid.extend((1..=7).map(|l| (3, l)));
    grid
}
