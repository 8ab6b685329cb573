//! Standalone evaluations of the two loss terms. Training itself uses the
//! fused `network::forward_backward`; these exist for inspection and testing.

use crate::error::{Error, Result};
use crate::network::{denoise_head, fuse_and_encode, EncoderInput, ModelParams, TrainExample};
use crate::real::Real;
use crate::schedules::{seq_reweight, DdpmSchedule};
use crate::token_space::TokenId;

/// Logits and targets of one sample for [`loss_seq`].
#[derive(Clone, Copy, Debug)]
pub struct SeqLossItem<'a> {
    /// `[len, V]` row-major.
    pub logits: &'a [f64],
    pub targets: &'a [TokenId],
    pub masked: &'a [bool],
    pub t_s: u32,
}

/// Batch mean of `lambda(t_s) * sum over masked i of -log softmax(logits_i)[target_i]`.
pub fn loss_seq(items: &[SeqLossItem<'_>], vocab_size: usize, total: u32) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for it in items {
        let len = it.targets.len();
        if it.masked.len() != len || it.logits.len() != len * vocab_size {
            return Err(Error::arg("logits, targets and mask disagree in shape"));
        }
        let lam = seq_reweight(it.t_s, total)?;
        let mut nll = 0.0;
        for i in (0..len).filter(|&i| it.masked[i]) {
            let row = &it.logits[i * vocab_size..(i + 1) * vocab_size];
            let target = it.targets[i] as usize;
            if target >= vocab_size {
                return Err(Error::arg(format!("target {target} out of vocabulary")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[target];
        }
        acc += lam * nll;
    }
    Ok(acc / items.len() as f64)
}

/// Structure term with a caller-supplied denoiser
/// `(sample, position, noisy token, t') -> predicted noise`.
pub fn loss_struct_with<F, D>(batch: &[TrainExample<F>], sched: &DdpmSchedule, mut denoise: D) -> Result<f64>
where
    F: Real,
    D: FnMut(usize, usize, &[F], u32) -> Result<Vec<F>>,
{
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (k, ex) in batch.iter().enumerate() {
        let Some(lam) = ex.struct_weight else { continue };
        let ds = ex.struct_clean.len() / ex.struct_mask.len().max(1);
        let mut sq = 0.0;
        for dr in &ex.draws {
            let i = dr.position;
            let ab = sched.alpha_bar_at(dr.t_prime)?;
            let (sa, sb) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
            let noisy: Vec<F> = ex.struct_clean[i * ds..(i + 1) * ds]
                .iter()
                .zip(&dr.eps)
                .map(|(&z, &e)| sa * z + sb * e)
                .collect();
            let pred = denoise(k, i, &noisy, dr.t_prime)?;
            sq += pred.iter().zip(&dr.eps).map(|(&p, &e)| (p - e).as_f64().powi(2)).sum::<f64>();
        }
        acc += lam * sq;
    }
    Ok(acc / batch.len() as f64)
}

/// Structure term evaluated through the network.
pub fn loss_struct<F: Real>(params: &ModelParams<F>, batch: &[TrainExample<F>], sched: &DdpmSchedule) -> Result<f64> {
    let inputs: Vec<EncoderInput<'_, F>> = batch
        .iter()
        .map(|ex| EncoderInput { seq: &ex.seq_input, struct_tokens: &ex.struct_clean, struct_mask: &ex.struct_mask })
        .collect();
    let ctx = fuse_and_encode(params, &inputs)?;
    loss_struct_with(batch, sched, |k, i, noisy, t| denoise_head(params, noisy, t, ctx.items[k].row(i)))
}

/// `l_struct + gamma * l_seq`.
pub fn total_loss(l_struct: f64, l_seq: f64, gamma: f64) -> f64 {
    l_struct + gamma * l_seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DiffusionDraw;
    use crate::schedules::make_ddpm_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = vec![0.3; 5 * 8];
        let targets = [1, 2, 3, 4, 5];
        let masked = [true, false, true, true, false];
        let item = SeqLossItem { logits: &logits, targets: &targets, masked: &masked, t_s: 1 };
        let l = loss_seq(&[item], 8, 10).unwrap();
        assert!((l - 3.0 * 8f64.ln()).abs() < 1e-12);
        let late = SeqLossItem { t_s: 10, ..item };
        let l10 = loss_seq(&[late], 8, 10).unwrap();
        assert!((l10 - l / 10.0).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = vec![0.0; 4];
            logits[2] = margin;
            let item = SeqLossItem { logits: &logits, targets: &[2], masked: &[true], t_s: 1 };
            let l = loss_seq(&[item], 4, 4).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn no_masks_no_loss() {
        let item = SeqLossItem { logits: &[0.0; 4], targets: &[0, 1], masked: &[false, false], t_s: 2 };
        assert_eq!(loss_seq(&[item], 2, 4).unwrap(), 0.0);
        assert_eq!(loss_seq(&[], 2, 4).unwrap(), 0.0);
    }

    fn stub_batch(n: usize, seed: u64) -> Vec<TrainExample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = 10;
                let draws = (0..len)
                    .map(|i| DiffusionDraw {
                        position: i,
                        t_prime: 1 + (i as u32 % 50),
                        eps: crate::schedules::standard_normal_vec(&mut rng, 3),
                    })
                    .collect();
                TrainExample {
                    seq_input: vec![0; len],
                    seq_target: vec![0; len],
                    struct_clean: crate::schedules::standard_normal_vec(&mut rng, len * 3),
                    struct_mask: vec![true; len],
                    seq_weight: None,
                    struct_weight: Some(1.0),
                    draws,
                }
            })
            .collect()
    }

    #[test]
    fn exact_denoiser_has_zero_loss() {
        let sched = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let batch = stub_batch(4, 1);
        let l = loss_struct_with(&batch, &sched, |k, i, _, _| {
            Ok(batch[k].draws.iter().find(|d| d.position == i).unwrap().eps.clone())
        })
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_denoiser_loss_is_dim_per_position() {
        let sched = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let batch = stub_batch(1000, 2);
        let l = loss_struct_with(&batch, &sched, |_, _, z, _| Ok(vec![0.0; z.len()])).unwrap();
        // 10 positions of dimension 3 per sample, 10^4 draws in total
        assert!((l / 30.0 - 1.0).abs() < 0.05, "{l}");
    }

    #[test]
    fn total_loss_mixes() {
        assert!((total_loss(1.0, 2.0, 0.2) - 1.4).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.0, 0.2), 0.7);
    }
}
