use super::encoder::{add_into, denoiser_backward, denoiser_forward, denoiser_input, encode_backward, encode_with_cache};
use super::kernels::{affine_backward, softmax_in_place};
use super::{categorical_head, EncoderInput, ModelParams};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedules::DdpmSchedule;
use crate::token_space::TokenId;

/// One `(t', eps)` draw for a structure-masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw<F> {
    pub position: usize,
    pub t_prime: u32,
    pub eps: Vec<F>,
}

/// A corrupted training sample with everything the loss needs.
#[derive(Clone, Debug)]
pub struct TrainExample<F> {
    /// Network input: clean tokens with `mask_id` at corrupted positions.
    pub seq_input: Vec<TokenId>,
    pub seq_target: Vec<TokenId>,
    /// Clean scaled continuous tokens `[len, dim]`; read as the diffusion
    /// target at masked positions and as input elsewhere.
    pub struct_clean: Vec<F>,
    pub struct_mask: Vec<bool>,
    /// Sequence loss weight for this sample; `None` excludes the track.
    pub seq_weight: Option<f64>,
    /// Structure loss weight for this sample; `None` excludes the track.
    pub struct_weight: Option<f64>,
    pub draws: Vec<DiffusionDraw<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub seq: f64,
    pub structure: f64,
    /// Samples whose structure loss was evaluated.
    pub struct_samples: usize,
    pub seq_samples: usize,
}

/// Loss `L_struct + gamma * L_seq` (batch mean) and its exact gradient.
pub fn forward_backward<F: Real>(
    params: &ModelParams<F>,
    batch: &[TrainExample<F>],
    spec: &LossSpec,
    sched: &DdpmSchedule,
) -> Result<(LossBreakdown, ModelParams<F>)> {
    let mut grads = params.zeros_like();
    let mut out = LossBreakdown::default();
    if batch.is_empty() {
        return Ok((out, grads));
    }
    let cfg = params.config();
    let (d, ds, v) = (cfg.d_hidden, cfg.struct_dim, cfg.vocab_size);
    let mask_id = v as TokenId;
    let inv_b = 1.0 / batch.len() as f64;
    let lay = params.layout().clone();

    for ex in batch {
        let seq_positions: Vec<usize> = match ex.seq_weight {
            Some(_) => (0..ex.seq_input.len()).filter(|&i| ex.seq_input[i] == mask_id).collect(),
            None => Vec::new(),
        };
        let draws: &[DiffusionDraw<F>] = if ex.struct_weight.is_some() { &ex.draws } else { &[] };
        if seq_positions.is_empty() && draws.is_empty() {
            continue;
        }
        let input = EncoderInput { seq: &ex.seq_input, struct_tokens: &ex.struct_clean, struct_mask: &ex.struct_mask };
        let cache = encode_with_cache(params, &input)?;
        let ctx = &cache.context;
        let mut dctx = vec![F::zero(); ctx.data.len()];

        if !seq_positions.is_empty() {
            out.seq_samples += 1;
            let lam = ex.seq_weight.unwrap_or(0.0);
            let w = F::lit(spec.gamma * lam * inv_b);
            let mut nll_sum = 0.0;
            for &i in &seq_positions {
                let target = ex.seq_target[i] as usize;
                let c = ctx.row(i);
                let mut p = categorical_head(params, c);
                softmax_in_place(&mut p);
                nll_sum -= p[target].as_f64().ln();
                p[target] -= F::one();
                for g in p.iter_mut() {
                    *g *= w;
                }
                let mut dc = vec![F::zero(); d];
                let (mut dw, mut db) = (vec![F::zero(); d * v], vec![F::zero(); v]);
                affine_backward(c, 1, d, params.get(lay.proj_w), &p, v, &mut dw, &mut db, Some(&mut dc));
                add_into(grads.get_mut(lay.proj_w), &dw);
                add_into(grads.get_mut(lay.proj_b), &db);
                add_into(&mut dctx[i * d..(i + 1) * d], &dc);
            }
            out.seq += lam * nll_sum * inv_b;
        }

        if !draws.is_empty() {
            out.struct_samples += 1;
            let lam = ex.struct_weight.unwrap_or(0.0);
            let w = F::lit(2.0 * lam * inv_b);
            let mut sq_sum = 0.0;
            let rows = draws.len();
            let width = cfg.denoiser_input();
            let mut stacked = Vec::with_capacity(rows * width);
            for dr in draws {
                let i = dr.position;
                if !ex.struct_mask[i] {
                    return Err(Error::arg(format!("diffusion draw at unmasked position {i}")));
                }
                let ab = sched.alpha_bar_at(dr.t_prime)?;
                let (sa, sb) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
                let z0 = &ex.struct_clean[i * ds..(i + 1) * ds];
                let noisy: Vec<F> = z0.iter().zip(&dr.eps).map(|(&z, &e)| sa * z + sb * e).collect();
                stacked.extend(denoiser_input(params, &noisy, dr.t_prime, ctx.row(i)));
            }
            let dcache = denoiser_forward(params, stacked, rows);
            let mut dout = vec![F::zero(); rows * ds];
            for (r, dr) in draws.iter().enumerate() {
                for k in 0..ds {
                    let res = dcache.out[r * ds + k] - dr.eps[k];
                    sq_sum += res.as_f64() * res.as_f64();
                    dout[r * ds + k] = w * res;
                }
            }
            let din = denoiser_backward(params, &mut grads, &dcache, &dout, rows);
            for (r, dr) in draws.iter().enumerate() {
                let i = dr.position;
                add_into(&mut dctx[i * d..(i + 1) * d], &din[r * width + ds + cfg.time_embed_dim..(r + 1) * width]);
            }
            out.structure += lam * sq_sum * inv_b;
        }

        encode_backward(params, &mut grads, &cache, &dctx);
    }

    out.total = out.structure + spec.gamma * out.seq;
    if !out.total.is_finite() {
        return Err(Error::Training { step: 0, reason: format!("non-finite loss {out:?}") });
    }
    Ok((out, grads))
}
