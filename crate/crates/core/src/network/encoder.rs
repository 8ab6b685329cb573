use super::kernels::{
    affine, affine_backward, dot, layer_norm, layer_norm_backward, silu, silu_grad,
    sinusoidal_embedding, softmax_in_place, NormCache,
};
use super::{LayerSlots, ModelParams};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::token_space::TokenId;

/// One sample as seen by the network. Continuous tokens must already be
/// scaled; their content at masked positions is never read.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a, F> {
    pub seq: &'a [TokenId],
    pub struct_tokens: &'a [F],
    pub struct_mask: &'a [bool],
}

impl<F> EncoderInput<'_, F> {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

/// Per-position context vectors `[len, d_hidden]` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Context<F> {
    pub len: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> Context<F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch<F> {
    pub items: Vec<Context<F>>,
}

struct LayerCache<F> {
    a: Vec<F>,
    ln1: NormCache<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    b: Vec<F>,
    ln2: NormCache<F>,
    u: Vec<F>,
    act: Vec<F>,
}

pub(crate) struct EncoderCache<F> {
    len: usize,
    seq: Vec<TokenId>,
    struct_mask: Vec<bool>,
    struct_ln: NormCache<F>,
    struct_normed: Vec<F>,
    layers: Vec<LayerCache<F>>,
    final_ln: NormCache<F>,
    pub(crate) context: Context<F>,
}

fn check_input<F: Real>(params: &ModelParams<F>, input: &EncoderInput<'_, F>) -> Result<()> {
    let cfg = params.config();
    let len = input.len();
    if len == 0 {
        return Err(Error::arg("empty input track"));
    }
    if len > cfg.max_len {
        return Err(Error::Length { len, max_len: cfg.max_len });
    }
    if input.struct_mask.len() != len || input.struct_tokens.len() != len * cfg.struct_dim {
        return Err(Error::arg("misaligned encoder input tracks"));
    }
    if let Some(&bad) = input.seq.iter().find(|&&s| s as usize > cfg.vocab_size) {
        return Err(Error::arg(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let (ld, ll) = (d as isize, len as isize);
    let mut probs = vec![F::zero(); heads * len * len];
    let mut out = vec![F::zero(); len * d];
    for h in 0..heads {
        let off = h * hd;
        let p = &mut probs[h * len * len..(h + 1) * len * len];
        // scores = Q_h K_h^T
        F::gemm(len, hd, len, &q[off..], (ld, 1), &k[off..], (1, ld), F::zero(), p, ll);
        for row in p.chunks_mut(len) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(row);
        }
        F::gemm(len, len, hd, p, (ll, 1), &v[off..], (ld, 1), F::zero(), &mut out[off..], ld);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let (ld, ll) = (d as isize, len as isize);
    let mut dq = vec![F::zero(); len * d];
    let mut dk = vec![F::zero(); len * d];
    let mut dv = vec![F::zero(); len * d];
    let mut ds = vec![F::zero(); len * len];
    for h in 0..heads {
        let off = h * hd;
        let p = &probs[h * len * len..(h + 1) * len * len];
        // dV_h += P^T dO_h
        F::gemm(len, len, hd, p, (1, ll), &dout[off..], (ld, 1), F::one(), &mut dv[off..], ld);
        // dP = dO_h V_h^T, then through the softmax
        F::gemm(len, hd, len, &dout[off..], (ld, 1), &v[off..], (1, ld), F::zero(), &mut ds, ll);
        for (dr, pr) in ds.chunks_mut(len).zip(p.chunks(len)) {
            let inner = dot(dr, pr);
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - inner) * scale;
            }
        }
        F::gemm(len, len, hd, &ds, (ll, 1), &k[off..], (ld, 1), F::one(), &mut dq[off..], ld);
        F::gemm(len, len, hd, &ds, (1, ll), &q[off..], (ld, 1), F::one(), &mut dk[off..], ld);
    }
    (dq, dk, dv)
}

fn layer_forward<F: Real>(params: &ModelParams<F>, s: &LayerSlots, x: &[F], len: usize) -> (Vec<F>, LayerCache<F>) {
    let cfg = params.config();
    let d = cfg.d_hidden;
    let ff = cfg.ffn_hidden();
    let (a, ln1) = layer_norm(x, len, d, params.get(s.ln1_g), params.get(s.ln1_b));
    let q = affine(&a, len, d, params.get(s.wq), params.get(s.bq));
    let k = affine(&a, len, d, params.get(s.wk), params.get(s.bk));
    let v = affine(&a, len, d, params.get(s.wv), params.get(s.bv));
    let (attn, probs) = attention_forward(&q, &k, &v, len, d, cfg.n_heads);
    let o = affine(&attn, len, d, params.get(s.wo), params.get(s.bo));
    let h: Vec<F> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let (b, ln2) = layer_norm(&h, len, d, params.get(s.ln2_g), params.get(s.ln2_b));
    let u = affine(&b, len, d, params.get(s.w1), params.get(s.b1));
    let act: Vec<F> = u.iter().map(|&v| silu(v)).collect();
    let f = affine(&act, len, ff, params.get(s.w2), params.get(s.b2));
    let out: Vec<F> = h.iter().zip(&f).map(|(&a, &b)| a + b).collect();
    (out, LayerCache { a, ln1, q, k, v, probs, attn, b, ln2, u, act })
}

/// Returns `dx_in` given `dx_out`.
fn layer_backward<F: Real>(
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    s: &LayerSlots,
    c: &LayerCache<F>,
    dout: &[F],
    len: usize,
) -> Vec<F> {
    let cfg = params.config();
    let d = cfg.d_hidden;
    let ff = cfg.ffn_hidden();
    // residual: out = h + f
    let mut dh = dout.to_vec();
    let mut dact = vec![F::zero(); len * ff];
    {
        let (mut dw, mut db) = (vec![F::zero(); ff * d], vec![F::zero(); d]);
        affine_backward(&c.act, len, ff, params.get(s.w2), dout, d, &mut dw, &mut db, Some(&mut dact));
        add_into(grads.get_mut(s.w2), &dw);
        add_into(grads.get_mut(s.b2), &db);
    }
    let du: Vec<F> = dact.iter().zip(&c.u).map(|(&g, &u)| g * silu_grad(u)).collect();
    let mut db_norm = vec![F::zero(); len * d];
    {
        let (mut dw, mut db) = (vec![F::zero(); d * ff], vec![F::zero(); ff]);
        affine_backward(&c.b, len, d, params.get(s.w1), &du, ff, &mut dw, &mut db, Some(&mut db_norm));
        add_into(grads.get_mut(s.w1), &dw);
        add_into(grads.get_mut(s.b1), &db);
    }
    {
        let (mut dg, mut dbb) = (vec![F::zero(); d], vec![F::zero(); d]);
        layer_norm_backward(&c.ln2, len, d, params.get(s.ln2_g), &db_norm, &mut dg, &mut dbb, &mut dh);
        add_into(grads.get_mut(s.ln2_g), &dg);
        add_into(grads.get_mut(s.ln2_b), &dbb);
    }
    // h = x + attn Wo + bo
    let mut dx = dh.clone();
    let mut dattn = vec![F::zero(); len * d];
    {
        let (mut dw, mut db) = (vec![F::zero(); d * d], vec![F::zero(); d]);
        affine_backward(&c.attn, len, d, params.get(s.wo), &dh, d, &mut dw, &mut db, Some(&mut dattn));
        add_into(grads.get_mut(s.wo), &dw);
        add_into(grads.get_mut(s.bo), &db);
    }
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &dattn, len, d, cfg.n_heads);
    let mut da = vec![F::zero(); len * d];
    for (w, b, g) in [(s.wq, s.bq, &dq), (s.wk, s.bk, &dk), (s.wv, s.bv, &dv)] {
        let (mut dw, mut db) = (vec![F::zero(); d * d], vec![F::zero(); d]);
        affine_backward(&c.a, len, d, params.get(w), g, d, &mut dw, &mut db, Some(&mut da));
        add_into(grads.get_mut(w), &dw);
        add_into(grads.get_mut(b), &db);
    }
    {
        let (mut dg, mut dbb) = (vec![F::zero(); d], vec![F::zero(); d]);
        layer_norm_backward(&c.ln1, len, d, params.get(s.ln1_g), &da, &mut dg, &mut dbb, &mut dx);
        add_into(grads.get_mut(s.ln1_g), &dg);
        add_into(grads.get_mut(s.ln1_b), &dbb);
    }
    dx
}

pub(crate) fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn encode_with_cache<F: Real>(params: &ModelParams<F>, input: &EncoderInput<'_, F>) -> Result<EncoderCache<F>> {
    check_input(params, input)?;
    let cfg = params.config();
    let lay = params.layout();
    let (len, d, ds) = (input.len(), cfg.d_hidden, cfg.struct_dim);

    // continuous track: norm(z) W_in at real positions, the learned mask vector elsewhere
    let mut z = vec![F::zero(); len * ds];
    for i in 0..len {
        if !input.struct_mask[i] {
            z[i * ds..(i + 1) * ds].copy_from_slice(&input.struct_tokens[i * ds..(i + 1) * ds]);
        }
    }
    let (struct_normed, struct_ln) =
        layer_norm(&z, len, ds, params.get(lay.struct_norm_g), params.get(lay.struct_norm_b));
    let w_in = params.get(lay.struct_proj);
    let seq_embed = params.get(lay.seq_embed);
    let pos = params.get(lay.pos_embed);
    let mask_embed = params.get(lay.struct_mask_embed);
    let mut x = vec![F::zero(); len * d];
    for i in 0..len {
        let row = &mut x[i * d..(i + 1) * d];
        let tok = input.seq[i] as usize;
        for ((r, &e), &p) in row.iter_mut().zip(&seq_embed[tok * d..(tok + 1) * d]).zip(&pos[i * d..(i + 1) * d]) {
            *r = e + p;
        }
        if input.struct_mask[i] {
            for (r, &m) in row.iter_mut().zip(mask_embed) {
                *r += m;
            }
        } else {
            for (k, &zn) in struct_normed[i * ds..(i + 1) * ds].iter().enumerate() {
                for (r, &w) in row.iter_mut().zip(&w_in[k * d..(k + 1) * d]) {
                    *r += zn * w;
                }
            }
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for s in &lay.layers {
        let (out, cache) = layer_forward(params, s, &x, len);
        layers.push(cache);
        x = out;
    }
    let (c, final_ln) = layer_norm(&x, len, d, params.get(lay.final_g), params.get(lay.final_b));
    Ok(EncoderCache {
        len,
        seq: input.seq.to_vec(),
        struct_mask: input.struct_mask.to_vec(),
        struct_ln,
        struct_normed,
        layers,
        final_ln,
        context: Context { len, width: d, data: c },
    })
}

/// Accumulates parameter gradients given the gradient w.r.t. the context.
pub(crate) fn encode_backward<F: Real>(
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    cache: &EncoderCache<F>,
    dcontext: &[F],
) {
    let cfg = params.config();
    let lay = params.layout();
    let (len, d, ds) = (cache.len, cfg.d_hidden, cfg.struct_dim);
    let mut dx = vec![F::zero(); len * d];
    {
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        layer_norm_backward(&cache.final_ln, len, d, params.get(lay.final_g), dcontext, &mut dg, &mut db, &mut dx);
        add_into(grads.get_mut(lay.final_g), &dg);
        add_into(grads.get_mut(lay.final_b), &db);
    }
    for (s, c) in lay.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(params, grads, s, c, &dx, len);
    }
    // input fusion
    let mut dnormed = vec![F::zero(); len * ds];
    let w_in = params.get(lay.struct_proj).to_vec();
    for i in 0..len {
        let g = &dx[i * d..(i + 1) * d];
        let tok = cache.seq[i] as usize;
        add_into(&mut grads.get_mut(lay.seq_embed)[tok * d..(tok + 1) * d], g);
        add_into(&mut grads.get_mut(lay.pos_embed)[i * d..(i + 1) * d], g);
        if cache.struct_mask[i] {
            add_into(grads.get_mut(lay.struct_mask_embed), g);
        } else {
            let zn = &cache.struct_normed[i * ds..(i + 1) * ds];
            let dw = grads.get_mut(lay.struct_proj);
            for k in 0..ds {
                for (w, &gv) in dw[k * d..(k + 1) * d].iter_mut().zip(g) {
                    *w += zn[k] * gv;
                }
                dnormed[i * ds + k] = dot(&w_in[k * d..(k + 1) * d], g);
            }
        }
    }
    let (mut dg, mut db) = (vec![F::zero(); ds], vec![F::zero(); ds]);
    let mut dz = vec![F::zero(); len * ds];
    layer_norm_backward(&cache.struct_ln, len, ds, params.get(lay.struct_norm_g), &dnormed, &mut dg, &mut db, &mut dz);
    add_into(grads.get_mut(lay.struct_norm_g), &dg);
    add_into(grads.get_mut(lay.struct_norm_b), &db);
}

/// Runs the fused input through the backbone and returns the context of every sample.
pub fn fuse_and_encode<F: Real>(params: &ModelParams<F>, inputs: &[EncoderInput<'_, F>]) -> Result<ContextBatch<F>> {
    let items = inputs
        .iter()
        .map(|inp| encode_with_cache(params, inp).map(|c| c.context))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContextBatch { items })
}

/// Logits over the real alphabet (the mask symbol is never predicted).
pub fn categorical_head<F: Real>(params: &ModelParams<F>, c: &[F]) -> Vec<F> {
    let lay = params.layout();
    affine(c, 1, params.config().d_hidden, params.get(lay.proj_w), params.get(lay.proj_b))
}

pub(crate) struct DenoiserCache<F> {
    /// Input of every affine map; `inputs[0]` is the concatenated input.
    inputs: Vec<Vec<F>>,
    /// Pre-activations of every hidden map.
    pre: Vec<Vec<F>>,
    pub(crate) out: Vec<F>,
}

pub(crate) fn denoiser_input<F: Real>(params: &ModelParams<F>, z_noisy: &[F], t_prime: u32, c: &[F]) -> Vec<F> {
    let cfg = params.config();
    let mut input = Vec::with_capacity(cfg.denoiser_input());
    input.extend_from_slice(z_noisy);
    input.extend(sinusoidal_embedding::<F>(t_prime, cfg.time_embed_dim));
    input.extend_from_slice(c);
    input
}

/// Runs `rows` stacked denoiser inputs through the MLP.
pub(crate) fn denoiser_forward<F: Real>(params: &ModelParams<F>, input: Vec<F>, rows: usize) -> DenoiserCache<F> {
    let slots = &params.layout().denoiser;
    let n = slots.weights.len();
    let mut inputs = vec![input];
    let mut pre = Vec::with_capacity(n - 1);
    for k in 0..n {
        let w = slots.weights[k];
        let y = affine(&inputs[k], rows, w.rows, params.get(w), params.get(slots.biases[k]));
        if k + 1 == n {
            return DenoiserCache { inputs, pre, out: y };
        }
        inputs.push(y.iter().map(|&v| silu(v)).collect());
        pre.push(y);
    }
    unreachable!("denoiser has at least one layer")
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the stacked inputs.
pub(crate) fn denoiser_backward<F: Real>(
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    cache: &DenoiserCache<F>,
    dout: &[F],
    rows: usize,
) -> Vec<F> {
    let slots = &params.layout().denoiser;
    let n = slots.weights.len();
    let mut g = dout.to_vec();
    for k in (0..n).rev() {
        let w = slots.weights[k];
        if k + 1 < n {
            for (gv, &p) in g.iter_mut().zip(&cache.pre[k]) {
                *gv *= silu_grad(p);
            }
        }
        let mut dx = vec![F::zero(); rows * w.rows];
        let (mut dw, mut db) = (vec![F::zero(); w.len()], vec![F::zero(); w.cols]);
        affine_backward(&cache.inputs[k], rows, w.rows, params.get(w), &g, w.cols, &mut dw, &mut db, Some(&mut dx));
        add_into(grads.get_mut(w), &dw);
        add_into(grads.get_mut(slots.biases[k]), &db);
        g = dx;
    }
    g
}

/// Predicts the noise in `z_noisy` at DDPM step `t_prime` given context `c`.
pub fn denoise_head<F: Real>(params: &ModelParams<F>, z_noisy: &[F], t_prime: u32, c: &[F]) -> Result<Vec<F>> {
    let cfg = params.config();
    if t_prime == 0 || t_prime > cfg.ddpm_steps {
        return Err(Error::arg(format!("DDPM step {t_prime} outside [1, {}]", cfg.ddpm_steps)));
    }
    if z_noisy.len() != cfg.struct_dim || c.len() != cfg.d_hidden {
        return Err(Error::arg("denoiser input has the wrong shape"));
    }
    Ok(denoiser_forward(params, denoiser_input(params, z_noisy, t_prime, c), 1).out)
}
