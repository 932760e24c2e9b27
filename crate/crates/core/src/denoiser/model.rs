//! Forward pass with optional K/V hooks, and the matching reverse pass used
//! for training. The reverse pass only supports the plain (non-injected)
//! network, which is all training needs.

use super::params::{BlockSlots, Layout};
use super::{embed_timestep, DenoiserConfig, ForwardOptions, ForwardOutput, KvRecord, LayerMass};
use crate::attention::{self, AttentionInputs, AttentionMode, InjectionContext};
use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place};
use crate::numerics::Tensor;

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = s;
        for j in 0..d {
            let h = (row[j] - mu) * s;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, inv })
}

fn layer_norm_backward(
    dy: &[f64],
    c: &LnCache,
    n: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for j in 0..d {
            let k = i * d + j;
            dg[j] += dy[k] * c.xhat[k];
            db[j] += dy[k];
            dxhat[j] = dy[k] * g[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * c.xhat[k];
        }
        let s = c.inv[i] / d as f64;
        for j in 0..d {
            let k = i * d + j;
            dx[k] = s * (d as f64 * dxhat[j] - sum - c.xhat[k] * sum_xh);
        }
    }
    dx
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_nn(a, b, m, k, n, &mut out);
    out
}

fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn head_block(x: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for i in 0..rows {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dh: usize) {
    for i in 0..rows {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Cached activations of one multi-head attention sublayer.
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per-head probabilities, `n_q × n_k` each. Empty when not caching.
    probs: Vec<Vec<f64>>,
    out: Vec<f64>,
}

/// Plain multi-head attention of `q: nq×D` over `k, v: nk×D`.
fn mha(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, heads: usize, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut probs = Vec::new();
    for h in 0..heads {
        let qh = head_block(q, nq, d, h, dh);
        let kh = head_block(k, nk, d, h, dh);
        let vh = head_block(v, nk, d, h, dh);
        let mut p = vec![0.0; nq * nk];
        gemm_nt(&qh, &kh, nq, dh, nk, &mut p);
        for row in p.chunks_mut(nk) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(row);
        }
        let o = matmul(&p, &vh, nq, nk, dh);
        scatter_head(&mut out, &o, nq, d, h, dh);
        if keep {
            probs.push(p);
        }
    }
    (out, probs)
}

/// Gradients of plain multi-head attention with respect to q, k and v.
fn mha_backward(
    c: &AttnCache,
    d_out: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    for h in 0..heads {
        let p = &c.probs[h];
        let qh = head_block(&c.q, nq, d, h, dh);
        let kh = head_block(&c.k, nk, d, h, dh);
        let vh = head_block(&c.v, nk, d, h, dh);
        let doh = head_block(d_out, nq, d, h, dh);
        let mut dvh = vec![0.0; nk * dh];
        gemm_tn(p, &doh, nk, nq, dh, &mut dvh);
        let mut dp = vec![0.0; nq * nk];
        gemm_nt(&doh, &vh, nq, dh, nk, &mut dp);
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut dp[i * nk..(i + 1) * nk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        let dqh = matmul(&dp, &kh, nq, nk, dh);
        let mut dkh = vec![0.0; nk * dh];
        gemm_tn(&dp, &qh, nk, nq, dh, &mut dkh);
        scatter_head(&mut dq, &dqh, nq, d, h, dh);
        scatter_head(&mut dk, &dkh, nk, d, h, dh);
        scatter_head(&mut dv, &dvh, nk, d, h, dh);
    }
    (dq, dk, dv)
}

struct BlockCache {
    ln1: LnCache,
    a1: Vec<f64>,
    attn: AttnCache,
    ln2: LnCache,
    a2: Vec<f64>,
    cross: AttnCache,
    ln3: LnCache,
    a3: Vec<f64>,
    u: Vec<f64>,
    s: Vec<f64>,
}

/// Everything the reverse pass needs from one forward pass.
pub(crate) struct Cache {
    x: Vec<f64>,
    tsin: Vec<f64>,
    tm: Vec<f64>,
    tms: Vec<f64>,
    ctx_tokens: Vec<f64>,
    cond: usize,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    af: Vec<f64>,
    /// Residual stream after each block.
    pub hidden: Vec<Vec<f64>>,
}

/// Splits `C×H×W` into `(H/p)·(W/p)` raster-ordered patch tokens of
/// length `C·p·p`; feature index is `c·p·p + dy·p + dx`.
pub(crate) fn patchify(z: &[f64], cfg: &DenoiserConfig) -> Vec<f64> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let g = s / p;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; g * g * pd];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let tok = (y / p) * g + x / p;
                let f = ch * p * p + (y % p) * p + x % p;
                out[tok * pd + f] = z[ch * s * s + y * s + x];
            }
        }
    }
    out
}

pub(crate) fn unpatchify(tokens: &[f64], cfg: &DenoiserConfig) -> Vec<f64> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let g = s / p;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let tok = (y / p) * g + x / p;
                let f = ch * p * p + (y % p) * p + x % p;
                out[ch * s * s + y * s + x] = tokens[tok * pd + f];
            }
        }
    }
    out
}

pub(crate) struct Model<'w> {
    pub cfg: &'w DenoiserConfig,
    pub w: &'w [f64],
    pub layout: Layout,
}

impl<'w> Model<'w> {
    pub fn new(cfg: &'w DenoiserConfig, w: &'w [f64]) -> Self {
        Self {
            cfg,
            w,
            layout: Layout::new(cfg),
        }
    }

    fn check_input(&self, z: &Tensor, cond: usize) -> Result<()> {
        let c = self.cfg;
        if z.shape() != [c.channels, c.image_size, c.image_size] {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match model input {:?}",
                z.shape(),
                [c.channels, c.image_size, c.image_size]
            )));
        }
        if cond >= c.num_classes {
            return Err(Error::UnknownClass(cond));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        z: &Tensor,
        t: usize,
        cond: usize,
        opts: &ForwardOptions<'_>,
        keep: bool,
    ) -> Result<(ForwardOutput, Option<Cache>)> {
        self.check_input(z, cond)?;
        let cfg = self.cfg;
        let sl = &self.layout.slots;
        let w = self.w;
        let n = cfg.num_tokens();
        let d = cfg.token_dim;
        let pd = cfg.patch_dim();

        for (&layer, mode) in &opts.modes.0 {
            if mode.uses_prompt() {
                let has = opts.ctx.is_some_and(|r| r.layers.contains_key(&layer));
                if !has {
                    return Err(Error::MissingContext { layer });
                }
            }
        }

        // Timestep embedding and conditioning context tokens.
        let tsin = embed_timestep(t, d);
        let mut tm = matmul(&tsin, sl.time_w1.of(w), 1, d, d);
        add_row_bias(&mut tm, sl.time_b1.of(w));
        let tms: Vec<f64> = tm.iter().map(|&x| silu(x)).collect();
        let mut temb = matmul(&tms, sl.time_w2.of(w), 1, d, d);
        add_row_bias(&mut temb, sl.time_b2.of(w));
        let mut ctx_tokens = sl.class_emb.of(w)[cond * d..(cond + 1) * d].to_vec();
        ctx_tokens.extend_from_slice(&temb);

        let x = patchify(z.data(), cfg);
        let mut h = matmul(&x, sl.patch_w.of(w), n, pd, d);
        add_row_bias(&mut h, sl.patch_b.of(w));
        for (hv, pv) in h.iter_mut().zip(sl.pos.of(w)) {
            *hv += pv;
        }
        add_row_bias(&mut h, &temb);

        let mut blocks = Vec::new();
        let mut hidden = Vec::new();
        let mut record = opts.record.then(|| KvRecord {
            timestep: t,
            layers: Default::default(),
        });
        let mut masses = Vec::new();

        for (li, bs) in sl.blocks.iter().enumerate() {
            let mode = opts.modes.get(li);
            let layer_ctx = opts.ctx.and_then(|r| r.layers.get(&li));
            let (h_next, cache) =
                self.block_forward(li, bs, &h, &ctx_tokens, mode, layer_ctx, keep, opts.diagnose, &mut masses)?;
            if let (Some(rec), true) = (record.as_mut(), cfg.injection_layers.contains(&li)) {
                rec.layers.insert(
                    li,
                    (
                        Tensor::matrix(n, d, cache.attn.k.clone()),
                        Tensor::matrix(n, d, cache.attn.v.clone()),
                    ),
                );
            }
            h = h_next;
            if keep {
                blocks.push(cache);
                hidden.push(h.clone());
            }
        }

        let (af, lnf) = layer_norm(&h, n, d, sl.lnf_g.of(w), sl.lnf_b.of(w));
        let mut y = matmul(&af, sl.out_w.of(w), n, d, pd);
        add_row_bias(&mut y, sl.out_b.of(w));
        let eps = Tensor::new(z.shape().to_vec(), unpatchify(&y, cfg))?;
        if !eps.is_finite() {
            return Err(Error::NonFinite);
        }
        let cache = keep.then_some(Cache {
            x,
            tsin,
            tm,
            tms,
            ctx_tokens,
            cond,
            blocks,
            lnf,
            af,
            hidden,
        });
        Ok((
            ForwardOutput {
                eps,
                record,
                masses,
            },
            cache,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        layer: usize,
        bs: &BlockSlots,
        h: &[f64],
        ctx_tokens: &[f64],
        mode: AttentionMode,
        prompt: Option<&(Tensor, Tensor)>,
        keep: bool,
        diagnose: bool,
        masses: &mut Vec<LayerMass>,
    ) -> Result<(Vec<f64>, BlockCache)> {
        let cfg = self.cfg;
        let w = self.w;
        let n = cfg.num_tokens();
        let d = cfg.token_dim;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let f = cfg.mlp_hidden();

        let (a1, ln1) = layer_norm(h, n, d, bs.ln1_g.of(w), bs.ln1_b.of(w));
        let q = matmul(&a1, bs.wq.of(w), n, d, d);
        let k = matmul(&a1, bs.wk.of(w), n, d, d);
        let v = matmul(&a1, bs.wv.of(w), n, d, d);

        let (attn_out, probs) = if mode.uses_prompt() || (diagnose && prompt.is_some()) {
            let mut out = vec![0.0; n * d];
            let (mut mg, mut mp) = (0.0, 0.0);
            for hd in 0..heads {
                let qh = Tensor::matrix(n, dh, head_block(&q, n, d, hd, dh));
                let kh = Tensor::matrix(n, dh, head_block(&k, n, d, hd, dh));
                let vh = Tensor::matrix(n, dh, head_block(&v, n, d, hd, dh));
                let inp = AttentionInputs::new(&qh, &kh, &vh)?;
                let prompt_heads = prompt.map(|(kp, vp)| {
                    let np = kp.rows();
                    (
                        Tensor::matrix(np, dh, head_block(kp.data(), np, d, hd, dh)),
                        Tensor::matrix(np, dh, head_block(vp.data(), np, d, hd, dh)),
                    )
                });
                let ctx = prompt_heads.as_ref().map(|(kp, vp)| InjectionContext {
                    k_p: kp,
                    v_p: vp,
                    source_timestep: 0,
                    source_layer: layer,
                });
                let o = attention::dispatch(mode, &inp, ctx.as_ref())?;
                scatter_head(&mut out, o.data(), n, d, hd, dh);
                if diagnose {
                    if let Some(ctx) = ctx.as_ref() {
                        let m = attention::mass_split(&inp, ctx)?;
                        mg += m.mean_g();
                        mp += m.mean_p();
                    }
                }
            }
            if diagnose && prompt.is_some() {
                let (mg, mp) = (mg / heads as f64, mp / heads as f64);
                masses.push(LayerMass {
                    layer,
                    mass_g: mg,
                    mass_p: mp,
                    score_difference: mg - mp,
                });
            }
            if keep {
                return Err(Error::InvalidArgument(
                    "activation caching is only supported for plain attention".into(),
                ));
            }
            (out, Vec::new())
        } else {
            mha(&q, &k, &v, n, n, d, heads, keep)
        };
        let mut h1 = h.to_vec();
        gemm_nn(&attn_out, bs.wo.of(w), n, d, d, &mut h1);

        let (a2, ln2) = layer_norm(&h1, n, d, bs.ln2_g.of(w), bs.ln2_b.of(w));
        let cq = matmul(&a2, bs.cq.of(w), n, d, d);
        let ck = matmul(ctx_tokens, bs.ck.of(w), 2, d, d);
        let cv = matmul(ctx_tokens, bs.cv.of(w), 2, d, d);
        let (cross_out, cprobs) = mha(&cq, &ck, &cv, n, 2, d, heads, keep);
        let mut h2 = h1;
        gemm_nn(&cross_out, bs.co.of(w), n, d, d, &mut h2);

        let (a3, ln3) = layer_norm(&h2, n, d, bs.ln3_g.of(w), bs.ln3_b.of(w));
        let mut u = matmul(&a3, bs.w1.of(w), n, d, f);
        add_row_bias(&mut u, bs.b1.of(w));
        let s: Vec<f64> = u.iter().map(|&x| silu(x)).collect();
        let mut h3 = h2;
        gemm_nn(&s, bs.w2.of(w), n, f, d, &mut h3);
        add_row_bias(&mut h3, bs.b2.of(w));

        let cache = BlockCache {
            ln1,
            a1,
            attn: AttnCache {
                q,
                k,
                v,
                probs,
                out: attn_out,
            },
            ln2,
            a2,
            cross: AttnCache {
                q: cq,
                k: ck,
                v: cv,
                probs: cprobs,
                out: cross_out,
            },
            ln3,
            a3,
            u,
            s,
        };
        Ok((h3, cache))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂eps` in image layout.
    pub fn backward(&self, cache: &Cache, d_eps: &[f64], grad: &mut [f64]) {
        let cfg = self.cfg;
        let sl = &self.layout.slots;
        let w = self.w;
        let n = cfg.num_tokens();
        let d = cfg.token_dim;
        let pd = cfg.patch_dim();
        let f = cfg.mlp_hidden();
        let heads = cfg.num_heads;

        let dy = patchify(d_eps, cfg);
        gemm_tn(&cache.af, &dy, d, n, pd, sl.out_w.of_mut(grad));
        col_sum_into(&dy, pd, sl.out_b.of_mut(grad));
        let mut daf = vec![0.0; n * d];
        gemm_nt(&dy, sl.out_w.of(w), n, pd, d, &mut daf);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let mut dh = layer_norm_backward(&daf, &cache.lnf, n, d, sl.lnf_g.of(w), &mut dg, &mut db);
        add_into(sl.lnf_g.of_mut(grad), &dg);
        add_into(sl.lnf_b.of_mut(grad), &db);

        let mut dctx = vec![0.0; 2 * d];
        for (bs, bc) in sl.blocks.iter().zip(&cache.blocks).rev() {
            // MLP sublayer.
            gemm_tn(&bc.s, &dh, f, n, d, bs.w2.of_mut(grad));
            col_sum_into(&dh, d, bs.b2.of_mut(grad));
            let mut du = vec![0.0; n * f];
            gemm_nt(&dh, bs.w2.of(w), n, d, f, &mut du);
            for (g, &u) in du.iter_mut().zip(&bc.u) {
                *g *= silu_grad(u);
            }
            gemm_tn(&bc.a3, &du, d, n, f, bs.w1.of_mut(grad));
            col_sum_into(&du, f, bs.b1.of_mut(grad));
            let mut da3 = vec![0.0; n * d];
            gemm_nt(&du, bs.w1.of(w), n, f, d, &mut da3);
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(&da3, &bc.ln3, n, d, bs.ln3_g.of(w), &mut dg, &mut db);
            add_into(bs.ln3_g.of_mut(grad), &dg);
            add_into(bs.ln3_b.of_mut(grad), &db);
            add_into(&mut dh, &dx);

            // Cross-attention to the conditioning tokens.
            gemm_tn(&bc.cross.out, &dh, d, n, d, bs.co.of_mut(grad));
            let mut dco = vec![0.0; n * d];
            gemm_nt(&dh, bs.co.of(w), n, d, d, &mut dco);
            let (dcq, dck, dcv) = mha_backward(&bc.cross, &dco, n, 2, d, heads);
            gemm_tn(&bc.a2, &dcq, d, n, d, bs.cq.of_mut(grad));
            gemm_tn(&cache.ctx_tokens, &dck, d, 2, d, bs.ck.of_mut(grad));
            gemm_tn(&cache.ctx_tokens, &dcv, d, 2, d, bs.cv.of_mut(grad));
            gemm_nt(&dck, bs.ck.of(w), 2, d, d, &mut dctx);
            gemm_nt(&dcv, bs.cv.of(w), 2, d, d, &mut dctx);
            let mut da2 = vec![0.0; n * d];
            gemm_nt(&dcq, bs.cq.of(w), n, d, d, &mut da2);
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(&da2, &bc.ln2, n, d, bs.ln2_g.of(w), &mut dg, &mut db);
            add_into(bs.ln2_g.of_mut(grad), &dg);
            add_into(bs.ln2_b.of_mut(grad), &db);
            add_into(&mut dh, &dx);

            // Self-attention.
            gemm_tn(&bc.attn.out, &dh, d, n, d, bs.wo.of_mut(grad));
            let mut dout = vec![0.0; n * d];
            gemm_nt(&dh, bs.wo.of(w), n, d, d, &mut dout);
            let (dq, dk, dv) = mha_backward(&bc.attn, &dout, n, n, d, heads);
            gemm_tn(&bc.a1, &dq, d, n, d, bs.wq.of_mut(grad));
            gemm_tn(&bc.a1, &dk, d, n, d, bs.wk.of_mut(grad));
            gemm_tn(&bc.a1, &dv, d, n, d, bs.wv.of_mut(grad));
            let mut da1 = vec![0.0; n * d];
            gemm_nt(&dq, bs.wq.of(w), n, d, d, &mut da1);
            gemm_nt(&dk, bs.wk.of(w), n, d, d, &mut da1);
            gemm_nt(&dv, bs.wv.of(w), n, d, d, &mut da1);
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(&da1, &bc.ln1, n, d, bs.ln1_g.of(w), &mut dg, &mut db);
            add_into(bs.ln1_g.of_mut(grad), &dg);
            add_into(bs.ln1_b.of_mut(grad), &db);
            add_into(&mut dh, &dx);
        }

        // Embedding.
        gemm_tn(&cache.x, &dh, pd, n, d, sl.patch_w.of_mut(grad));
        col_sum_into(&dh, d, sl.patch_b.of_mut(grad));
        add_into(sl.pos.of_mut(grad), &dh);
        let cond = cache.cond;
        add_into(&mut sl.class_emb.of_mut(grad)[cond * d..(cond + 1) * d], &dctx[..d]);
        let mut dtemb = dctx[d..].to_vec();
        col_sum_into(&dh, d, &mut dtemb);
        gemm_tn(&cache.tms, &dtemb, d, 1, d, sl.time_w2.of_mut(grad));
        add_into(sl.time_b2.of_mut(grad), &dtemb);
        let mut dm = vec![0.0; d];
        gemm_nt(&dtemb, sl.time_w2.of(w), 1, d, d, &mut dm);
        for (g, &m) in dm.iter_mut().zip(&cache.tm) {
            *g *= silu_grad(m);
        }
        gemm_tn(&cache.tsin, &dm, d, 1, d, sl.time_w1.of_mut(grad));
        add_into(sl.time_b1.of_mut(grad), &dm);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
