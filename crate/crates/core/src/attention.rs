//! Self-attention variants used to inject an image prompt's keys and values
//! into a generation stream, plus the attention-mass diagnostics.
//!
//! All functions operate on a single head: `q: n_G×d`, `k: n×d`, `v: n×d_v`.
//! The prompt stream contributes `k_p: n_P×d` and `v_p: n_P×d_v`.

use crate::error::{Error, Result};
use crate::numerics::{concat_seq, matmul, matmul_nt, softmax_rows, Tensor};

/// Queries, keys and values of the generated stream for one head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub v: &'a Tensor,
    /// Key/query dimension used in the `1/√d` logit scale.
    pub d: usize,
}

impl<'a> AttentionInputs<'a> {
    pub fn new(q: &'a Tensor, k: &'a Tensor, v: &'a Tensor) -> Result<Self> {
        let (_, dq) = q.dims2()?;
        let (nk, dk) = k.dims2()?;
        let (nv, _) = v.dims2()?;
        if dq != dk {
            return Err(Error::Shape(format!(
                "query dim {dq} differs from key dim {dk}"
            )));
        }
        if nk != nv {
            return Err(Error::Shape(format!("{nk} keys but {nv} values")));
        }
        Ok(Self { q, k, v, d: dq })
    }
}

/// Keys and values harvested from the image-prompt stream.
#[derive(Debug, Clone, Copy)]
pub struct InjectionContext<'a> {
    pub k_p: &'a Tensor,
    pub v_p: &'a Tensor,
    pub source_timestep: usize,
    pub source_layer: usize,
}

impl<'a> InjectionContext<'a> {
    pub fn new(k_p: &'a Tensor, v_p: &'a Tensor) -> Self {
        Self {
            k_p,
            v_p,
            source_timestep: 0,
            source_layer: 0,
        }
    }

    fn check(&self, inp: &AttentionInputs<'_>) -> Result<()> {
        let (np, dk) = self.k_p.dims2()?;
        let (nv, dv) = self.v_p.dims2()?;
        if np != nv {
            return Err(Error::Shape(format!(
                "prompt stream has {np} keys but {nv} values"
            )));
        }
        if dk != inp.q.cols() || dv != inp.v.cols() {
            return Err(Error::Shape(format!(
                "prompt K/V dims ({dk}, {dv}) do not match host ({}, {})",
                inp.q.cols(),
                inp.v.cols()
            )));
        }
        Ok(())
    }
}

/// Convex weights `(λ_G, λ_P)` of stratified attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedWeights {
    lambda_g: f64,
    lambda_p: f64,
}

impl StratifiedWeights {
    pub fn new(lambda_g: f64, lambda_p: f64) -> Result<Self> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(lambda_g) || !in_unit(lambda_p) || (lambda_g + lambda_p - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "stratified weights ({lambda_g}, {lambda_p}) must lie in [0,1] and sum to 1"
            )));
        }
        Ok(Self { lambda_g, lambda_p })
    }

    /// Weights with `λ_P = lambda_p` and `λ_G = 1 − λ_P`.
    pub fn from_prompt_weight(lambda_p: f64) -> Result<Self> {
        Self::new(1.0 - lambda_p, lambda_p)
    }

    pub fn lambda_g(&self) -> f64 {
        self.lambda_g
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }
}

impl Default for StratifiedWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.5,
            lambda_p: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Original,
    Replacement,
    Concatenation,
    Stratified(StratifiedWeights),
}

impl AttentionMode {
    pub fn uses_prompt(&self) -> bool {
        !matches!(self, AttentionMode::Original)
    }
}

/// `softmax(q·kᵀ/√d)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    let logits = matmul_nt(q, k)?.scale(1.0 / (d as f64).sqrt());
    softmax_rows(&logits)
}

pub fn self_attention(inp: &AttentionInputs<'_>) -> Result<Tensor> {
    let p = attention_probs(inp.q, inp.k, inp.d)?;
    matmul(&p, inp.v)
}

/// Attention over the prompt stream's keys and values only.
pub fn kv_replacement(q: &Tensor, ctx: &InjectionContext<'_>, d: usize) -> Result<Tensor> {
    let inp = AttentionInputs::new(q, ctx.k_p, ctx.v_p)?;
    self_attention(&AttentionInputs { d, ..inp })
}

/// One joint softmax over the generated keys followed by the prompt keys.
pub fn kv_concatenation(inp: &AttentionInputs<'_>, ctx: &InjectionContext<'_>) -> Result<Tensor> {
    ctx.check(inp)?;
    let k = concat_seq(inp.k, ctx.k_p)?;
    let v = concat_seq(inp.v, ctx.v_p)?;
    self_attention(&AttentionInputs {
        q: inp.q,
        k: &k,
        v: &v,
        d: inp.d,
    })
}

/// `λ_G·Attn(q, k, v) + λ_P·Attn(q, k_p, v_p)` with two separate softmaxes.
pub fn stratified_attention(
    inp: &AttentionInputs<'_>,
    ctx: &InjectionContext<'_>,
    w: StratifiedWeights,
) -> Result<Tensor> {
    ctx.check(inp)?;
    // A zero weight drops its stream entirely, so the degenerate cases are exact.
    if w.lambda_p == 0.0 {
        return self_attention(inp);
    }
    let prompt = kv_replacement(inp.q, ctx, inp.d)?;
    if w.lambda_g == 0.0 {
        return Ok(prompt);
    }
    let generated = self_attention(inp)?;
    generated.zip_map(&prompt, |g, p| w.lambda_g * g + w.lambda_p * p)
}

pub fn dispatch(
    mode: AttentionMode,
    inp: &AttentionInputs<'_>,
    ctx: Option<&InjectionContext<'_>>,
) -> Result<Tensor> {
    let need = || ctx.ok_or(Error::NoContext);
    match mode {
        AttentionMode::Original => self_attention(inp),
        AttentionMode::Replacement => {
            let ctx = need()?;
            ctx.check(inp)?;
            kv_replacement(inp.q, ctx, inp.d)
        }
        AttentionMode::Concatenation => kv_concatenation(inp, need()?),
        AttentionMode::Stratified(w) => stratified_attention(inp, need()?, w),
    }
}

/// Per-query probability mass that the joint (concatenated) softmax assigns
/// to generated keys and to prompt keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSplit {
    pub mass_g: Vec<f64>,
    pub mass_p: Vec<f64>,
}

impl MassSplit {
    pub fn mean_g(&self) -> f64 {
        mean(&self.mass_g)
    }

    pub fn mean_p(&self) -> f64 {
        mean(&self.mass_p)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn mass_split(inp: &AttentionInputs<'_>, ctx: &InjectionContext<'_>) -> Result<MassSplit> {
    ctx.check(inp)?;
    let k = concat_seq(inp.k, ctx.k_p)?;
    let p = attention_probs(inp.q, &k, inp.d)?;
    let n_g = inp.k.rows();
    let mut mass_g = Vec::with_capacity(p.rows());
    let mut mass_p = Vec::with_capacity(p.rows());
    for i in 0..p.rows() {
        let row = p.row(i);
        mass_g.push(row[..n_g].iter().sum());
        mass_p.push(row[n_g..].iter().sum());
    }
    Ok(MassSplit { mass_g, mass_p })
}

/// Mean over queries of `mass_g − mass_p`; lies in `[−1, 1]`.
pub fn score_difference(inp: &AttentionInputs<'_>, ctx: &InjectionContext<'_>) -> Result<f64> {
    let m = mass_split(inp, ctx)?;
    let diffs: Vec<f64> = m.mass_g.iter().zip(&m.mass_p).map(|(g, p)| g - p).collect();
    Ok(mean(&diffs))
}
