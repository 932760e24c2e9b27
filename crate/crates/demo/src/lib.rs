//! Browser bindings for a few cheap strata operations. Build with
//! `wasm-pack build crates/demo --target web --out-dir www/pkg`.

use strata::attention::{
    mass_split, score_difference, stratified_attention, AttentionInputs, InjectionContext,
    StratifiedWeights,
};
use strata::numerics::{randn, Rng, Tensor};
use strata::pipeline::{make_dataset, DatasetSpec};
use strata::sampler::{adain_init, make_schedule};
use wasm_bindgen::prelude::*;

const DIM: usize = 8;

fn err(e: strata::Error) -> String {
    e.to_string()
}

/// Attention balance on random tokens: `n_gen` generated tokens attend to
/// themselves and to `n_prompt` prompt tokens whose keys are scaled by
/// `prompt_key_scale`.
///
/// Returns `[concat mass_g, concat mass_p, score difference,
/// stratified prompt share, stratified output drift]`, where the drift is the
/// mean absolute change of the stratified output against plain self-attention.
#[wasm_bindgen]
pub fn attention_balance(
    n_gen: usize,
    n_prompt: usize,
    prompt_key_scale: f64,
    lambda_p: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    if n_gen == 0 || n_prompt == 0 {
        return Err("token counts must be positive".into());
    }
    let mut rng = Rng::new(seed as u64);
    let q = randn(&[n_gen, DIM], &mut rng);
    let k = randn(&[n_gen, DIM], &mut rng);
    let v = randn(&[n_gen, DIM], &mut rng);
    let k_p = randn(&[n_prompt, DIM], &mut rng).scale(prompt_key_scale);
    let v_p = randn(&[n_prompt, DIM], &mut rng);
    let inp = AttentionInputs::new(&q, &k, &v).map_err(err)?;
    let ctx = InjectionContext::new(&k_p, &v_p);
    let split = mass_split(&inp, &ctx).map_err(err)?;
    let diff = score_difference(&inp, &ctx).map_err(err)?;
    let w = StratifiedWeights::from_prompt_weight(lambda_p).map_err(err)?;
    let mixed = stratified_attention(&inp, &ctx, w).map_err(err)?;
    let own = stratified_attention(&inp, &ctx, StratifiedWeights::from_prompt_weight(0.0).map_err(err)?)
        .map_err(err)?;
    let drift = mixed.zip_map(&own, |a, b| (a - b).abs()).map_err(err)?.mean();
    Ok(vec![split.mean_g(), split.mean_p(), diff, w.lambda_p(), drift])
}

/// Cumulative signal level ᾱ_t of the linear β schedule, one value per
/// training step.
#[wasm_bindgen]
pub fn alpha_bar_curve(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, String> {
    let s = make_schedule(train_steps, 1, beta_start, beta_end).map_err(err)?;
    Ok(s.alpha_bar)
}

fn rgba(x: &Tensor) -> Vec<u8> {
    let shape = x.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(strata::pipeline::ppm::to_byte(x.data()[c * h * w + i]));
        }
        out.push(255);
    }
    out
}

/// A toy dataset image of `class` (1..=4 shapes, 5 negative) next to noise
/// renormalised to its per-channel statistics. Returns two 16×16 RGBA
/// buffers back to back.
#[wasm_bindgen]
pub fn adain_preview(class: usize, seed: u32) -> Result<Vec<u8>, String> {
    let spec = DatasetSpec {
        per_class: 1,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec, seed as u64).map_err(err)?;
    let i = *data
        .indices_of(class)
        .first()
        .ok_or_else(|| format!("no images of class {class}"))?;
    let image = &data.images[i];
    let noise = randn(image.shape(), &mut Rng::new(seed as u64).fork(1));
    let matched = adain_init(&noise, image).map_err(err)?;
    let mut out = rgba(image);
    out.extend(rgba(&matched.map(|x| x.clamp(-1.0, 1.0))));
    Ok(out)
}
