//! Deterministic DDIM sampling and inversion, AdaIN latent initialisation and
//! classifier-free guidance with image-prompt key/value injection.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::attention::{AttentionMode, StratifiedWeights};
use crate::denoiser::{ForwardOptions, KvRecord, LayerMass, LayerModes, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{channel_layout, channel_stats, randn, Rng, Tensor};

/// Cumulative signal levels `ᾱ_t` and the inference timestep subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub num_train_steps: usize,
    pub alpha_bar: Vec<f64>,
    /// Strictly decreasing; the final step of sampling goes to timestep 0.
    pub inference_steps: Vec<usize>,
}

/// `ᾱ_t = Π_{s≤t} (1 − β_s)`.
pub fn alpha_bar_from_betas(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// Linear-β schedule. Inference timesteps are `k·r − 1` for
/// `k = n_inf, …, 1` with `r = n_train / n_inf`, so sampling runs
/// `n_inf` steps and ends at timestep 0.
pub fn make_schedule(
    num_train_steps: usize,
    num_inference_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if num_inference_steps == 0 || num_inference_steps > num_train_steps || num_train_steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= inference steps ({num_inference_steps}) <= train steps ({num_train_steps})"
        )));
    }
    let last = (num_train_steps - 1) as f64;
    let betas: Vec<f64> = (0..num_train_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
        .collect();
    let ratio = num_train_steps / num_inference_steps;
    let inference_steps = (1..=num_inference_steps)
        .rev()
        .map(|k| k * ratio - 1)
        .collect();
    Ok(NoiseSchedule {
        num_train_steps,
        alpha_bar: alpha_bar_from_betas(&betas),
        inference_steps,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside schedule")))
    }

    /// `(t, t_prev)` for every sampling step, starting at the noisiest.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        let steps = &self.inference_steps;
        (0..steps.len())
            .map(|i| (steps[i], steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    pub fn first_timestep(&self) -> usize {
        self.inference_steps[0]
    }

    /// Stable 64-bit digest of the schedule.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.num_train_steps as u64).to_le_bytes());
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        for t in &self.inference_steps {
            h.update((*t as u64).to_le_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// One η = 0 DDIM update from `t` down to `t_prev`.
pub fn ddim_step(z_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t > t_prev, got {t} and {t_prev}"
        )));
    }
    let a_t = s.alpha_bar(t)?;
    let a_prev = s.alpha_bar(t_prev)?;
    z_t.zip_map(eps, |z, e| {
        let x0 = (z - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
        a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e
    })
}

/// Algebraic inverse of [`ddim_step`] for the same `eps`.
pub fn ddim_invert_step(
    z_prev: &Tensor,
    eps: &Tensor,
    t_prev: usize,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "ddim_invert_step needs t > t_prev, got {t} and {t_prev}"
        )));
    }
    let a_t = s.alpha_bar(t)?;
    let a_prev = s.alpha_bar(t_prev)?;
    z_prev.zip_map(eps, |z, e| {
        let x0 = (z - (1.0 - a_prev).sqrt() * e) / a_prev.sqrt();
        a_t.sqrt() * x0 + (1.0 - a_t).sqrt() * e
    })
}

/// `σ(y)·(x − μ(x))/σ(x) + μ(y)` per channel, population statistics.
pub fn adain_init(z: &Tensor, target: &Tensor) -> Result<Tensor> {
    if z.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "AdaIN shapes differ: {:?} vs {:?}",
            z.shape(),
            target.shape()
        )));
    }
    let (_, plane) = channel_layout(z)?;
    let src = channel_stats(z)?;
    let dst = channel_stats(target)?;
    let mut out = z.clone();
    for (c, ch) in out.data_mut().chunks_mut(plane).enumerate() {
        for x in ch {
            *x = dst.std[c] * (*x - src.mean[c]) / src.std[c] + dst.mean[c];
        }
    }
    Ok(out)
}

/// Inverted latents of an image prompt, keyed by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChain {
    pub latents: BTreeMap<usize, Tensor>,
    pub cond: usize,
}

impl LatentChain {
    pub fn get(&self, t: usize) -> Result<&Tensor> {
        self.latents.get(&t).ok_or(Error::MissingTimestep(t))
    }

    /// Named tensors `z_<t>` plus metadata tensors for the checkpoint container.
    /// The schedule hash is split into four 16-bit limbs so `f32` stores it exactly.
    pub fn to_tensors(&self, schedule_hash: u64) -> Vec<(String, Tensor)> {
        let limbs: Vec<f64> = (0..4).map(|i| ((schedule_hash >> (16 * i)) & 0xFFFF) as f64).collect();
        let mut out = vec![
            ("meta.cond".to_string(), Tensor::new(vec![1], vec![self.cond as f64]).unwrap()),
            ("meta.schedule_hash".to_string(), Tensor::new(vec![4], limbs).unwrap()),
        ];
        for (t, z) in self.latents.iter().rev() {
            out.push((format!("z_{t}"), z.clone()));
        }
        out
    }

    /// Inverse of [`LatentChain::to_tensors`]; returns the chain and the stored
    /// schedule hash.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<(Self, u64)> {
        let mut cond = None;
        let mut hash = None;
        let mut latents = BTreeMap::new();
        for (name, t) in tensors {
            match name.as_str() {
                "meta.cond" => cond = Some(t.data()[0] as usize),
                "meta.schedule_hash" if t.numel() == 4 => {
                    hash = Some(
                        t.data()
                            .iter()
                            .enumerate()
                            .fold(0u64, |h, (i, &l)| h | ((l as u64) << (16 * i))),
                    )
                }
                n => {
                    let step = n
                        .strip_prefix("z_")
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| Error::Format(format!("unexpected tensor `{n}` in chain")))?;
                    latents.insert(step, t.clone());
                }
            }
        }
        match (cond, hash) {
            (Some(cond), Some(hash)) => Ok((Self { latents, cond }, hash)),
            _ => Err(Error::Format("chain lacks metadata".into())),
        }
    }

    /// Checks the keys against the schedule's timesteps plus 0.
    pub fn check_against(&self, s: &NoiseSchedule) -> Result<()> {
        let mut expected: Vec<usize> = s.inference_steps.clone();
        expected.push(0);
        expected.sort_unstable();
        let got: Vec<usize> = self.latents.keys().copied().collect();
        if got != expected {
            return Err(Error::InvalidArgument(
                "latent chain timesteps do not match the schedule".into(),
            ));
        }
        Ok(())
    }
}

/// Which guidance branches receive the prompt stream's keys and values.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceMode {
    /// Prompt K/V injected into both branches.
    Conflicting,
    /// Prompt K/V injected into the positive branch only.
    ConflictFree,
    /// Negative branch receives K/V of a different image.
    NegativeImage(Box<LatentChain>),
    /// No guidance: positive branch only.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub mode: GuidanceMode,
    pub positive_cond: usize,
    pub negative_cond: usize,
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, positive_cond: usize, negative_cond: usize) -> Self {
        Self {
            scale: 7.5,
            mode,
            positive_cond,
            negative_cond,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// `eps⁻ + s·(eps⁺ − eps⁻)`; at `s = 1` the positive prediction is returned as is.
pub fn combine_guidance(pos: &Tensor, neg: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(pos.clone());
    }
    neg.zip_map(pos, |n, p| n + scale * (p - n))
}

/// Attention mode for every inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSchedule {
    pub modes: Vec<AttentionMode>,
}

impl FusionSchedule {
    pub fn uniform(steps: usize, mode: AttentionMode) -> Self {
        Self {
            modes: vec![mode; steps],
        }
    }

    /// Stratified attention for the first `stratified_steps`, concatenation after.
    pub fn stratified_then_concat(steps: usize, stratified_steps: usize, w: StratifiedWeights) -> Self {
        Self {
            modes: (0..steps)
                .map(|i| {
                    if i < stratified_steps {
                        AttentionMode::Stratified(w)
                    } else {
                        AttentionMode::Concatenation
                    }
                })
                .collect(),
        }
    }

    /// Replacement for the first `replacement_steps`, concatenation after.
    pub fn rival(steps: usize, replacement_steps: usize) -> Self {
        Self {
            modes: (0..steps)
                .map(|i| {
                    if i < replacement_steps {
                        AttentionMode::Replacement
                    } else {
                        AttentionMode::Concatenation
                    }
                })
                .collect(),
        }
    }

    /// Ten stratified (0.5/0.5) steps, concatenation afterwards.
    pub fn default_for(steps: usize) -> Self {
        Self::stratified_then_concat(steps, 10, StratifiedWeights::default())
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// One trace row: attention mass of one injected layer at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub layer: usize,
    pub mass_g: f64,
    pub mass_p: f64,
    pub score_difference: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub const CSV_HEADER: &'static str = "step,t,layer,mass_g,mass_p,score_difference";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{:.10},{:.10},{:.10}\n",
                r.step, r.t, r.layer, r.mass_g, r.mass_p, r.score_difference
            ));
        }
        s
    }

    /// Element-wise mean of traces with identical `(step, t, layer)` rows.
    pub fn mean_of(traces: &[Trace]) -> Result<Trace> {
        let first = traces
            .first()
            .ok_or_else(|| Error::InvalidArgument("no traces to average".into()))?;
        let n = traces.len() as f64;
        let mut out = first.clone();
        for (i, r) in out.records.iter_mut().enumerate() {
            let mut acc = (0.0, 0.0, 0.0);
            for tr in traces {
                let o = tr
                    .records
                    .get(i)
                    .filter(|o| (o.step, o.t, o.layer) == (r.step, r.t, r.layer))
                    .ok_or_else(|| Error::InvalidArgument("traces are not aligned".into()))?;
                acc.0 += o.mass_g;
                acc.1 += o.mass_p;
                acc.2 += o.score_difference;
            }
            r.mass_g = acc.0 / n;
            r.mass_p = acc.1 / n;
            r.score_difference = acc.2 / n;
        }
        Ok(out)
    }
}

/// Guided noise prediction together with its branch components.
#[derive(Debug, Clone)]
pub struct GuidedEpsilon {
    pub eps: Tensor,
    pub positive: Tensor,
    pub negative: Option<Tensor>,
    /// Joint-softmax attention mass in the positive branch, per injected layer.
    pub masses: Vec<LayerMass>,
}

/// Inversion and generation against one model and schedule.
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    pub weights: &'a ModelWeights,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Sampler<'a> {
    pub fn new(weights: &'a ModelWeights, schedule: &'a NoiseSchedule) -> Self {
        Self { weights, schedule }
    }

    /// DDIM inversion from the clean image up to the noisiest inference step,
    /// with original attention throughout.
    pub fn invert_image(&self, image: &Tensor, cond: usize) -> Result<LatentChain> {
        let cfg = self.weights.config();
        if image.shape() != cfg.image_shape() {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model {:?}",
                image.shape(),
                cfg.image_shape()
            )));
        }
        let mut latents = BTreeMap::new();
        let mut z = image.clone();
        latents.insert(0, z.clone());
        for &(t, t_prev) in self.schedule.step_pairs().iter().rev() {
            let eps = self.weights.predict(&z, t, cond)?;
            z = ddim_invert_step(&z, &eps, t_prev, t, self.schedule)?;
            if !z.is_finite() {
                return Err(Error::NonFinite);
            }
            latents.insert(t, z.clone());
        }
        Ok(LatentChain { latents, cond })
    }

    /// Prompt-stream K/V at timestep `t`: a fresh pass over `chain[t]`.
    pub fn harvest(&self, chain: &LatentChain, t: usize, cond: usize) -> Result<KvRecord> {
        let plain = LayerModes::original();
        let opts = ForwardOptions {
            modes: &plain,
            ctx: None,
            record: true,
            diagnose: false,
        };
        let out = self.weights.forward(chain.get(t)?, t, cond, &opts)?;
        Ok(out.record.expect("record requested"))
    }

    pub fn guided_epsilon(
        &self,
        z_t: &Tensor,
        t: usize,
        chain: &LatentChain,
        g: &GuidanceConfig,
        mode: AttentionMode,
    ) -> Result<GuidedEpsilon> {
        let cfg = self.weights.config();
        let prompt_kv = self.harvest(chain, t, g.positive_cond)?;
        let injected = LayerModes::injected(cfg, mode);
        let plain = LayerModes::original();

        let pos = self.weights.forward(
            z_t,
            t,
            g.positive_cond,
            &ForwardOptions {
                modes: &injected,
                ctx: Some(&prompt_kv),
                record: false,
                diagnose: true,
            },
        )?;

        let skip_negative = matches!(g.mode, GuidanceMode::None) || g.scale == 1.0;
        let negative = if skip_negative {
            None
        } else {
            let other_kv;
            let opts = match &g.mode {
                GuidanceMode::Conflicting => ForwardOptions {
                    modes: &injected,
                    ctx: Some(&prompt_kv),
                    record: false,
                    diagnose: false,
                },
                GuidanceMode::ConflictFree => ForwardOptions {
                    modes: &plain,
                    ctx: None,
                    record: false,
                    diagnose: false,
                },
                GuidanceMode::NegativeImage(other) => {
                    other_kv = self.harvest(other, t, g.positive_cond)?;
                    ForwardOptions {
                        modes: &injected,
                        ctx: Some(&other_kv),
                        record: false,
                        diagnose: false,
                    }
                }
                GuidanceMode::None => unreachable!(),
            };
            Some(self.weights.forward(z_t, t, g.negative_cond, &opts)?.eps)
        };

        let eps = match &negative {
            Some(neg) => combine_guidance(&pos.eps, neg, g.scale)?,
            None => pos.eps.clone(),
        };
        Ok(GuidedEpsilon {
            eps,
            positive: pos.eps,
            negative,
            masses: pos.masses,
        })
    }

    /// Generates one image: AdaIN-initialised noise, then guided DDIM steps
    /// with the fusion schedule's attention mode at each step. The result is
    /// clamped to `[−1, 1]`.
    pub fn generate(
        &self,
        chain: &LatentChain,
        g: &GuidanceConfig,
        fusion: &FusionSchedule,
        rng: &mut Rng,
    ) -> Result<(Tensor, Trace)> {
        let pairs = self.schedule.step_pairs();
        if fusion.len() != pairs.len() {
            return Err(Error::InvalidArgument(format!(
                "fusion schedule has {} steps, sampler has {}",
                fusion.len(),
                pairs.len()
            )));
        }
        chain.check_against(self.schedule)?;
        if let GuidanceMode::NegativeImage(other) = &g.mode {
            if **other == *chain {
                return Err(Error::InvalidArgument(
                    "negative image chain must differ from the prompt chain".into(),
                ));
            }
            other.check_against(self.schedule)?;
        }
        let z_prompt = chain.get(self.schedule.first_timestep())?;
        let noise = randn(z_prompt.shape(), rng);
        let mut z = adain_init(&noise, z_prompt)?;
        let mut trace = Trace::default();
        for (step, (&(t, t_prev), &mode)) in pairs.iter().zip(&fusion.modes).enumerate() {
            let ge = self.guided_epsilon(&z, t, chain, g, mode)?;
            for m in &ge.masses {
                trace.records.push(TraceRecord {
                    step,
                    t,
                    layer: m.layer,
                    mass_g: m.mass_g,
                    mass_p: m.mass_p,
                    score_difference: m.score_difference,
                });
            }
            z = ddim_step(&z, &ge.eps, t, t_prev, self.schedule)?;
            if !z.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok((z.map(|x| x.clamp(-1.0, 1.0)), trace))
    }

    /// Plain η = 0 DDIM sampling from `z_T` with a single condition.
    pub fn sample_plain(&self, z_t: &Tensor, cond: usize) -> Result<Tensor> {
        let mut z = z_t.clone();
        for (t, t_prev) in self.schedule.step_pairs() {
            let eps = self.weights.predict(&z, t, cond)?;
            z = ddim_step(&z, &eps, t, t_prev, self.schedule)?;
        }
        Ok(z)
    }
}
