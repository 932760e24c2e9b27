//! A tiny class-conditional transformer denoiser `ε_θ(z_t, t, c)` over
//! pixel-space images.
//!
//! Images are cut into 2×2 patch tokens. Each block runs self-attention,
//! cross-attention to two conditioning tokens (class embedding and time
//! embedding) and an MLP, all pre-norm with residual connections. The
//! self-attention of blocks listed in `injection_layers` can record its
//! keys/values and can be swapped for any [`AttentionMode`] that consumes
//! a prompt stream's keys/values.

mod model;
mod params;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::AttentionMode;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use params::{Layout, ModelWeights, ParamSpec};
pub use train::{train, TrainLog, TrainParams};

/// Class id of the unconditional (null) condition.
pub const NULL_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    /// Includes the null class (id 0).
    pub num_classes: usize,
    pub injection_layers: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::new(16, 32, 2, 4, 6)
    }
}

impl DenoiserConfig {
    /// Three-channel config with 2×2 patches; injection applies to the second
    /// half of the blocks.
    pub fn new(
        image_size: usize,
        token_dim: usize,
        num_heads: usize,
        num_blocks: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            image_size,
            channels: 3,
            patch_size: 2,
            token_dim,
            num_heads,
            num_blocks,
            mlp_ratio: 2,
            num_classes,
            injection_layers: (num_blocks / 2..num_blocks).collect(),
        }
    }

    /// 4×4 image, single block; small enough for finite-difference checks.
    pub fn micro() -> Self {
        let mut c = Self::new(4, 8, 2, 1, 3);
        c.injection_layers = vec![0];
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.token_dim == 0 || self.num_blocks == 0 || self.mlp_ratio == 0 {
            return bad("channels, token_dim, num_blocks and mlp_ratio must be positive".into());
        }
        if self.num_heads == 0 || !self.token_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "token_dim {} is not divisible by num_heads {}",
                self.token_dim, self.num_heads
            ));
        }
        if !self.token_dim.is_multiple_of(2) {
            return bad("token_dim must be even for the sinusoidal time embedding".into());
        }
        if self.num_classes < 2 {
            return bad("need the null class plus at least one class".into());
        }
        if let Some(&l) = self.injection_layers.iter().find(|&&l| l >= self.num_blocks) {
            return bad(format!("injection layer {l} >= num_blocks {}", self.num_blocks));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.token_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Integer encoding stored alongside checkpoints.
    pub(crate) fn encode(&self) -> Vec<f64> {
        let mut v = vec![
            self.image_size,
            self.channels,
            self.patch_size,
            self.token_dim,
            self.num_heads,
            self.num_blocks,
            self.mlp_ratio,
            self.num_classes,
            self.injection_layers.len(),
        ];
        v.extend(&self.injection_layers);
        v.into_iter().map(|x| x as f64).collect()
    }

    pub(crate) fn decode(v: &[f64]) -> Result<Self> {
        let ints: Vec<usize> = v
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 1e7 {
                    Ok(x as usize)
                } else {
                    Err(Error::Format(format!("bad config entry {x}")))
                }
            })
            .collect::<Result<_>>()?;
        if ints.len() < 9 || ints.len() != 9 + ints[8] {
            return Err(Error::Format("malformed model config record".into()));
        }
        let cfg = Self {
            image_size: ints[0],
            channels: ints[1],
            patch_size: ints[2],
            token_dim: ints[3],
            num_heads: ints[4],
            num_blocks: ints[5],
            mlp_ratio: ints[6],
            num_classes: ints[7],
            injection_layers: ints[9..].to_vec(),
        };
        cfg.validate()
            .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
        Ok(cfg)
    }
}

/// Attention mode per block; blocks not present run original attention.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerModes(pub BTreeMap<usize, AttentionMode>);

impl LayerModes {
    pub fn original() -> Self {
        Self::default()
    }

    /// `mode` at every injection layer of `cfg`.
    pub fn injected(cfg: &DenoiserConfig, mode: AttentionMode) -> Self {
        Self(cfg.injection_layers.iter().map(|&l| (l, mode)).collect())
    }

    pub fn get(&self, layer: usize) -> AttentionMode {
        self.0.get(&layer).copied().unwrap_or(AttentionMode::Original)
    }
}

/// Self-attention keys and values (`n_tokens × token_dim`, all heads) of one
/// forward pass, for each injection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRecord {
    pub timestep: usize,
    pub layers: BTreeMap<usize, (Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub modes: &'a LayerModes,
    pub ctx: Option<&'a KvRecord>,
    pub record: bool,
    /// Report joint-softmax attention mass for every layer that has prompt K/V.
    pub diagnose: bool,
}

/// Attention mass of one layer, averaged over queries and heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMass {
    pub layer: usize,
    pub mass_g: f64,
    pub mass_p: f64,
    pub score_difference: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub record: Option<KvRecord>,
    pub masses: Vec<LayerMass>,
}

/// Sinusoidal embedding: the first half holds `sin(t·ω_i)`, the second half
/// `cos(t·ω_i)`, with `ω_i = 10000^(−i/(dim/2))`.
pub fn embed_timestep(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

static PLAIN: LayerModes = LayerModes(BTreeMap::new());

impl ModelWeights {
    pub fn forward(
        &self,
        z: &Tensor,
        t: usize,
        cond: usize,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let m = model::Model::new(&self.config, &self.values);
        Ok(m.forward(z, t, cond, opts, false)?.0)
    }

    /// Predicted noise with original attention everywhere.
    pub fn predict(&self, z: &Tensor, t: usize, cond: usize) -> Result<Tensor> {
        let opts = ForwardOptions {
            modes: &PLAIN,
            ctx: None,
            record: false,
            diagnose: false,
        };
        Ok(self.forward(z, t, cond, &opts)?.eps)
    }

    /// Residual stream (`n_tokens × token_dim`) after each block of a plain pass.
    pub fn hidden_states(&self, z: &Tensor, t: usize, cond: usize) -> Result<Vec<Tensor>> {
        let m = model::Model::new(&self.config, &self.values);
        let opts = ForwardOptions {
            modes: &PLAIN,
            ctx: None,
            record: false,
            diagnose: false,
        };
        let (_, cache) = m.forward(z, t, cond, &opts, true)?;
        let (n, d) = (self.config.num_tokens(), self.config.token_dim);
        Ok(cache
            .expect("cache requested")
            .hidden
            .into_iter()
            .map(|h| Tensor::matrix(n, d, h))
            .collect())
    }

    /// Mean squared error against `target` and its gradient, accumulated into `grad`.
    pub fn loss_and_grad(
        &self,
        z: &Tensor,
        t: usize,
        cond: usize,
        target: &Tensor,
        grad: &mut [f64],
    ) -> Result<f64> {
        let m = model::Model::new(&self.config, &self.values);
        let opts = ForwardOptions {
            modes: &PLAIN,
            ctx: None,
            record: false,
            diagnose: false,
        };
        let (out, cache) = m.forward(z, t, cond, &opts, true)?;
        let diff = out.eps.sub(target)?;
        let numel = diff.numel() as f64;
        let loss = diff.data().iter().map(|x| x * x).sum::<f64>() / numel;
        let d_eps: Vec<f64> = diff.data().iter().map(|x| 2.0 * x / numel).collect();
        m.backward(cache.as_ref().expect("cache requested"), &d_eps, grad);
        Ok(loss)
    }

    /// Named tensors as stored in a checkpoint: the encoded config as
    /// `meta.config` followed by every parameter tensor.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let meta = self.config.encode();
        let mut tensors = vec![(
            "meta.config".to_string(),
            Tensor::new(vec![meta.len()], meta).expect("non-empty config"),
        )];
        tensors.extend(self.named_tensors());
        tensors
    }

    /// Writes the checkpoint container; values are narrowed to `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut tensors = checkpoint::load(path)?;
        let pos = tensors
            .iter()
            .position(|(n, _)| n == "meta.config")
            .ok_or_else(|| Error::Format("checkpoint lacks `meta.config`".into()))?;
        let (_, meta) = tensors.remove(pos);
        let config = DenoiserConfig::decode(meta.data())?;
        ModelWeights::from_named_tensors(&config, &tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::StratifiedWeights;
    use crate::numerics::{randn, Rng};

    fn small() -> (ModelWeights, Tensor) {
        let cfg = DenoiserConfig::new(8, 16, 2, 2, 4);
        let mut rng = Rng::new(3);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let z = randn(&cfg.image_shape(), &mut rng);
        (w, z)
    }

    #[test]
    fn timestep_embedding() {
        let e0 = embed_timestep(0, 8);
        assert_eq!(&e0[..4], &[0.0; 4]);
        assert_eq!(&e0[4..], &[1.0; 4]);
        assert_eq!(embed_timestep(17, 8), embed_timestep(17, 8));
    }

    #[test]
    fn timestep_embeddings_pairwise_distinct() {
        let all: Vec<Vec<f64>> = (0..1000).map(|t| embed_timestep(t, 64)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let dist: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = DenoiserConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.injection_layers = vec![4];
        assert!(c.validate().is_err());
        assert_eq!(DenoiserConfig::default().injection_layers, vec![2, 3]);
        assert_eq!(DenoiserConfig::default().num_tokens(), 64);
    }

    #[test]
    fn original_everywhere_matches_plain() {
        let (w, z) = small();
        let plain = w.predict(&z, 500, 1).unwrap();
        let modes = LayerModes::injected(w.config(), AttentionMode::Original);
        let opts = ForwardOptions {
            modes: &modes,
            ctx: None,
            record: false,
            diagnose: false,
        };
        assert_eq!(w.forward(&z, 500, 1, &opts).unwrap().eps, plain);
    }

    fn record_of(w: &ModelWeights, z: &Tensor, t: usize, cond: usize) -> KvRecord {
        let plain = LayerModes::original();
        let opts = ForwardOptions {
            modes: &plain,
            ctx: None,
            record: true,
            diagnose: false,
        };
        w.forward(z, t, cond, &opts).unwrap().record.unwrap()
    }

    #[test]
    fn self_injection_reproduces_plain_output() {
        let (w, z) = small();
        let plain = w.predict(&z, 300, 2).unwrap();
        let rec = record_of(&w, &z, 300, 2);
        assert_eq!(rec.layers.keys().copied().collect::<Vec<_>>(), vec![1]);
        for mode in [
            AttentionMode::Replacement,
            AttentionMode::Stratified(StratifiedWeights::new(1.0, 0.0).unwrap()),
            AttentionMode::Stratified(StratifiedWeights::default()),
            AttentionMode::Concatenation,
        ] {
            let modes = LayerModes::injected(w.config(), mode);
            let opts = ForwardOptions {
                modes: &modes,
                ctx: Some(&rec),
                record: false,
                diagnose: true,
            };
            let out = w.forward(&z, 300, 2, &opts).unwrap();
            assert!(out.eps.max_abs_diff(&plain).unwrap() < 1e-10, "{mode:?}");
            assert_eq!(out.masses.len(), 1);
            assert!(out.masses[0].score_difference.abs() < 1e-12);
        }
    }

    #[test]
    fn injection_changes_output_and_needs_context() {
        let (w, z) = small();
        let mut rng = Rng::new(77);
        let other = randn(&w.config().image_shape(), &mut rng);
        let rec = record_of(&w, &other, 300, 1);
        let modes = LayerModes::injected(w.config(), AttentionMode::Replacement);
        let with = ForwardOptions {
            modes: &modes,
            ctx: Some(&rec),
            record: false,
            diagnose: false,
        };
        let injected = w.forward(&z, 300, 1, &with).unwrap().eps;
        assert!(injected.max_abs_diff(&w.predict(&z, 300, 1).unwrap()).unwrap() > 1e-6);

        let without = ForwardOptions { ctx: None, ..with };
        assert!(matches!(
            w.forward(&z, 300, 1, &without),
            Err(Error::MissingContext { layer: 1 })
        ));
    }

    #[test]
    fn injection_locality() {
        // Blocks before the first injection layer see identical activations.
        let (w, z) = small();
        let mut rng = Rng::new(5);
        let other = randn(&w.config().image_shape(), &mut rng);
        let rec = record_of(&w, &other, 100, 1);
        let modes = LayerModes::original();
        let plain = ForwardOptions {
            modes: &modes,
            ctx: None,
            record: true,
            diagnose: false,
        };
        let with_ctx = ForwardOptions {
            ctx: Some(&rec),
            ..plain
        };
        let a = w.forward(&z, 100, 1, &plain).unwrap();
        let b = w.forward(&z, 100, 1, &with_ctx).unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.record, b.record);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (w, z) = small();
        assert!(matches!(w.predict(&z, 10, 4), Err(Error::UnknownClass(4))));
        let wrong = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(w.predict(&wrong, 10, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, _) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.strd");
        w.save(&path).unwrap();
        let loaded = ModelWeights::load(&path).unwrap();
        assert_eq!(loaded.config(), w.config());
        for ((na, a), (nb, b)) in w.named_tensors().iter().zip(loaded.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30) + 1e-38);
            }
        }

        // Header: magic, version, count; per tensor: name length, name, ndim, dims.
        let tensors = w.named_tensors();
        let mut expected = 12 + 4 + "meta.config".len() + 4 + 8 + 4 * w.config().encode().len();
        for (name, t) in &tensors {
            expected += 4 + name.len() + 4 + 8 * t.ndim() + 4 * t.numel();
        }
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelWeights::load(&path), Err(Error::Format(_))));
    }
}
