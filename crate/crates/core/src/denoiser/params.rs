use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Location of one named parameter inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.off..self.off + self.len]
    }

    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub cq: Slot,
    pub ck: Slot,
    pub cv: Slot,
    pub co: Slot,
    pub ln3_g: Slot,
    pub ln3_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub patch_w: Slot,
    pub patch_b: Slot,
    pub pos: Slot,
    pub time_w1: Slot,
    pub time_b1: Slot,
    pub time_w2: Slot,
    pub time_b2: Slot,
    pub class_emb: Slot,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
}

/// Names, shapes and offsets of every parameter, fixed by the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) specs: Vec<ParamSpec>,
    pub(crate) slots: Slots,
    pub(crate) total: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            off: self.total,
            len,
        };
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.total += len;
        slot
    }
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.token_dim;
        let pd = cfg.patch_dim();
        let f = cfg.mlp_hidden();
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let patch_w = b.add("patch.w".into(), &[pd, d]);
        let patch_b = b.add("patch.b".into(), &[d]);
        let pos = b.add("pos".into(), &[cfg.num_tokens(), d]);
        let time_w1 = b.add("time.w1".into(), &[d, d]);
        let time_b1 = b.add("time.b1".into(), &[d]);
        let time_w2 = b.add("time.w2".into(), &[d, d]);
        let time_b2 = b.add("time.b2".into(), &[d]);
        let class_emb = b.add("class_emb".into(), &[cfg.num_classes, d]);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut p = |n: &str, s: &[usize]| b.add(format!("block{i}.{n}"), s);
                BlockSlots {
                    ln1_g: p("ln1.g", &[d]),
                    ln1_b: p("ln1.b", &[d]),
                    wq: p("attn.wq", &[d, d]),
                    wk: p("attn.wk", &[d, d]),
                    wv: p("attn.wv", &[d, d]),
                    wo: p("attn.wo", &[d, d]),
                    ln2_g: p("ln2.g", &[d]),
                    ln2_b: p("ln2.b", &[d]),
                    cq: p("cross.wq", &[d, d]),
                    ck: p("cross.wk", &[d, d]),
                    cv: p("cross.wv", &[d, d]),
                    co: p("cross.wo", &[d, d]),
                    ln3_g: p("ln3.g", &[d]),
                    ln3_b: p("ln3.b", &[d]),
                    w1: p("mlp.w1", &[d, f]),
                    b1: p("mlp.b1", &[f]),
                    w2: p("mlp.w2", &[f, d]),
                    b2: p("mlp.b2", &[d]),
                }
            })
            .collect();
        let lnf_g = b.add("ln_f.g".into(), &[d]);
        let lnf_b = b.add("ln_f.b".into(), &[d]);
        let out_w = b.add("out.w".into(), &[d, pd]);
        let out_b = b.add("out.b".into(), &[pd]);
        Layout {
            specs: b.specs,
            total: b.total,
            slots: Slots {
                patch_w,
                patch_b,
                pos,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                class_emb,
                blocks,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.total
    }
}

/// All learnable tensors of a denoiser, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub(crate) config: DenoiserConfig,
    pub(crate) values: Vec<f64>,
}

impl ModelWeights {
    /// Random initialisation. Layer-norm gains start at one, biases at zero.
    pub fn init(config: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let d = config.token_dim as f64;
        let f = config.mlp_hidden() as f64;
        let residual = 1.0 / (2.0 * config.num_blocks as f64).sqrt();
        let mut values = vec![0.0; layout.total];
        for spec in &layout.specs {
            let name = spec.name.as_str();
            let std = if name.ends_with(".g") {
                let s = &mut values[spec.offset..spec.offset + spec.shape[0]];
                s.fill(1.0);
                continue;
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                continue;
            } else if name == "patch.w" {
                1.0 / (config.patch_dim() as f64).sqrt()
            } else if name == "pos" {
                0.1
            } else if name == "class_emb" {
                0.5
            } else if name == "out.w" {
                0.1 / d.sqrt()
            } else if name.ends_with("attn.wo") || name.ends_with("cross.wo") {
                residual / d.sqrt()
            } else if name.ends_with("mlp.w2") {
                residual / f.sqrt()
            } else {
                1.0 / d.sqrt()
            };
            let n: usize = spec.shape.iter().product();
            for x in &mut values[spec.offset..spec.offset + n] {
                *x = std * rng.normal();
            }
        }
        Ok(Self {
            config: config.clone(),
            values,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    /// Named tensors in layout order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        Layout::new(&self.config)
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = self.values[s.offset..s.offset + n].to_vec();
                (s.name.clone(), Tensor::new(s.shape.clone(), data).unwrap())
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Rebuilds weights from named tensors, requiring exactly the layout's names
    /// and shapes.
    pub fn from_named_tensors(config: &DenoiserConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        let mut values = vec![0.0; layout.total];
        for spec in &layout.specs {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == spec.name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor `{}` is not finite", spec.name)));
            }
            values[spec.offset..spec.offset + t.numel()].copy_from_slice(t.data());
        }
        Ok(Self {
            config: config.clone(),
            values,
        })
    }
}
