//! Textured polygons: the class is the shape, each instance carries its own
//! palette and stripe/dot texture.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Classes `1..=4` are shapes; the negative class holds speckled,
/// washed-out shapes.
pub const SHAPES: [&str; 4] = ["disk", "bar", "triangle", "cross"];
pub const NEGATIVE_CLASS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub per_class: usize,
    /// Number of shape classes used, at most four.
    pub shape_classes: usize,
    pub include_negative: bool,
    /// Texture period range in pixels (inclusive).
    pub texture_period: (usize, usize),
    pub texture_amplitude: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            per_class: 64,
            shape_classes: 4,
            include_negative: true,
            texture_period: (2, 4),
            texture_amplitude: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        if self.spec.include_negative {
            NEGATIVE_CLASS + 1
        } else {
            self.spec.shape_classes + 1
        }
    }

    /// Indices of the images of one class, in dataset order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Instance parameters drawn per image.
struct Instance {
    fg: [f64; 3],
    bg: [f64; 3],
    accent: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    dots: bool,
    period: f64,
    angle: f64,
    phase: f64,
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.uniform_range(-0.9, 0.9))
}

fn distinct_color(rng: &mut Rng, from: &[f64; 3]) -> [f64; 3] {
    loop {
        let c = color(rng);
        let d: f64 = c.iter().zip(from).map(|(a, b)| (a - b).abs()).sum();
        if d > 1.2 {
            return c;
        }
    }
}

fn draw_instance(spec: &DatasetSpec, rng: &mut Rng) -> Instance {
    let s = spec.image_size as f64;
    let bg = color(rng);
    let fg = distinct_color(rng, &bg);
    let accent = distinct_color(rng, &fg);
    let (lo, hi) = spec.texture_period;
    Instance {
        fg,
        bg,
        accent,
        cx: s / 2.0 + rng.uniform_range(-0.1, 0.1) * s,
        cy: s / 2.0 + rng.uniform_range(-0.1, 0.1) * s,
        radius: s * rng.uniform_range(0.28, 0.38),
        dots: rng.uniform() <= 0.5,
        period: (lo + rng.below(hi - lo + 1)) as f64,
        angle: rng.uniform_range(0.0, std::f64::consts::PI),
        phase: rng.uniform_range(0.0, 1.0),
    }
}

/// Signed inside test for the class shape, in units of the radius.
fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (x, y) = (dx / r, dy / r);
    match class {
        1 => x * x + y * y <= 1.0,
        2 => x.abs() <= 1.0 && y.abs() <= 0.42,
        3 => (-1.0..=0.75).contains(&y) && x.abs() <= (y + 1.0) * 0.55,
        4 => (x.abs() <= 0.33 && y.abs() <= 1.0) || (y.abs() <= 0.33 && x.abs() <= 1.0),
        _ => false,
    }
}

fn texture(inst: &Instance, x: f64, y: f64) -> f64 {
    let (s, c) = inst.angle.sin_cos();
    let u = (x * c + y * s) / inst.period + inst.phase;
    if inst.dots {
        let v = (-x * s + y * c) / inst.period + inst.phase;
        let (fu, fv) = (u - u.floor() - 0.5, v - v.floor() - 0.5);
        if fu * fu + fv * fv < 0.09 {
            1.0
        } else {
            0.0
        }
    } else if u - u.floor() < 0.5 {
        1.0
    } else {
        0.0
    }
}

fn render(class: usize, inst: &Instance, spec: &DatasetSpec) -> Tensor {
    let n = spec.image_size;
    let a = spec.texture_amplitude;
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex = texture(inst, px, py);
            let col = if inside(class, px - inst.cx, py - inst.cy, inst.radius) {
                let mut c = inst.fg;
                for (ch, acc) in c.iter_mut().zip(inst.accent) {
                    *ch += a * tex * (acc - *ch);
                }
                c
            } else {
                inst.bg
            };
            for (ch, v) in col.iter().enumerate() {
                data[ch * n * n + y * n + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, n, n], data).unwrap()
}

/// Corrupted sample: a faded shape under heavy salt-and-pepper speckle.
fn render_negative(spec: &DatasetSpec, rng: &mut Rng) -> Tensor {
    let class = 1 + rng.below(spec.shape_classes);
    let inst = draw_instance(spec, rng);
    let base = render(class, &inst, spec);
    let n = spec.image_size;
    let mut out = base.map(|v| 0.4 * v);
    for p in 0..n * n {
        if rng.uniform() <= 0.3 {
            let v = if rng.uniform() <= 0.5 { 1.0 } else { -1.0 };
            for ch in 0..3 {
                out.data_mut()[ch * n * n + p] = v;
            }
        }
    }
    out
}

/// Balanced dataset, classes interleaved: `per_class` images of every shape
/// class (labels `1..=shape_classes`) and optionally of the negative class.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<ToyDataset> {
    if !(2..=SHAPES.len()).contains(&spec.shape_classes) {
        return Err(Error::config(
            "data.classes",
            format!("must be between 2 and {}", SHAPES.len()),
        ));
    }
    if spec.per_class == 0 {
        return Err(Error::config("data.per_class", "must be positive"));
    }
    if spec.image_size < 4 {
        return Err(Error::config("data.image_size", "must be at least 4"));
    }
    let (lo, hi) = spec.texture_period;
    if lo == 0 || lo > hi {
        return Err(Error::config("data.texture_period", "need 1 <= min <= max"));
    }
    let mut classes: Vec<usize> = (1..=spec.shape_classes).collect();
    if spec.include_negative {
        classes.push(NEGATIVE_CLASS);
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..spec.per_class {
        for &c in &classes {
            let img = if c == NEGATIVE_CLASS {
                render_negative(spec, &mut rng)
            } else {
                let inst = draw_instance(spec, &mut rng);
                render(c, &inst, spec)
            };
            images.push(img);
            labels.push(c);
        }
    }
    Ok(ToyDataset {
        spec: spec.clone(),
        seed,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::histogram_distance;

    fn small() -> DatasetSpec {
        DatasetSpec {
            per_class: 6,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_balanced_bounded() {
        let a = make_dataset(&small(), 3).unwrap();
        let b = make_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, make_dataset(&small(), 4).unwrap().images);
        for c in [1, 2, 3, 4, NEGATIVE_CLASS] {
            assert_eq!(a.indices_of(c).len(), 6);
        }
        assert_eq!(a.len(), 30);
        assert_eq!(a.num_classes(), 6);
        assert!(a
            .images
            .iter()
            .all(|t| t.shape() == [3, 16, 16] && t.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn instances_differ_in_palette() {
        let d = make_dataset(&small(), 11).unwrap();
        for c in 1..=4 {
            let idx = d.indices_of(c);
            for w in idx.windows(2) {
                let dist = histogram_distance(&d.images[w[0]], &d.images[w[1]]).unwrap();
                assert!(dist > 0.1, "class {c}: histogram distance {dist}");
            }
        }
    }

    #[test]
    fn shapes_are_distinct_masks() {
        let spec = DatasetSpec::default();
        let mut masks = Vec::new();
        for c in 1..=4 {
            let m: Vec<bool> = (0..256)
                .map(|p| inside(c, (p % 16) as f64 - 7.5, (p / 16) as f64 - 7.5, 0.33 * 16.0))
                .collect();
            assert!(m.iter().filter(|&&b| b).count() > 20);
            masks.push(m);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let diff = masks[i].iter().zip(&masks[j]).filter(|(a, b)| a != b).count();
                assert!(diff > 10, "{} vs {}", SHAPES[i], SHAPES[j]);
            }
        }
        assert_eq!(spec.image_size, 16);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = DatasetSpec {
            shape_classes: 1,
            ..small()
        };
        assert!(matches!(make_dataset(&bad, 0), Err(Error::Config { .. })));
        let bad = DatasetSpec {
            per_class: 0,
            ..small()
        };
        assert!(make_dataset(&bad, 0).is_err());
    }
}
