//! Dense tensor kernels, per-channel statistics and a reproducible RNG.
//!
//! Everything here is 64-bit and single-threaded. Reductions always run
//! left to right so that results are bit-identical between runs.

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a 2-D tensor. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension; for a 2-D tensor the column count.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::matrix(n, m, out))
    }

    /// Copies columns `start..start + width` of a 2-D tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if start + width > n {
            return Err(Error::Shape(format!(
                "column block {start}..{} out of {n}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Ok(Self::matrix(m, width, out))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().map(|x| x * x).sum::<f64>() / d.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(0.0f64, |m, x| m.max(x.abs())))
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn ensure_finite(self) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite)
        }
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(&a.data, &b.data, m, k, n, &mut out);
    Tensor::matrix(m, n, out).ensure_finite()
}

/// `a · bᵀ`, with `a: m×k` and `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt trailing dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nt(&a.data, &b.data, m, k, n, &mut out);
    Tensor::matrix(m, n, out).ensure_finite()
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut out = x.data.clone();
    if n > 0 {
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Stacks the rows of `b` under the rows of `a`.
pub fn concat_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.dims2()?;
    let (n, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!(
            "concat_seq trailing dimensions {d} and {d2} differ"
        )));
    }
    let mut data = Vec::with_capacity((m + n) * d);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor::matrix(m + n, d, data))
}

/// Per-channel population mean and (floored) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Statistics of a `C×H×W` tensor, one entry per channel.
pub fn channel_stats(x: &Tensor) -> Result<ChannelStats> {
    let (c, plane) = channel_layout(x)?;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in x.data.chunks(plane) {
        let mu = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
        mean.push(mu);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(ChannelStats { mean, std })
}

/// Returns `(channels, elements per channel)` for a `C×H×W` tensor.
pub(crate) fn channel_layout(x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::Shape(format!(
            "expected C×H×W, got shape {:?}",
            x.shape
        )));
    }
    let plane = x.shape[1] * x.shape[2];
    if plane == 0 || x.shape[0] == 0 {
        return Err(Error::Shape("empty channel".into()));
    }
    Ok((x.shape[0], plane))
}

/// Tensor of i.i.d. standard normal draws.
pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.normal()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based generator: draw `i` is the SplitMix64 finalizer applied to
/// `seed + i · 0x9E3779B97F4A7C15` (wrapping). Uniforms take the top 53 bits;
/// normals use the Box–Muller transform and consume two uniforms per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a labelled sub-stream.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Slice-level kernels shared by the model code. All matrices are row-major.
pub mod kernels {
    /// `out += a · b` with `a: m×k`, `b: k×n`.
    pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let o = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a[i * k + p];
                let br = &b[p * n..(p + 1) * n];
                for (oj, bj) in o.iter_mut().zip(br) {
                    *oj += s * bj;
                }
            }
        }
    }

    /// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in ar.iter().zip(br) {
                    s += x * y;
                }
                out[i * n + j] += s;
            }
        }
    }

    /// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
    pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for p in 0..k {
            let ar = &a[p * m..(p + 1) * m];
            let br = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let s = ar[i];
                let o = &mut out[i * n..(i + 1) * n];
                for (oj, bj) in o.iter_mut().zip(br) {
                    *oj += s * bj;
                }
            }
        }
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}
