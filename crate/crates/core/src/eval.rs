//! Alignment, conditioning and diversity proxies, plus aggregation of
//! attention-mass traces.

use crate::attention::{AttentionMode, StratifiedWeights};
use crate::denoiser::{ModelWeights, NULL_CLASS};
use crate::error::{Error, Result};
use crate::numerics::{channel_layout, Rng, Tensor};
use crate::sampler::{FusionSchedule, GuidanceConfig, GuidanceMode, LatentChain, Sampler, Trace};

pub const HIST_BINS: usize = 8;

/// Per-channel 8-bin histograms over `[−1, 1]`, each normalised to sum 1.
pub fn color_histogram(x: &Tensor) -> Result<Vec<[f64; HIST_BINS]>> {
    let (c, plane) = channel_layout(x)?;
    let mut out = vec![[0.0; HIST_BINS]; c];
    for (ch, vals) in x.data().chunks(plane).enumerate() {
        for &v in vals {
            let b = (((v + 1.0) / 2.0) * HIST_BINS as f64).floor();
            out[ch][(b.max(0.0) as usize).min(HIST_BINS - 1)] += 1.0;
        }
        for h in out[ch].iter_mut() {
            *h /= plane as f64;
        }
    }
    Ok(out)
}

/// Mean over channels of half the L1 distance between histograms; in `[0, 1]`.
pub fn histogram_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ha, hb) = (color_histogram(a)?, color_histogram(b)?);
    let total: f64 = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / 2.0)
        .sum();
    Ok(total / ha.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Feature extractor: residual stream after the middle block of a clean
/// (`t = 0`, null condition) pass, average-pooled over the four image
/// quadrants into a `4·token_dim` vector.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    pub weights: &'a ModelWeights,
}

impl<'a> Features<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        Self { weights }
    }

    pub fn layer(&self) -> usize {
        (self.weights.config().num_blocks - 1) / 2
    }

    pub fn pooled(&self, x: &Tensor) -> Result<Vec<f64>> {
        let cfg = self.weights.config();
        let hidden = self.weights.hidden_states(x, 0, NULL_CLASS)?;
        let h = &hidden[self.layer()];
        let side = cfg.image_size / cfg.patch_size;
        let half = side.div_ceil(2);
        let d = cfg.token_dim;
        let mut out = vec![0.0; 4 * d];
        let mut counts = [0usize; 4];
        for tok in 0..side * side {
            let (r, c) = (tok / side, tok % side);
            let q = 2 * usize::from(r >= half) + usize::from(c >= half);
            counts[q] += 1;
            for (o, v) in out[q * d..(q + 1) * d].iter_mut().zip(h.row(tok)) {
                *o += v;
            }
        }
        for (q, &n) in counts.iter().enumerate() {
            for o in &mut out[q * d..(q + 1) * d] {
                *o /= n.max(1) as f64;
            }
        }
        Ok(out)
    }

    /// Layout descriptor for class comparisons: cosine self-similarity of
    /// the mean-centred tokens of the same block, flattened row-major.
    /// Largely insensitive to palette, which dominates [`Features::pooled`].
    pub fn structure(&self, x: &Tensor) -> Result<Vec<f64>> {
        let hidden = self.weights.hidden_states(x, 0, NULL_CLASS)?;
        let h = &hidden[self.layer()];
        let (n, d) = (h.rows(), h.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(h.row(i)) {
                *m += v / n as f64;
            }
        }
        let centred: Vec<Vec<f64>> = (0..n)
            .map(|i| h.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let mut out = Vec::with_capacity(n * n);
        for a in &centred {
            for b in &centred {
                out.push(cosine(a, b));
            }
        }
        Ok(out)
    }

    /// `0.5·cos(f(gen), f(prompt)) + 0.5·(1 − histogram distance)`.
    pub fn alignment(&self, gen: &Tensor, prompt: &Tensor) -> Result<f64> {
        let hd = histogram_distance(gen, prompt)?;
        Ok(0.5 * cosine(&self.pooled(gen)?, &self.pooled(prompt)?) + 0.5 * (1.0 - hd))
    }
}

/// Mean [`Features::structure`] descriptors of the training images of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// Indexed by class id; `None` for classes without images.
    pub by_class: Vec<Option<Vec<f64>>>,
}

impl Prototypes {
    pub fn build(f: &Features<'_>, images: &[Tensor], labels: &[usize]) -> Result<Self> {
        let num_classes = f.weights.config().num_classes;
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; num_classes];
        for (img, &l) in images.iter().zip(labels) {
            if l >= num_classes {
                return Err(Error::UnknownClass(l));
            }
            let feat = f.structure(img)?;
            let slot = sums[l].get_or_insert_with(|| (vec![0.0; feat.len()], 0));
            for (s, v) in slot.0.iter_mut().zip(&feat) {
                *s += v;
            }
            slot.1 += 1;
        }
        Ok(Self {
            by_class: sums
                .into_iter()
                .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
                .collect(),
        })
    }

    pub fn score(&self, f: &Features<'_>, x: &Tensor, class: usize) -> Result<f64> {
        let proto = self
            .by_class
            .get(class)
            .and_then(|p| p.as_ref())
            .ok_or(Error::UnknownClass(class))?;
        Ok(cosine(&f.structure(x)?, proto))
    }

    /// Class with the highest prototype similarity among `classes`.
    pub fn classify(&self, f: &Features<'_>, x: &Tensor, classes: &[usize]) -> Result<usize> {
        let feat = f.structure(x)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for &c in classes {
            let p = self
                .by_class
                .get(c)
                .and_then(|p| p.as_ref())
                .ok_or(Error::UnknownClass(c))?;
            let s = cosine(&feat, p);
            if s > best.0 {
                best = (s, c);
            }
        }
        Ok(best.1)
    }
}

/// Mean pairwise Euclidean distance between pooled feature vectors.
pub fn diversity_from_features(feats: &[Vec<f64>]) -> Result<f64> {
    if feats.len() < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two images".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            total += feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn diversity(f: &Features<'_>, images: &[Tensor]) -> Result<f64> {
    let feats = images.iter().map(|x| f.pooled(x)).collect::<Result<Vec<_>>>()?;
    diversity_from_features(&feats)
}

/// Per-step mean score difference over injected layers.
pub fn score_difference_curve(trace: &Trace, num_steps: usize, num_layers: usize) -> Result<Vec<f64>> {
    if trace.records.len() != num_steps * num_layers || num_layers == 0 {
        return Err(Error::InvalidArgument(format!(
            "trace has {} records, expected {} steps × {} layers",
            trace.records.len(),
            num_steps,
            num_layers
        )));
    }
    let mut sums = vec![0.0; num_steps];
    let mut counts = vec![0usize; num_steps];
    for r in &trace.records {
        if r.step >= num_steps {
            return Err(Error::InvalidArgument(format!("trace step {} out of range", r.step)));
        }
        sums[r.step] += r.score_difference;
        counts[r.step] += 1;
    }
    if counts.iter().any(|&c| c != num_layers) {
        return Err(Error::InvalidArgument("trace is incomplete".into()));
    }
    Ok(sums.into_iter().map(|s| s / num_layers as f64).collect())
}

pub fn curve_to_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,value\n");
    for (i, v) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{v:.10}\n"));
    }
    s
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Average ranks, ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Guidance wiring without the payload of the negative-image variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    Conflicting,
    ConflictFree,
    /// Negative branch injected with the next prompt case's chain.
    NegativeImage,
    None,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 4] = [
        GuidanceKind::Conflicting,
        GuidanceKind::ConflictFree,
        GuidanceKind::NegativeImage,
        GuidanceKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceKind::Conflicting => "conflicting",
            GuidanceKind::ConflictFree => "conflict-free",
            GuidanceKind::NegativeImage => "negative-image",
            GuidanceKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One image prompt with its inverted chain.
#[derive(Debug, Clone)]
pub struct PromptCase {
    /// Identifier used for seeding and reporting (dataset index).
    pub id: usize,
    pub image: Tensor,
    pub class: usize,
    pub chain: LatentChain,
}

/// Positive conditioning of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveCond {
    /// The prompt's own class.
    Prompt,
    Null,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub kind: GuidanceKind,
    pub scale: f64,
    pub positive: PositiveCond,
    pub negative_cond: usize,
    pub fusion: FusionSchedule,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub image: Tensor,
    pub trace: Trace,
    pub alignment: f64,
    pub cond_alignment: f64,
    /// Mean of the score-difference curve over steps.
    pub score_difference: f64,
}

/// Aggregates over the runs of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub value: f64,
    pub alignment: Vec<f64>,
    pub cond_alignment: Vec<f64>,
    pub score_difference: Vec<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "label,value,runs,alignment_mean,alignment_se,cond_alignment_mean,cond_alignment_se,score_difference_mean,score_difference_se";

    pub fn csv_line(&self) -> String {
        let (am, ase) = mean_se(&self.alignment);
        let (cm, cse) = mean_se(&self.cond_alignment);
        let (sm, sse) = mean_se(&self.score_difference);
        format!(
            "{},{},{},{am:.8},{ase:.8},{cm:.8},{cse:.8},{sm:.8},{sse:.8}",
            self.label,
            self.value,
            self.alignment.len()
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{}\n", SweepRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Runs generations over prompt cases and seeds and scores them.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub sampler: Sampler<'a>,
    pub features: Features<'a>,
    pub prototypes: &'a Prototypes,
}

impl<'a> Evaluator<'a> {
    pub fn new(sampler: Sampler<'a>, prototypes: &'a Prototypes) -> Self {
        Self {
            sampler,
            features: Features::new(sampler.weights),
            prototypes,
        }
    }

    fn guidance(&self, cases: &[PromptCase], i: usize, s: &RunSettings) -> GuidanceConfig {
        let case = &cases[i];
        let mode = match s.kind {
            GuidanceKind::Conflicting => GuidanceMode::Conflicting,
            GuidanceKind::ConflictFree => GuidanceMode::ConflictFree,
            GuidanceKind::None => GuidanceMode::None,
            GuidanceKind::NegativeImage => {
                GuidanceMode::NegativeImage(Box::new(cases[(i + 1) % cases.len()].chain.clone()))
            }
        };
        let positive = match s.positive {
            PositiveCond::Prompt => case.class,
            PositiveCond::Null => NULL_CLASS,
            PositiveCond::Class(c) => c,
        };
        GuidanceConfig::new(mode, positive, s.negative_cond).with_scale(s.scale)
    }

    /// Generates for `cases[i]` with noise seeded by `(seed, case id, sample)`.
    pub fn run(
        &self,
        cases: &[PromptCase],
        i: usize,
        settings: &RunSettings,
        seed: u64,
        sample: u64,
    ) -> Result<RunResult> {
        let case = &cases[i];
        let g = self.guidance(cases, i, settings);
        let mut rng = Rng::new(seed).fork(case.id as u64).fork(sample);
        let (image, trace) = self.sampler.generate(&case.chain, &g, &settings.fusion, &mut rng)?;
        let cfg = self.sampler.weights.config();
        let curve = score_difference_curve(&trace, settings.fusion.len(), cfg.injection_layers.len())?;
        Ok(RunResult {
            alignment: self.features.alignment(&image, &case.image)?,
            cond_alignment: self.prototypes.score(&self.features, &image, case.class)?,
            score_difference: curve.iter().sum::<f64>() / curve.len() as f64,
            image,
            trace,
        })
    }

    /// Scores one sweep point over `(case index, seed)` pairs.
    pub fn sweep_point(
        &self,
        label: impl Into<String>,
        value: f64,
        cases: &[PromptCase],
        settings: &RunSettings,
        runs: &[(usize, u64)],
    ) -> Result<SweepRow> {
        let mut row = SweepRow {
            label: label.into(),
            value,
            alignment: Vec::new(),
            cond_alignment: Vec::new(),
            score_difference: Vec::new(),
        };
        for &(i, seed) in runs {
            if i >= cases.len() {
                return Err(Error::InvalidArgument(format!("run refers to case {i} of {}", cases.len())));
            }
            let r = self.run(cases, i, settings, seed, 0)?;
            row.alignment.push(r.alignment);
            row.cond_alignment.push(r.cond_alignment);
            row.score_difference.push(r.score_difference);
        }
        Ok(row)
    }

    /// Guidance scale × wiring grid with the null class as positive condition.
    pub fn guidance_sweep(
        &self,
        cases: &[PromptCase],
        scales: &[f64],
        kinds: &[GuidanceKind],
        base: &RunSettings,
        runs: &[(usize, u64)],
    ) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &scale in scales {
            for &kind in kinds {
                let s = RunSettings {
                    kind,
                    scale,
                    positive: PositiveCond::Null,
                    ..base.clone()
                };
                rows.push(self.sweep_point(kind.name(), scale, cases, &s, runs)?);
            }
        }
        Ok(rows)
    }

    /// Stratified attention at every step with `λ_G = 1 − λ_P`.
    pub fn lambda_sweep(
        &self,
        cases: &[PromptCase],
        lambdas_p: &[f64],
        base: &RunSettings,
        runs: &[(usize, u64)],
    ) -> Result<Vec<SweepRow>> {
        let steps = self.sampler.schedule.inference_steps.len();
        let mut rows = Vec::new();
        for &lp in lambdas_p {
            let w = StratifiedWeights::from_prompt_weight(lp)?;
            let s = RunSettings {
                fusion: FusionSchedule::uniform(steps, AttentionMode::Stratified(w)),
                ..base.clone()
            };
            rows.push(self.sweep_point("lambda_p", lp, cases, &s, runs)?);
        }
        Ok(rows)
    }

    /// Score-difference comparison of the three configurations: conventional
    /// guidance with concatenation, conflict-free guidance with concatenation,
    /// and conflict-free guidance with stratified attention at every step.
    pub fn mode_trend(
        &self,
        cases: &[PromptCase],
        base: &RunSettings,
        runs: &[(usize, u64)],
    ) -> Result<Vec<SweepRow>> {
        let steps = self.sampler.schedule.inference_steps.len();
        let w = match base.fusion.modes.iter().find_map(|m| match m {
            AttentionMode::Stratified(w) => Some(*w),
            _ => None,
        }) {
            Some(w) => w,
            None => StratifiedWeights::default(),
        };
        let configs = [
            ("concat", GuidanceKind::Conflicting, AttentionMode::Concatenation),
            ("conflict-free", GuidanceKind::ConflictFree, AttentionMode::Concatenation),
            ("conflict-free+stratified", GuidanceKind::ConflictFree, AttentionMode::Stratified(w)),
        ];
        configs
            .iter()
            .map(|&(label, kind, mode)| {
                let s = RunSettings {
                    kind,
                    fusion: FusionSchedule::uniform(steps, mode),
                    ..base.clone()
                };
                self.sweep_point(label, base.scale, cases, &s, runs)
            })
            .collect()
    }
}

/// Every case with every seed, case-major.
pub fn crossed(num_cases: usize, seeds: &[u64]) -> Vec<(usize, u64)> {
    (0..num_cases)
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect()
}

/// One run per seed, cycling through the cases.
pub fn cycled(num_cases: usize, seeds: &[u64]) -> Vec<(usize, u64)> {
    seeds
        .iter()
        .enumerate()
        .map(|(k, &s)| (k % num_cases.max(1), s))
        .collect()
}

/// Paired gap `a − b` over aligned runs: mean and standard error.
pub fn paired_gap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("paired samples must be aligned and non-empty".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(mean_se(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::numerics::{randn, Rng};
    use crate::sampler::TraceRecord;

    fn weights() -> ModelWeights {
        ModelWeights::init(&DenoiserConfig::new(8, 16, 2, 2, 4), &mut Rng::new(1)).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        randn(&[3, 8, 8], &mut Rng::new(seed)).map(|v| (0.5 * v).clamp(-1.0, 1.0))
    }

    #[test]
    fn histogram_examples() {
        let x = Tensor::new(vec![1, 1, 4], vec![-1.0, -0.3, 0.3, 1.0]).unwrap();
        let h = color_histogram(&x).unwrap();
        assert_eq!(h[0], [0.25, 0.0, 0.25, 0.0, 0.0, 0.25, 0.0, 0.25]);
        let lo = Tensor::full(&[3, 2, 2], -1.0);
        let hi = Tensor::full(&[3, 2, 2], 1.0);
        assert_eq!(histogram_distance(&lo, &hi).unwrap(), 1.0);
        assert_eq!(histogram_distance(&lo, &lo).unwrap(), 0.0);
    }

    #[test]
    fn alignment_examples() {
        let w = weights();
        let f = Features::new(&w);
        let x = image(2);
        assert!((f.alignment(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = x.map(|v| -v);
        assert!(f.alignment(&x, &neg).unwrap() < 1.0);

        // Independent recomputation: direct binning loop and explicit cosine.
        let y = image(3);
        let mut hd = 0.0;
        for ch in 0..3 {
            let mut ha = [0.0f64; 8];
            let mut hb = [0.0f64; 8];
            for p in 0..64 {
                let bin = |v: f64| (((v + 1.0) * 4.0) as usize).min(7);
                ha[bin(x.data()[ch * 64 + p])] += 1.0 / 64.0;
                hb[bin(y.data()[ch * 64 + p])] += 1.0 / 64.0;
            }
            hd += ha.iter().zip(&hb).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
        }
        let (fa, fb) = (f.pooled(&x).unwrap(), f.pooled(&y).unwrap());
        let dot: f64 = fa.iter().zip(&fb).map(|(a, b)| a * b).sum();
        let cos = dot / (fa.iter().map(|a| a * a).sum::<f64>() * fb.iter().map(|b| b * b).sum::<f64>()).sqrt();
        let expected = 0.5 * cos + 0.5 * (1.0 - hd);
        assert!((f.alignment(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let w = weights();
        let f = Features::new(&w);
        let x = image(4);
        assert_eq!(diversity(&f, &[x.clone(), x.clone()]).unwrap(), 0.0);
        assert!(diversity(&f, std::slice::from_ref(&x)).is_err());
        let imgs = [image(5), image(6), image(7)];
        let a = diversity(&f, &imgs).unwrap();
        let b = diversity(&f, &[imgs[2].clone(), imgs[0].clone(), imgs[1].clone()]).unwrap();
        assert!((a - b).abs() < 1e-12);

        let feats = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]];
        let expected = (5.0 + 1.0 + 18f64.sqrt()) / 3.0;
        assert!((diversity_from_features(&feats).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn prototypes_are_deterministic() {
        let w = weights();
        let f = Features::new(&w);
        let imgs: Vec<Tensor> = (0..6).map(image).collect();
        let labels = [1, 2, 3, 1, 2, 3];
        let a = Prototypes::build(&f, &imgs, &labels).unwrap();
        assert_eq!(a, Prototypes::build(&f, &imgs, &labels).unwrap());
        assert!(a.by_class[0].is_none());
        let s = a.score(&f, &imgs[0], 1).unwrap();
        assert_eq!(s, a.score(&f, &imgs[0].clone(), 1).unwrap());
        assert!(matches!(a.score(&f, &imgs[0], 0), Err(Error::UnknownClass(0))));
        assert!(Prototypes::build(&f, &imgs[..1], &[9]).is_err());
    }

    fn rec(step: usize, layer: usize, g: f64, p: f64) -> TraceRecord {
        TraceRecord {
            step,
            t: 100 - step,
            layer,
            mass_g: g,
            mass_p: p,
            score_difference: g - p,
        }
    }

    #[test]
    fn curve_aggregation() {
        let sym = Trace {
            records: (0..3).flat_map(|s| [rec(s, 2, 0.5, 0.5), rec(s, 3, 0.5, 0.5)]).collect(),
        };
        assert_eq!(score_difference_curve(&sym, 3, 2).unwrap(), vec![0.0; 3]);

        let masses: [(f64, f64); 4] = [(0.9, 0.1), (0.6, 0.4), (0.7, 0.3), (0.55, 0.45)];
        let tr = Trace {
            records: vec![
                rec(0, 2, masses[0].0, masses[0].1),
                rec(0, 3, masses[1].0, masses[1].1),
                rec(1, 2, masses[2].0, masses[2].1),
                rec(1, 3, masses[3].0, masses[3].1),
            ],
        };
        let curve = score_difference_curve(&tr, 2, 2).unwrap();
        assert_eq!(curve.len(), 2);
        let step0: f64 = ((0.9 - 0.1) + (0.6 - 0.4)) / 2.0;
        let step1: f64 = ((0.7 - 0.3) + (0.55 - 0.45)) / 2.0;
        assert!((curve[0] - step0).abs() < 1e-12 && (curve[1] - step1).abs() < 1e-12);
        assert!(score_difference_curve(&tr, 3, 2).is_err());
        assert!(curve_to_csv(&curve).starts_with("step,value\n0,"));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Ranks x = 1..5, y = [2, 1, 4, 3, 5]: Σd² = 4, ρ = 1 − 6·4/(5·24) = 0.8.
        let r = spearman(&[0.0, 0.33, 0.5, 0.67, 1.0], &[0.2, 0.1, 0.4, 0.3, 0.5]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
    }
}
