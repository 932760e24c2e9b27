//! Config-driven runs. Each command writes into `<out>/<command>-<config hash>/`
//! and finishes with a sorted `manifest.txt` listing every artifact with a
//! content digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::denoiser::{train, ModelWeights};
use crate::error::{Error, Result};
use crate::attention::AttentionMode;
use crate::eval::{
    crossed, diversity, sweep_csv, Evaluator, GuidanceKind, PromptCase, Prototypes, RunSettings,
};
use crate::numerics::{Rng, Tensor};
use crate::sampler::{FusionSchedule, LatentChain, Sampler, Trace};

use super::config::{AblateTarget, ExperimentConfig, Settings};
use super::dataset::{make_dataset, ToyDataset};
use super::ppm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MakeData,
    Train,
    Invert,
    Generate,
    Ablate,
    Analyze,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Invert,
        Command::Generate,
        Command::Ablate,
        Command::Analyze,
        Command::MakeData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::Train => "train",
            Command::Invert => "invert",
            Command::Generate => "generate",
            Command::Ablate => "ablate",
            Command::Analyze => "analyze",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn needs_model(self) -> bool {
        !matches!(self, Command::MakeData | Command::Train)
    }
}

/// Output directory and manifest of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: BTreeMap<String, String>,
}

impl RunReport {
    /// Manifest entries describing files, keyed by path relative to the run directory.
    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.manifest.keys().filter_map(|k| k.strip_prefix("file."))
    }
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer {
    dir: PathBuf,
    manifest: BTreeMap<String, String>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.manifest.insert(format!("file.{rel}"), digest(bytes));
        Ok(())
    }

    fn put_image(&mut self, rel: &str, x: &Tensor) -> Result<()> {
        self.put(rel, &ppm::encode_image(x)?)
    }

    fn put_tensors(&mut self, rel: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        self.put(rel, &checkpoint::encode(tensors))
    }

    fn write_manifest(&self) -> Result<()> {
        let text: String = self
            .manifest
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fs::write(self.dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

/// Validates `cfg` for `cmd` without touching the filesystem beyond reads.
pub fn validate(cmd: Command, cfg: &ExperimentConfig) -> Result<Settings> {
    let s = cfg.resolve()?;
    if cmd.needs_model() {
        match &s.checkpoint {
            None => {
                return Err(Error::config(
                    "model.checkpoint",
                    format!("required by `{}`", cmd.name()),
                ))
            }
            Some(p) if !p.is_file() => {
                return Err(Error::config(
                    "model.checkpoint",
                    format!("{} does not exist", p.display()),
                ))
            }
            _ => {}
        }
    }
    Ok(s)
}

pub fn run_dir(out_root: &Path, cmd: Command, cfg: &ExperimentConfig) -> PathBuf {
    out_root.join(format!("{}-{}", cmd.name(), cfg.hash()))
}

/// Runs one command. Validation errors leave the filesystem untouched;
/// failures after that are tagged with the stage and leave a manifest with
/// `status=failed`.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, out_root: &Path) -> Result<RunReport> {
    let settings = validate(cmd, cfg)?;
    let dir = run_dir(out_root, cmd, cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_stage("output"))?;
    let mut w = Writer {
        dir: dir.clone(),
        manifest: BTreeMap::new(),
    };
    w.manifest.insert("command".into(), cmd.name().into());
    w.manifest.insert("config.hash".into(), cfg.hash());
    for line in cfg.canonical().lines() {
        if let Some((k, v)) = line.split_once('=') {
            w.manifest.insert(format!("config.{k}"), v.to_string());
        }
    }
    w.put("config.txt", cfg.canonical().as_bytes())?;

    let mut stage = "setup";
    let result = run_stages(cmd, &settings, &mut w, &mut stage);
    match result {
        Ok(()) => {
            w.manifest.insert("status".into(), "ok".into());
            w.write_manifest()?;
            Ok(RunReport {
                dir,
                manifest: w.manifest,
            })
        }
        Err(e) => {
            w.manifest.insert("status".into(), format!("failed:{stage}"));
            w.manifest.insert("error".into(), e.to_string().replace('\n', " "));
            let _ = w.write_manifest();
            Err(e.in_stage(stage))
        }
    }
}

fn run_stages(cmd: Command, s: &Settings, w: &mut Writer, stage: &mut &'static str) -> Result<()> {
    *stage = "data";
    let data = make_dataset(&s.dataset, s.data_seed)?;
    match cmd {
        Command::MakeData => {
            *stage = "write-data";
            write_dataset(&data, w)
        }
        Command::Train => {
            *stage = "train";
            let (weights, log) = train(
                &data.images,
                &data.labels,
                &s.model,
                &s.train,
                &s.schedule.alpha_bar,
                &mut Rng::new(s.train_seed),
            )?;
            *stage = "write-model";
            w.put_tensors("model.strd", &weights.checkpoint_tensors())?;
            w.put("train_log.csv", log.to_csv().as_bytes())
        }
        _ => {
            *stage = "load-model";
            let path = s.checkpoint.as_ref().expect("validated");
            let weights = ModelWeights::load(path)?;
            if weights.config().image_shape() != s.model.image_shape() {
                return Err(Error::Shape("checkpoint image shape differs from the config".into()));
            }
            let sampler = Sampler::new(&weights, &s.schedule);
            *stage = "prompts";
            let prompts = load_prompts(s, &data)?;
            *stage = "invert";
            let cases = invert_prompts(&sampler, s, &prompts)?;
            match cmd {
                Command::Invert => {
                    *stage = "write-chains";
                    for c in &cases {
                        w.put_tensors(
                            &format!("chains/p{}.strd", c.id),
                            &c.chain.to_tensors(s.schedule.hash()),
                        )?;
                    }
                    Ok(())
                }
                _ => {
                    *stage = "prototypes";
                    let protos = Prototypes::build(
                        &crate::eval::Features::new(&weights),
                        &data.images,
                        &data.labels,
                    )?;
                    let ev = Evaluator::new(sampler, &protos);
                    match cmd {
                        Command::Generate => {
                            *stage = "generate";
                            generate(&ev, s, &cases, w)
                        }
                        Command::Ablate => {
                            *stage = "ablate";
                            ablate(&ev, s, &cases, w)
                        }
                        _ => {
                            *stage = "analyze";
                            analyze(&ev, s, &cases, w)
                        }
                    }
                }
            }
        }
    }
}

fn write_dataset(data: &ToyDataset, w: &mut Writer) -> Result<()> {
    let mut labels = String::from("index,label,file\n");
    for (i, (img, &l)) in data.images.iter().zip(&data.labels).enumerate() {
        let rel = format!("images/{i:05}.ppm");
        w.put_image(&rel, img)?;
        labels.push_str(&format!("{i},{l},{rel}\n"));
    }
    w.put("labels.csv", labels.as_bytes())
}

/// `(id, image, class)` of each configured prompt.
pub fn load_prompts(s: &Settings, data: &ToyDataset) -> Result<Vec<(usize, Tensor, usize)>> {
    if s.prompt_files.is_empty() {
        return Ok(s
            .prompts
            .iter()
            .map(|&i| (i, data.images[i].clone(), data.labels[i]))
            .collect());
    }
    s.prompt_files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let img = ppm::read_image(p)?;
            if img.shape() != s.model.image_shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    p.display(),
                    s.model.image_shape(),
                    img.shape()
                )));
            }
            Ok((i, img, s.prompt_class))
        })
        .collect()
}

pub fn invert_prompts(
    sampler: &Sampler<'_>,
    s: &Settings,
    prompts: &[(usize, Tensor, usize)],
) -> Result<Vec<PromptCase>> {
    prompts
        .iter()
        .map(|(id, img, class)| {
            Ok(PromptCase {
                id: *id,
                image: img.clone(),
                class: *class,
                chain: sampler.invert_image(img, s.inversion_cond(*class))?,
            })
        })
        .collect()
}

fn generate(ev: &Evaluator<'_>, s: &Settings, cases: &[PromptCase], w: &mut Writer) -> Result<()> {
    let mut metrics = String::from("prompt,seed,image,alignment,cond_alignment,score_difference\n");
    let mut div = String::from("prompt,seed,diversity\n");
    for (i, case) in cases.iter().enumerate() {
        for seed in s.seeds() {
            let dir = format!("runs/p{}-s{}", case.id, seed);
            w.put_tensors(&format!("{dir}/chain.strd"), &case.chain.to_tensors(ev.sampler.schedule.hash()))?;
            let mut images = Vec::new();
            let mut traces = Vec::new();
            for k in 0..s.images {
                let r = ev.run(cases, i, &s.run, seed, k as u64)?;
                w.put_image(&format!("{dir}/img_{k}.ppm"), &r.image)?;
                metrics.push_str(&format!(
                    "{},{},{},{:.8},{:.8},{:.8}\n",
                    case.id, seed, k, r.alignment, r.cond_alignment, r.score_difference
                ));
                images.push(r.image);
                traces.push(r.trace);
            }
            w.put(&format!("{dir}/trace.csv"), Trace::mean_of(&traces)?.to_csv().as_bytes())?;
            if images.len() >= 2 {
                div.push_str(&format!(
                    "{},{},{:.8}\n",
                    case.id,
                    seed,
                    diversity(&ev.features, &images)?
                ));
            }
        }
    }
    w.put("metrics.csv", metrics.as_bytes())?;
    w.put("diversity.csv", div.as_bytes())
}

fn ablate(ev: &Evaluator<'_>, s: &Settings, cases: &[PromptCase], w: &mut Writer) -> Result<()> {
    let runs = crossed(cases.len(), &s.seeds());
    let (name, rows) = match s.ablate_target {
        AblateTarget::Lambda => ("lambda_sweep.csv", ev.lambda_sweep(cases, &s.lambdas, &s.run, &runs)?),
        AblateTarget::Guidance => {
            let mut kinds = vec![GuidanceKind::Conflicting, GuidanceKind::ConflictFree];
            if cases.len() > 1 {
                kinds.push(GuidanceKind::NegativeImage);
            }
            (
                "guidance_sweep.csv",
                ev.guidance_sweep(cases, &s.scales, &kinds, &s.run, &runs)?,
            )
        }
        AblateTarget::Fusion => {
            let steps = s.schedule.inference_steps.len();
            let lead = s
                .run
                .fusion
                .modes
                .iter()
                .take_while(|m| matches!(m, AttentionMode::Stratified(_)))
                .count();
            let schedules = [
                ("original", FusionSchedule::uniform(steps, AttentionMode::Original)),
                ("replacement", FusionSchedule::uniform(steps, AttentionMode::Replacement)),
                ("concat", FusionSchedule::uniform(steps, AttentionMode::Concatenation)),
                ("stratified", FusionSchedule::uniform(steps, AttentionMode::Stratified(s.stratified))),
                ("rival", FusionSchedule::rival(steps, lead)),
                ("stratified-concat", FusionSchedule::stratified_then_concat(steps, lead, s.stratified)),
            ];
            let mut rows = Vec::new();
            for (label, fusion) in schedules {
                let rs = RunSettings {
                    fusion,
                    ..s.run.clone()
                };
                rows.push(ev.sweep_point(label, s.run.scale, cases, &rs, &runs)?);
            }
            ("fusion_ablation.csv", rows)
        }
    };
    w.put(name, sweep_csv(&rows).as_bytes())
}

fn analyze(ev: &Evaluator<'_>, s: &Settings, cases: &[PromptCase], w: &mut Writer) -> Result<()> {
    let runs = crossed(cases.len(), &s.seeds());
    let rows = ev.mode_trend(cases, &s.run, &runs)?;
    w.put("mode_trend.csv", sweep_csv(&rows).as_bytes())?;

    // Per-step curves of the configured run, averaged over cases and seeds.
    let steps = s.schedule.inference_steps.len();
    let layers = ev.sampler.weights.config().injection_layers.len();
    let mut traces = Vec::new();
    for &(i, seed) in &runs {
        traces.push(ev.run(cases, i, &s.run, seed, 0)?.trace);
    }
    let mean = Trace::mean_of(&traces)?;
    w.put("trace.csv", mean.to_csv().as_bytes())?;
    let curve = crate::eval::score_difference_curve(&mean, steps, layers)?;
    w.put("score_difference.csv", crate::eval::curve_to_csv(&curve).as_bytes())
}

/// Reads a chain written by `invert` and checks it against the schedule.
pub fn load_chain(path: impl AsRef<Path>, s: &Settings) -> Result<LatentChain> {
    let (chain, hash) = LatentChain::from_tensors(&checkpoint::load(path)?)?;
    if hash != s.schedule.hash() {
        return Err(Error::Format("chain was inverted under a different schedule".into()));
    }
    chain.check_against(&s.schedule)?;
    Ok(chain)
}
