//! Trained toy model shared by the slow test targets. It is trained once
//! with the default configuration and cached under the cargo target tmpdir.

#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use strata::denoiser::ModelWeights;
use strata::eval::{Evaluator, Features, PromptCase, Prototypes};
use strata::pipeline::{
    execute, make_dataset, run::invert_prompts, run_dir, Command, ExperimentConfig, Settings,
    ToyDataset,
};
use strata::sampler::Sampler;

pub struct Fixture {
    pub config: ExperimentConfig,
    pub settings: Settings,
    pub weights: ModelWeights,
    pub data: ToyDataset,
    /// Wall-clock training time when it was measured.
    pub train_seconds: Option<f64>,
}

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("strata-fixture")
}

pub fn fixture() -> Fixture {
    let out = root();
    let train_cfg = ExperimentConfig::default();
    let dir = run_dir(&out, Command::Train, &train_cfg);
    let timing = out.join(format!("{}.seconds", dir.file_name().unwrap().to_string_lossy()));
    let done = fs::read_to_string(dir.join("manifest.txt"))
        .map(|m| m.contains("status=ok"))
        .unwrap_or(false);
    if !done {
        eprintln!("training the toy model (default configuration)...");
        let t0 = Instant::now();
        execute(Command::Train, &train_cfg, &out).expect("training failed");
        fs::write(&timing, format!("{}", t0.elapsed().as_secs_f64())).unwrap();
    }
    let train_seconds = fs::read_to_string(&timing).ok().and_then(|s| s.trim().parse().ok());
    let mut config = ExperimentConfig::default();
    config
        .set("model.checkpoint", dir.join("model.strd").to_str().unwrap())
        .unwrap();
    let settings = config.resolve().unwrap();
    let weights = ModelWeights::load(dir.join("model.strd")).unwrap();
    let data = make_dataset(&settings.dataset, settings.data_seed).unwrap();
    Fixture {
        config,
        settings,
        weights,
        data,
        train_seconds,
    }
}

impl Fixture {
    pub fn sampler(&self) -> Sampler<'_> {
        Sampler::new(&self.weights, &self.settings.schedule)
    }

    /// The first image of every shape class, inverted with its own class or
    /// the null class.
    pub fn cases(&self, null_inversion: bool) -> Vec<PromptCase> {
        let mut s = self.settings.clone();
        s.inversion_null = null_inversion;
        let prompts: Vec<_> = (1..=self.settings.dataset.shape_classes)
            .map(|c| {
                let i = self.data.indices_of(c)[0];
                (i, self.data.images[i].clone(), c)
            })
            .collect();
        invert_prompts(&self.sampler(), &s, &prompts).unwrap()
    }

    pub fn prototypes(&self) -> Prototypes {
        Prototypes::build(&Features::new(&self.weights), &self.data.images, &self.data.labels).unwrap()
    }

    pub fn evaluator<'a>(&'a self, protos: &'a Prototypes) -> Evaluator<'a> {
        Evaluator::new(self.sampler(), protos)
    }
}

/// One fixture per test binary, so parallel tests do not train concurrently.
pub fn shared() -> &'static Fixture {
    static FIXTURE: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    FIXTURE.get_or_init(fixture)
}
