//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use strata::attention::{
    kv_concatenation, mass_split, self_attention, stratified_attention, AttentionInputs,
    InjectionContext, StratifiedWeights,
};
use strata::denoiser::{DenoiserConfig, ModelWeights};
use strata::eval::{cycled, mean_se, paired_gap, spearman, GuidanceKind};
use strata::numerics::{channel_stats, randn, Rng, Tensor};
use strata::sampler::{
    adain_init, combine_guidance, ddim_invert_step, ddim_step, GuidanceConfig, GuidanceMode,
    NoiseSchedule,
};
use strata::attention::AttentionMode;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_case(rng: &mut Rng) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let n_g = 1 + rng.below(6);
    let n_p = 1 + rng.below(6);
    let d = 1 + rng.below(5);
    let dv = 1 + rng.below(4);
    let scale = rng.uniform_range(0.1, 3.0);
    let mut r = |shape: &[usize]| randn(shape, rng).scale(scale);
    (r(&[n_g, d]), r(&[n_g, d]), r(&[n_g, dv]), r(&[n_p, d]), r(&[n_p, dv]))
}

fn attention_identities() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (q, k, v, kp, vp) = random_case(&mut rng);
        let inp = AttentionInputs::new(&q, &k, &v).unwrap();
        let ctx = InjectionContext::new(&kp, &vp);
        let own = self_attention(&inp).unwrap();
        let cross = self_attention(&AttentionInputs::new(&q, &kp, &vp).unwrap()).unwrap();
        let only_g = stratified_attention(&inp, &ctx, StratifiedWeights::new(1.0, 0.0).unwrap()).unwrap();
        let only_p = stratified_attention(&inp, &ctx, StratifiedWeights::new(0.0, 1.0).unwrap()).unwrap();
        let dup = kv_concatenation(&inp, &InjectionContext::new(&k, &v)).unwrap();
        worst = worst
            .max(only_g.max_abs_diff(&own).unwrap())
            .max(only_p.max_abs_diff(&cross).unwrap())
            .max(dup.max_abs_diff(&own).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 10.0,
        format!("max deviation {worst:.2e} over 1000 cases in {secs:.2} s"),
    )
}

fn decomposition_identity() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (q, k, v, kp, vp) = random_case(&mut rng);
        let inp = AttentionInputs::new(&q, &k, &v).unwrap();
        let ctx = InjectionContext::new(&kp, &vp);
        let joint = kv_concatenation(&inp, &ctx).unwrap();
        let a_g = self_attention(&inp).unwrap();
        let a_p = self_attention(&AttentionInputs::new(&q, &kp, &vp).unwrap()).unwrap();
        let m = mass_split(&inp, &ctx).unwrap();
        for i in 0..q.rows() {
            for c in 0..v.cols() {
                let rebuilt = m.mass_g[i] * a_g.row(i)[c] + m.mass_p[i] * a_p.row(i)[c];
                worst = worst.max((rebuilt - joint.row(i)[c]).abs());
            }
            worst = worst.max((m.mass_g[i] + m.mass_p[i] - 1.0).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.2e} over 1000 cases"))
}

fn guidance_algebra(fx: &common::Fixture) -> Outcome {
    let sampler = fx.sampler();
    let cases = fx.cases(false);
    let case = &cases[0];
    let z = randn(&fx.weights.config().image_shape(), &mut Rng::new(5));
    let mut ok = true;
    let mut checks = 0;
    for (t, mode) in [
        (999, AttentionMode::Concatenation),
        (499, AttentionMode::Stratified(StratifiedWeights::default())),
        (19, AttentionMode::Replacement),
    ] {
        let conflicting = GuidanceConfig::new(GuidanceMode::Conflicting, case.class, 5);
        let free = GuidanceConfig::new(GuidanceMode::ConflictFree, case.class, 5);
        let a = sampler.guided_epsilon(&z, t, &case.chain, &conflicting, mode).unwrap();
        let b = sampler.guided_epsilon(&z, t, &case.chain, &free, mode).unwrap();
        ok &= a.positive.data() == b.positive.data();

        let unit = sampler
            .guided_epsilon(&z, t, &case.chain, &free.clone().with_scale(1.0), mode)
            .unwrap();
        ok &= unit.eps.data() == unit.positive.data();

        // Same condition in both branches of the conflicting wiring: eps⁺ = eps⁻.
        for scale in [0.0, 1.0, 2.5, 7.5, 20.0] {
            let same = GuidanceConfig::new(GuidanceMode::Conflicting, case.class, case.class).with_scale(scale);
            let g = sampler.guided_epsilon(&z, t, &case.chain, &same, mode).unwrap();
            ok &= g.eps.data() == g.positive.data();
            ok &= combine_guidance(&g.positive, &g.positive, scale).unwrap().data() == g.positive.data();
            checks += 1;
        }
        checks += 2;
    }
    outcome(ok, format!("{checks} exact-equality checks on the trained model"))
}

fn ddim_round_trip(fx: &common::Fixture) -> Outcome {
    let mut rng = Rng::new(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a_t = rng.uniform_range(0.01, 0.99);
        let a_prev = a_t + (1.0 - a_t) * rng.uniform_range(0.0, 0.99);
        let s = NoiseSchedule {
            num_train_steps: 2,
            alpha_bar: vec![a_prev, a_t],
            inference_steps: vec![1],
        };
        let z = randn(&[3, 4, 4], &mut rng);
        let eps = randn(&[3, 4, 4], &mut rng);
        let back = ddim_invert_step(&ddim_step(&z, &eps, 1, 0, &s).unwrap(), &eps, 0, 1, &s).unwrap();
        worst = worst.max(back.max_abs_diff(&z).unwrap());
    }
    let sampler = fx.sampler();
    let mut mses = Vec::new();
    for c in 1..=5 {
        for &i in fx.data.indices_of(c).iter().take(2) {
            let img = &fx.data.images[i];
            let chain = sampler.invert_image(img, c).unwrap();
            let first = fx.settings.schedule.first_timestep();
            let rec = sampler.sample_plain(chain.get(first).unwrap(), c).unwrap();
            mses.push(rec.mse(img).unwrap());
        }
    }
    let max_mse = mses.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-10 && max_mse < 1e-2,
        format!(
            "one-step max error {worst:.2e}; 50-step reconstruction MSE max {max_mse:.2e}, mean {:.2e} over {} images",
            mean_se(&mses).0,
            mses.len()
        ),
    )
}

fn adain() -> Outcome {
    let mut rng = Rng::new(404);
    let (mut stats_err, mut idem_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let z = randn(&[3, 16, 16], &mut rng);
        let target = randn(&[3, 16, 16], &mut rng).map(|x| 0.4 * x + 0.3);
        let out = adain_init(&z, &target).unwrap();
        let (a, b) = (channel_stats(&out).unwrap(), channel_stats(&target).unwrap());
        for c in 0..3 {
            stats_err = stats_err.max((a.mean[c] - b.mean[c]).abs()).max((a.std[c] - b.std[c]).abs());
        }
        idem_err = idem_err.max(adain_init(&out, &target).unwrap().max_abs_diff(&out).unwrap());
    }
    outcome(
        stats_err <= 1e-10 && idem_err <= 1e-10,
        format!("stats error {stats_err:.2e}, idempotence error {idem_err:.2e} over 200 cases"),
    )
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = DenoiserConfig::micro();
    let mut rng = Rng::new(606);
    let mut w = ModelWeights::init(&cfg, &mut rng).unwrap();
    for v in w.values_mut() {
        *v += 0.05 * rng.normal();
    }
    let z = randn(&cfg.image_shape(), &mut rng);
    let target = randn(&cfg.image_shape(), &mut rng);
    let (t, cond) = (321, 1);
    let mut grad = vec![0.0; w.num_params()];
    w.loss_and_grad(&z, t, cond, &target, &mut grad).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let samples = 150;
    for _ in 0..samples {
        let i = rng.below(w.num_params());
        let orig = w.values()[i];
        let mut scratch = vec![0.0; grad.len()];
        w.values_mut()[i] = orig + h;
        let lp = w.loss_and_grad(&z, t, cond, &target, &mut scratch).unwrap();
        w.values_mut()[i] = orig - h;
        let lm = w.loss_and_grad(&z, t, cond, &target, &mut scratch).unwrap();
        w.values_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        worst = worst.max((num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("worst relative error {worst:.2e} on {samples} parameters in {secs:.2} s"),
    )
}

fn seeds() -> Vec<u64> {
    (0..20).collect()
}

fn mode_trend(fx: &common::Fixture) -> Outcome {
    let protos = fx.prototypes();
    let ev = fx.evaluator(&protos);
    let cases = fx.cases(false);
    let runs = cycled(cases.len(), &seeds());
    let rows = ev.mode_trend(&cases, &fx.settings.run, &runs).unwrap();
    let (g1, se1) = paired_gap(&rows[0].score_difference, &rows[1].score_difference).unwrap();
    let (g2, se2) = paired_gap(&rows[1].score_difference, &rows[2].score_difference).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| mean_se(&r.score_difference).0).collect();
    let budget_ok = fx.train_seconds.is_none_or(|s| s <= 900.0);
    let trained = fx
        .train_seconds
        .map_or("cached model".to_string(), |s| format!("model trained in {s:.0} s"));
    outcome(
        g1 >= -se1 && g2 >= -se2 && budget_ok,
        format!(
            "score difference concat {:.4} >= conflict-free {:.4} >= conflict-free+stratified {:.4}; gaps {g1:.4}±{se1:.4}, {g2:.4}±{se2:.4} over {} seeds; {trained}",
            means[0], means[1], means[2], runs.len()
        ),
    )
}

fn guidance_trend(fx: &common::Fixture) -> Outcome {
    let protos = fx.prototypes();
    let ev = fx.evaluator(&protos);
    let cases = fx.cases(true);
    let runs = cycled(cases.len(), &seeds());
    let rows = ev
        .guidance_sweep(
            &cases,
            &[7.5],
            &[GuidanceKind::Conflicting, GuidanceKind::ConflictFree],
            &fx.settings.run,
            &runs,
        )
        .unwrap();
    let (c, se_c) = mean_se(&rows[0].alignment);
    let (f, se_f) = mean_se(&rows[1].alignment);
    outcome(
        f > c,
        format!("alignment at scale 7.5 with null positive: conflict-free {f:.4}±{se_f:.4} > conflicting {c:.4}±{se_c:.4} over {} seeds", runs.len()),
    )
}

fn lambda_trend(fx: &common::Fixture) -> Outcome {
    let protos = fx.prototypes();
    let ev = fx.evaluator(&protos);
    let cases = fx.cases(false);
    let runs = cycled(cases.len(), &seeds());
    let grid = [0.0, 0.33, 0.5, 0.67, 1.0];
    let base = fx.settings.run.clone();
    let rows = ev.lambda_sweep(&cases, &grid, &base, &runs).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| mean_se(&r.alignment).0).collect();
    let rho = spearman(&grid, &means).unwrap();
    outcome(
        means[4] > means[0] && rho > 0.0,
        format!(
            "alignment by lambda_p {:?}; lambda_p=1 {:.4} > lambda_p=0 {:.4}; Spearman {rho:.3} over {} seeds",
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            means[4],
            means[0],
            runs.len()
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_determinism(fx: &common::Fixture) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let checkpoint = fx.settings.checkpoint.as_ref().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "model.checkpoint = {}\nrun.prompts = 0,1\nrun.images = 2\ntrain.steps = 10\ndata.per_class = 16\n",
            checkpoint.display()
        ),
    )
    .unwrap();
    let invocations: [&[&str]; 6] = [
        &["make-data"],
        &["train"],
        &["invert"],
        &["generate", "--seed", "7"],
        &["ablate", "--set", "run.prompts=0"],
        &["analyze", "--set", "run.prompts=0"],
    ];
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let out = tmp.path().join(rep);
        for args in invocations {
            let status = Command::new(env!("CARGO_BIN_EXE_strata"))
                .args(args)
                .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .env_remove("STRATA_OUT_DIR")
                .output()
                .unwrap();
            if status.status.code() != Some(0) {
                return outcome(
                    false,
                    format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&status.stderr)),
                );
            }
        }
        trees.push(tree(&out));
    }
    let files = trees[0].len();
    let bytes: usize = trees[0].values().map(Vec::len).sum();
    outcome(
        trees[0] == trees[1] && files > 0,
        format!("{} commands run twice: {files} files, {bytes} bytes, trees identical = {}", invocations.len(), trees[0] == trees[1]),
    )
}

fn main() {
    // Accept and ignore libtest flags such as `--nocapture` or filters.
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n, name, f: &dyn Fn() -> Outcome| {
        let o = f();
        println!("{} [{n:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "attention identities", &attention_identities);
    record(2, "concatenation decomposition", &decomposition_identity);
    let fx = common::fixture();
    record(3, "guidance algebra", &|| guidance_algebra(&fx));
    record(4, "DDIM inversion round trip", &|| ddim_round_trip(&fx));
    record(5, "AdaIN statistics", &adain);
    record(6, "gradient check", &gradient_check);
    record(7, "score-difference mode trend", &|| mode_trend(&fx));
    record(8, "conflict-free guidance alignment", &|| guidance_trend(&fx));
    record(9, "prompt-weight alignment trend", &|| lambda_trend(&fx));
    record(10, "CLI determinism", &|| cli_determinism(&fx));
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed ({:.0} s)",
        results.len() - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
