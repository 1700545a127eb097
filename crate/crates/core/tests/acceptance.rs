//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary always prints
//! in order. Exits nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use opendg::config::RunConfig;
use opendg::datasets::{make_lodo_splits, DomainSuite, SplitSpec, UNKNOWN_LABEL};
use opendg::encoders::{visual_encode, BackendDescriptor, EncoderBackend, MockBackend};
use opendg::engine::{init_model, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainOptions};
use opendg::evalkit::{
    evaluate_split, frechet_distance, h_score, run_lodo, split_open_pool, write_report_json, xhat_cosine_diagnostic,
    DiagnosticItem, EvalReport, LodoSettings, PoolSettings,
};
use opendg::gradcheck::{check_gradients_sampled, GradCheck};
use opendg::model::{ModelInput, ModelVars};
use opendg::objectives::{batch_losses, LabeledInput, Posterior};
use opendg::opengen::{filter_pool, grayscale_entropy, make_stub_generator, GenRequest, GeneratorBackend};
use opendg::pixels::Image;
use opendg::tape::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradients
// ---------------------------------------------------------------------------

/// Softer than the training default so finite differences stay well scaled.
const TAU: f64 = 0.07;

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let backend = MockBackend::new(BackendDescriptor { d_v: 32, d_tok: 32, d_t: 32, seed: 3, ..Default::default() })
        .map_err(err)?;
    let suite = opendg::datasets::synth_toy_suite(1, 2, 3, 1, 32).map_err(err)?;
    let labels: Vec<String> = suite.classes().into_iter().chain([UNKNOWN_LABEL.to_string()]).collect();
    let mut model = init_model(&backend, &labels, &TrainConfig::default()).map_err(err)?;
    // move off the zero-bias ReLU kinks of the initial point
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in model.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let class0 = &labels[0];
    let picks: Vec<_> = suite.samples.iter().filter(|s| &s.label == class0).collect();
    if picks.len() < 2 || picks[0].domain == picks[1].domain {
        return Err("gradient fixture needs one class in two domains".into());
    }
    let visuals: Vec<_> = picks.iter().map(|s| visual_encode(&backend, &s.image)).collect::<Result<_, _>>().map_err(err)?;
    let batch: Vec<LabeledInput> = picks
        .iter()
        .zip(&visuals)
        .map(|(s, v)| LabeledInput {
            input: ModelInput { image: &s.image, visual: v, domain: Some(&s.domain) },
            label: 0,
            domain: &s.domain,
        })
        .collect();
    let inputs: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let n_layers = model.upsampler.layers.len();
    let names = model.tensor_names();
    let cfg = GradCheck::default();
    let mut worst = BTreeMap::new();
    for (term, use_sem) in [("L_con", false), ("L_sem", true)] {
        let report = check_gradients_sampled(&inputs, cfg, 12, |tape, vars| {
            let mv = ModelVars::from_slice(vars, n_layers)?;
            let l = batch_losses(tape, &model, &mv, &backend, &batch, TAU)?;
            Ok(if use_sem { l.sem } else { l.con })
        })
        .map_err(err)?;
        if use_sem && report.inputs[..4].iter().any(|r| r.analytic_norm == 0.0) {
            return Err("L_sem has no gradient on the prompt parameters".into());
        }
        if !use_sem && report.inputs.iter().any(|r| r.analytic_norm == 0.0) {
            let dead: Vec<&String> =
                report.inputs.iter().filter(|r| r.analytic_norm == 0.0).map(|r| &names[r.index]).collect();
            return Err(format!("L_con has no gradient on {dead:?}"));
        }
        for r in &report.inputs {
            if r.rel_error > cfg.rel_tol {
                return Err(format!("{term} d/d{}: rel error {:.2e}", names[r.index], r.rel_error));
            }
        }
        worst.insert(term, report.max_rel_error());
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!(
            "max rel error L_con {:.1e}, L_sem {:.1e} over {} tensors; {secs:.1}s",
            worst["L_con"],
            worst["L_sem"],
            inputs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Posterior
// ---------------------------------------------------------------------------

fn posterior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(2..12);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let p = Posterior::from_logits(&logits).map_err(err)?;
        let sum: f64 = p.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("probabilities sum to {sum}"));
        }
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let q = Posterior::from_logits(&shifted).map_err(err)?;
        if p.probs.iter().zip(&q.probs).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(format!("shift by {c} changed the posterior"));
        }
        let u = Posterior::from_similarities(&vec![rng.gen_range(-1.0..1.0); n], 0.01).map_err(err)?;
        if u.probs.iter().any(|v| (v - 1.0 / n as f64).abs() > 1e-12) {
            return Err("equal similarities did not give a uniform posterior".into());
        }
    }
    let two = Posterior::from_similarities(&[1.0, 0.0], 1.0).map_err(err)?;
    let oracle = [1.0 / (1.0 + (-1.0f64).exp()), 1.0 / (1.0 + 1.0f64.exp())];
    check(
        (two.probs[0] - oracle[0]).abs() < 1e-12
            && (two.probs[1] - oracle[1]).abs() < 1e-12
            && (two.probs[0] - 0.7311).abs() < 5e-5
            && (two.probs[1] - 0.2689).abs() < 5e-5,
        format!("two-class softmax ({:.4}, {:.4}); 200 random normalization/shift/uniform cases", two.probs[0], two.probs[1]),
    )
}

// ---------------------------------------------------------------------------
// 3. Frozen encoders
// ---------------------------------------------------------------------------

fn frozen_encoders() -> Outcome {
    let backend = MockBackend::new(BackendDescriptor { d_v: 16, d_tok: 16, d_t: 16, ..Default::default() }).map_err(err)?;
    let suite = opendg::datasets::synth_toy_suite(5, 2, 3, 4, 32).map_err(err)?;
    let splits = make_lodo_splits(&suite, None).map_err(err)?;
    let cfg = TrainConfig { epochs: 10, steps_per_epoch: Some(20), batch_size: 4, ..TrainConfig::default() };
    let pool = split_open_pool(&make_stub_generator(0), &splits[0], &suite, &cfg, &PoolSettings::default(), 32)
        .map_err(err)?;
    let before = backend.param_digest();
    let out = train(&splits[0], &suite, &pool, &backend, &cfg, &TrainOptions::default()).map_err(err)?;
    let after = backend.param_digest();
    let moved = init_model(&backend, &out.checkpoint.labels, &cfg).map_err(err)? != out.checkpoint.model;
    check(
        before == after && out.log.len() == 200 && moved,
        format!("{} steps, backend digest {}..{} unchanged: {}", out.log.len(), &before[..8], &after[..8], before == after),
    )
}

// ---------------------------------------------------------------------------
// 4. Metrics
// ---------------------------------------------------------------------------

fn metrics() -> Outcome {
    for a in [0.0, 12.5, 50.0, 99.0, 100.0] {
        if (h_score(a, a) - a).abs() > 1e-12 {
            return Err(format!("h({a},{a}) = {}", h_score(a, a)));
        }
    }
    let h0 = h_score(100.0, 0.0);
    let h = h_score(80.0, 60.0);
    let oracle = 2.0 * 80.0 * 60.0 / 140.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let same = frechet_distance(&a, &a).map_err(err)?;
    let n1 = Normal::new(0.0, 1.0).unwrap();
    let n2 = Normal::new(1.0, 2.0).unwrap();
    let x: Vec<Vec<f64>> = (0..10_000).map(|_| vec![n1.sample(&mut rng)]).collect();
    let y: Vec<Vec<f64>> = (0..10_000).map(|_| vec![n2.sample(&mut rng)]).collect();
    let g = frechet_distance(&x, &y).map_err(err)?;
    // closed form for 1-D Gaussians: (m1 - m2)^2 + (s1 - s2)^2
    let g_oracle = (0.0f64 - 1.0).powi(2) + (1.0f64 - 2.0).powi(2);
    check(
        h0 == 0.0 && (h - oracle).abs() < 1e-9 && (h - 68.571).abs() < 0.01 && same.abs() < 1e-6 && (g / g_oracle - 1.0).abs() < 0.05,
        format!("h(80,60)={h:.3}, h(100,0)={h0}, F(A,A)={same:.1e}, F(N(0,1),N(1,4))={g:.3} vs {g_oracle}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Entropy filter
// ---------------------------------------------------------------------------

fn entropy_filter() -> Outcome {
    let constants: Vec<(String, String, Image)> = [0.0f32, 0.3, 1.0]
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("c{i}"), "art".to_string(), Image::from_fn(32, 32, |_, _| [*v; 3])))
        .collect();
    let rejected = filter_pool(constants, 0.2).map_err(err)?;
    let two_level = Image::from_fn(32, 32, |_, x| if x < 16 { [0.0; 3] } else { [1.0; 3] });
    let e = grayscale_entropy(&two_level);
    let gen = make_stub_generator(0);
    let req = GenRequest {
        positive: "a photo of an unknown class".into(),
        negatives: vec!["a photo of a cat".into()],
        count: 100,
        seed: 9,
        domain: "photo".into(),
        image_size: 32,
    };
    let images = gen.generate(&req).map_err(err)?;
    let named = images.into_iter().enumerate().map(|(i, img)| (format!("s{i}"), "photo".to_string(), img)).collect();
    let pool = filter_pool(named, 0.2).map_err(err)?;
    let rate = pool.acceptance_rate();
    check(
        rejected.samples.is_empty() && (e - 0.125).abs() < 1e-6 && pool.records.len() == 100 && rate > 0.9,
        format!("constants accepted {}, two-level entropy {e:.6}, stub pass rate {:.0}%", rejected.samples.len(), 100.0 * rate),
    )
}

// ---------------------------------------------------------------------------
// Toy campaign shared by 6, 7 and 9
// ---------------------------------------------------------------------------

struct Campaign {
    cfg: RunConfig,
    suite: DomainSuite,
    splits: Vec<SplitSpec>,
    backend: std::sync::Arc<dyn EncoderBackend>,
    odg: EvalReport,
    msp: EvalReport,
    dir: tempfile::TempDir,
    seconds: f64,
}

fn campaign() -> Result<Campaign, String> {
    let cfg = RunConfig::toy();
    let suite = cfg.load_suite().map_err(err)?;
    let class_split = cfg.class_split().map_err(err)?;
    let splits = make_lodo_splits(&suite, class_split.as_ref()).map_err(err)?;
    let backend = cfg.build_backend().map_err(err)?;
    let generator = cfg.build_generator().map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let t0 = Instant::now();
    let odg = run_lodo(
        &suite,
        class_split.as_ref(),
        backend.as_ref(),
        generator.as_ref(),
        &cfg.lodo_settings(Some(dir.path().join("odg"))),
    )
    .map_err(err)?;
    let mut base = cfg.lodo_settings(Some(dir.path().join("msp")));
    base.train.unknown_class = false;
    let msp = run_lodo(&suite, class_split.as_ref(), backend.as_ref(), generator.as_ref(), &base).map_err(err)?;
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Campaign { cfg, suite, splits, backend, odg, msp, dir, seconds })
}

fn toy_experiment(c: &Campaign) -> Outcome {
    let (h, hb) = (c.odg.mean.h_score.unwrap_or(0.0), c.msp.mean.h_score.unwrap_or(0.0));
    let per: Vec<String> = c
        .odg
        .targets
        .iter()
        .zip(&c.msp.targets)
        .map(|(a, b)| format!("{} {:.1}/{:.1}", a.target, a.h_score.unwrap_or(0.0), b.h_score.unwrap_or(0.0)))
        .collect();
    check(
        h >= hb + 5.0 && c.seconds < 600.0 && c.odg.seeds.len() == 3,
        format!(
            "mean H {h:.2} vs max-prob baseline {hb:.2} over seeds {:?} ({}); {:.0}s",
            c.odg.seeds,
            per.join(", "),
            c.seconds
        ),
    )
}

fn split_ckpt(c: &Campaign, arm: &str, seed: u64, target: &str) -> Result<Checkpoint, String> {
    load_checkpoint(&c.dir.path().join(arm).join("splits").join(format!("seed{seed}-{target}.ckpt.json"))).map_err(err)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn sem_diagnostic(c: &Campaign) -> Outcome {
    let split = &c.splits[c.splits.len() - 1];
    let pool_settings = c.cfg.pool_settings();
    let generator = c.cfg.build_generator().map_err(err)?;
    let (mut with_known, mut without_known, mut with_open, mut without_open) = (vec![], vec![], vec![], vec![]);
    for &seed in &c.odg.seeds {
        let with = split_ckpt(c, "odg", seed, &split.target)?;
        let cfg = TrainConfig { use_sem: false, seed, ..c.cfg.train.clone() };
        let pool = split_open_pool(generator.as_ref(), split, &c.suite, &cfg, &pool_settings, 32).map_err(err)?;
        let without = train(split, &c.suite, &pool, c.backend.as_ref(), &cfg, &TrainOptions::default()).map_err(err)?;
        let mut items: Vec<DiagnosticItem> = split
            .real_pool(&c.suite)
            .into_iter()
            .map(|(s, _)| DiagnosticItem { label: &s.label, domain: &s.domain, image: &s.image })
            .collect();
        items.extend(pool.iter().map(|o| DiagnosticItem { label: UNKNOWN_LABEL, domain: &o.domain, image: &o.image }));
        let a = xhat_cosine_diagnostic(&with, c.backend.as_ref(), &items, &split.augmented_labels).map_err(err)?;
        let b =
            xhat_cosine_diagnostic(&without.checkpoint, c.backend.as_ref(), &items, &split.augmented_labels).map_err(err)?;
        let known = |m: &BTreeMap<String, f64>| mean(&split.known_labels.iter().filter_map(|k| m.get(k).copied()).collect::<Vec<_>>());
        with_known.push(known(&a));
        without_known.push(known(&b));
        with_open.push(a.get(UNKNOWN_LABEL).copied().ok_or("no pseudo-unknown cosine")?);
        without_open.push(b.get(UNKNOWN_LABEL).copied().ok_or("no pseudo-unknown cosine")?);
    }
    let (wk, ok, wo, oo) = (mean(&with_known), mean(&without_known), mean(&with_open), mean(&without_open));
    check(
        wk > ok && wo > oo,
        format!("target {}: known {wk:.5} vs {ok:.5}, pseudo-unknown {wo:.5} vs {oo:.5} (with vs without)", split.target),
    )
}

fn determinism(c: &Campaign) -> Outcome {
    let split = &c.splits[0];
    let seed = c.odg.seeds[0];
    let cfg = TrainConfig { seed, ..c.cfg.train.clone() };
    let generator = c.cfg.build_generator().map_err(err)?;
    let pool = split_open_pool(generator.as_ref(), split, &c.suite, &cfg, &c.cfg.pool_settings(), 32).map_err(err)?;
    let out = train(split, &c.suite, &pool, c.backend.as_ref(), &cfg, &TrainOptions::default()).map_err(err)?;
    let re = c.dir.path().join("rerun");
    std::fs::create_dir_all(&re).map_err(err)?;
    save_checkpoint(&out.checkpoint, &re.join("ckpt.json")).map_err(err)?;
    let eval = evaluate_split(&out.checkpoint, c.backend.as_ref(), split, &c.suite, seed).map_err(err)?;
    std::fs::write(re.join("eval.json"), serde_json::to_vec_pretty(&eval).map_err(err)?).map_err(err)?;
    let stem = format!("seed{seed}-{}", split.target);
    let orig = c.dir.path().join("odg").join("splits");
    let same = |a: &Path, b: &Path| -> Result<bool, String> { Ok(std::fs::read(a).map_err(err)? == std::fs::read(b).map_err(err)?) };
    let ck = same(&orig.join(format!("{stem}.ckpt.json")), &re.join("ckpt.json"))?;
    let ev = same(&orig.join(format!("{stem}.json")), &re.join("eval.json"))?;
    // a second full campaign report from the stored runs must serialize identically
    let r1 = c.dir.path().join("r1.json");
    let r2 = c.dir.path().join("r2.json");
    write_report_json(&c.odg, &r1).map_err(err)?;
    let reread: EvalReport = serde_json::from_slice(&std::fs::read(&r1).map_err(err)?).map_err(err)?;
    write_report_json(&reread, &r2).map_err(err)?;
    let rep = same(&r1, &r2)?;
    check(ck && ev && rep, format!("checkpoint identical: {ck}, split report identical: {ev}, report round-trip identical: {rep}"))
}

// ---------------------------------------------------------------------------
// 8. Ablation arms
// ---------------------------------------------------------------------------

fn ablations() -> Outcome {
    let base = RunConfig::toy();
    let suite = base.load_suite().map_err(err)?;
    let class_split = base.class_split().map_err(err)?;
    let backend = base.build_backend().map_err(err)?;
    let generator = base.build_generator().map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let arms = ["no-sem", "no-xhat", "manual-xhat", "pp-only", "b3-gaussian-init", "dom-front", "dom-middle", "dom-end"];
    let mut configs = BTreeSet::new();
    let mut rows = Vec::new();
    for arm in arms {
        let mut train_cfg = TrainConfig { epochs: 2, ..base.train.clone() };
        train_cfg.apply_ablation(arm).map_err(err)?;
        let settings = LodoSettings { train: train_cfg, n_seeds: 1, out_dir: Some(dir.path().join(arm)), ..base.lodo_settings(None) };
        let report = run_lodo(&suite, class_split.as_ref(), backend.as_ref(), generator.as_ref(), &settings)
            .map_err(|e| format!("{arm}: {e}"))?;
        let path = dir.path().join(arm).join("report.json");
        write_report_json(&report, &path).map_err(err)?;
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&path).map_err(err)?).map_err(err)?;
        if back.runs.len() != 3 {
            return Err(format!("{arm}: {} split runs", back.runs.len()));
        }
        configs.insert(serde_json::to_string(&back.config).map_err(err)?);
        rows.push(format!("{arm} H {:.1}", back.mean.h_score.unwrap_or(0.0)));
    }
    check(configs.len() == arms.len(), format!("{} arms, {} distinct configs: {}", arms.len(), configs.len(), rows.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient suite", gradients()),
        ("2 posterior suite", posterior()),
        ("3 frozen encoders", frozen_encoders()),
        ("4 metric oracles", metrics()),
        ("5 entropy filter", entropy_filter()),
    ];
    match campaign() {
        Ok(c) => {
            results.push(("6 toy open-domain experiment", toy_experiment(&c)));
            results.push(("7 consistency-loss diagnostic", sem_diagnostic(&c)));
            results.push(("8 ablation arms", ablations()));
            results.push(("9 determinism", determinism(&c)));
        }
        Err(e) => {
            for name in ["6 toy open-domain experiment", "7 consistency-loss diagnostic", "9 determinism"] {
                results.push((name, Err(format!("campaign failed: {e}"))));
            }
            results.push(("8 ablation arms", ablations()));
        }
    }
    results.sort_by_key(|(n, _)| n.split(' ').next().and_then(|k| k.parse::<u32>().ok()));
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
