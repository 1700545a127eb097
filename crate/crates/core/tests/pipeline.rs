//! End-to-end behavior of training, checkpoints, campaigns and pools on
//! small toy fixtures.

use std::collections::BTreeSet;

use opendg::datasets::{make_lodo_splits, synth_toy_suite, ClassSplit, DomainSuite, SplitSpec, UNKNOWN_LABEL};
use opendg::encoders::{BackendDescriptor, EncoderBackend, MockBackend};
use opendg::engine::{load_checkpoint, predict, save_checkpoint, train, TrainConfig, TrainOptions};
use opendg::evalkit::{
    frechet_distance, frechet_matrix, openness_sweep, run_lodo, split_open_pool, write_report_csv, LodoSettings,
    Partition, PoolSettings,
};
use opendg::model::XhatMode;
use opendg::objectives::total_loss;
use opendg::opengen::{build_open_pool, make_stub_generator, OpenSample, PoolRequest};
use opendg::tape::Tape;
use opendg::OdgError;

fn backend() -> MockBackend {
    MockBackend::new(BackendDescriptor { d_v: 8, d_tok: 8, d_t: 8, ..Default::default() }).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 4, steps_per_epoch: Some(3), ..TrainConfig::default() }
}

/// Three domains, four classes; the last class is open in the target only.
fn fixture() -> (DomainSuite, Vec<SplitSpec>) {
    let suite = synth_toy_suite(3, 3, 4, 2, 32).unwrap();
    let cs = ClassSplit::from_json(r#"{"sources": [[0,1,2],[0,1,2]]}"#).unwrap();
    let splits = make_lodo_splits(&suite, Some(&cs)).unwrap();
    (suite, splits)
}

fn pool(split: &SplitSpec, suite: &DomainSuite, cfg: &TrainConfig) -> Vec<OpenSample> {
    split_open_pool(&make_stub_generator(1), split, suite, cfg, &PoolSettings::default(), 32).unwrap()
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted_run() {
    let (suite, splits) = fixture();
    let (b, cfg) = (backend(), small_cfg());
    let p = pool(&splits[0], &suite, &cfg);
    let full = train(&splits[0], &suite, &p, &b, &cfg, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    let log = dir.path().join("log.jsonl");
    let first = TrainOptions {
        checkpoint_path: Some(ck.clone()),
        log_path: Some(log.clone()),
        stop_after_epochs: Some(1),
        ..TrainOptions::default()
    };
    let part = train(&splits[0], &suite, &p, &b, &cfg, &first).unwrap();
    assert_eq!(part.checkpoint.epochs_done, 1);
    let resumed = TrainOptions {
        resume: Some(load_checkpoint(&ck).unwrap()),
        log_path: Some(log.clone()),
        ..TrainOptions::default()
    };
    let rest = train(&splits[0], &suite, &p, &b, &cfg, &resumed).unwrap();
    assert_eq!(rest.checkpoint, full.checkpoint);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), full.log.len());
}

#[test]
fn resume_rejects_a_different_configuration() {
    let (suite, splits) = fixture();
    let (b, cfg) = (backend(), small_cfg());
    let p = pool(&splits[0], &suite, &cfg);
    let opts = TrainOptions { stop_after_epochs: Some(1), ..TrainOptions::default() };
    let part = train(&splits[0], &suite, &p, &b, &cfg, &opts).unwrap();
    let other = TrainConfig { base_lr: 0.5, ..cfg };
    let e = train(&splits[0], &suite, &p, &b, &other, &TrainOptions { resume: Some(part.checkpoint), ..Default::default() })
        .unwrap_err();
    assert!(matches!(e, OdgError::Checkpoint(_)), "{e}");
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let (suite, splits) = fixture();
    let (b, cfg) = (backend(), TrainConfig { epochs: 1, ..small_cfg() });
    let out = train(&splits[1], &suite, &pool(&splits[1], &suite, &cfg), &b, &cfg, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), out.checkpoint);

    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"epochs_done\": 1", "\"epochs_done\": 2", 1);
    assert_ne!(tampered, text);
    std::fs::write(&path, tampered).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(OdgError::Checkpoint(_))));

    std::fs::write(&path, r#"{"format": "something-else", "version": 1}"#).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(OdgError::Checkpoint(_))));
    assert!(load_checkpoint(&dir.path().join("missing.json")).is_err());
}

#[test]
fn missing_open_pool_is_a_clear_error() {
    let (suite, splits) = fixture();
    let e = train(&splits[0], &suite, &[], &backend(), &small_cfg(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(e, OdgError::Data(ref m) if m.contains("open pool")), "{e}");
}

#[test]
fn every_trainable_tensor_receives_gradient() {
    let (suite, splits) = fixture();
    let b = backend();
    for (xhat, expect_latent) in [(XhatMode::Differential, true), (XhatMode::Off, false)] {
        let cfg = TrainConfig { xhat, ..small_cfg() };
        let labels = opendg::engine::classifier_labels(&splits[0], &cfg);
        let model = opendg::engine::init_model(&b, &labels, &cfg).unwrap();
        // one same-class pair per label across the two source domains
        let real = splits[0].real_pool(&suite);
        let mut samples = Vec::new();
        for l in [0usize, 1] {
            for d in &splits[0].sources {
                samples.extend(real.iter().find(|(s, i)| *i == l && &s.domain == d).copied());
            }
        }
        assert_eq!(samples.len(), 4);
        let visuals: Vec<_> = samples.iter().map(|(s, _)| opendg::encoders::visual_encode(&b, &s.image).unwrap()).collect();
        let batch: Vec<_> = samples
            .iter()
            .zip(&visuals)
            .map(|((s, l), v)| opendg::objectives::LabeledInput {
                input: opendg::model::ModelInput { image: &s.image, visual: v, domain: Some(&s.domain) },
                label: *l,
                domain: &s.domain,
            })
            .collect();
        let mut tape = Tape::new();
        let obj = total_loss(&mut tape, &model, &b, &batch, cfg.tau, true).unwrap();
        let grads = tape.backward(obj.total);
        let g = model.collect_grads(&obj.vars, &grads);
        let mask = model.trainable_mask();
        let names = model.tensor_names();
        for ((gi, m), name) in g.iter().zip(&mask).zip(&names) {
            let nonzero = gi.iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, *m, "{xhat:?}: {name}");
        }
        assert_eq!(mask[4..].iter().all(|m| *m), expect_latent);
    }
}

#[test]
fn lodo_report_structure_and_means() {
    let (suite, _) = fixture();
    let cs = ClassSplit::from_json(r#"{"sources": [[0,1,2],[0,1,2]]}"#).unwrap();
    let b = backend();
    let settings = LodoSettings { train: TrainConfig { epochs: 1, ..small_cfg() }, n_seeds: 2, ..LodoSettings::default() };
    let r = run_lodo(&suite, Some(&cs), &b, &make_stub_generator(0), &settings).unwrap();
    assert_eq!(r.targets.len(), 3);
    assert_eq!(r.runs.len(), 6);
    assert_eq!(r.seeds, vec![0, 1]);
    for t in &r.targets {
        let rs: Vec<_> = r.runs.iter().filter(|x| x.target == t.target).collect();
        let acc = rs.iter().map(|x| x.acc_closed).sum::<f64>() / rs.len() as f64;
        assert_eq!(t.acc_closed, acc);
        let h = t.h_score.unwrap();
        assert!((0.0..=100.0).contains(&h));
    }
    let mean_acc = r.targets.iter().map(|t| t.acc_closed).sum::<f64>() / 3.0;
    assert_eq!(r.mean.acc_closed, mean_acc);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("r.csv");
    write_report_csv(&r, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn closed_set_mode_reports_accuracy_only() {
    let (suite, _) = fixture();
    let b = backend();
    let settings = LodoSettings {
        train: TrainConfig { epochs: 1, ..small_cfg() },
        n_seeds: 1,
        closed_set: true,
        ..LodoSettings::default()
    };
    let r = run_lodo(&suite, None, &b, &make_stub_generator(0), &settings).unwrap();
    assert!(r.closed_set);
    assert!(r.targets.iter().all(|t| t.acc_open.is_none() && t.h_score.is_none()));
    assert!(r.mean.h_score.is_none());
}

#[test]
fn openness_sweep_points_and_degenerate_partitions() {
    let (suite, splits) = fixture();
    let (b, cfg) = (backend(), TrainConfig { epochs: 1, ..small_cfg() });
    let split = &splits[2];
    let out = train(split, &suite, &pool(split, &suite, &cfg), &b, &cfg, &TrainOptions::default()).unwrap();
    let targets = split.target_samples(&suite);
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let k = &split.known_labels;
    let open: Vec<&str> = split.target_open_labels.iter().map(String::as_str).collect();
    let parts = vec![
        Partition { known: set(&[&k[0], &k[1], &k[2]]), unknown: set(&open) },
        Partition { known: set(&[&k[0], &k[1]]), unknown: set(&[&[k[2].as_str()][..], &open].concat()) },
        Partition { known: set(&[&k[0]]), unknown: set(&[&[k[1].as_str(), k[2].as_str()][..], &open].concat()) },
    ];
    let pts = openness_sweep(&out.checkpoint, &b, split, &targets, &parts).unwrap();
    assert_eq!(pts.len(), 3);
    assert!(pts.windows(2).all(|w| w[0].openness < w[1].openness));
    let bad = Partition { known: set(&[&k[0]]), unknown: BTreeSet::new() };
    assert!(openness_sweep(&out.checkpoint, &b, split, &targets, &[bad]).is_err());
}

#[test]
fn max_probability_rule_for_closed_set_models() {
    let (suite, splits) = fixture();
    let b = backend();
    let cfg = TrainConfig { epochs: 1, unknown_class: false, msp_threshold: 1.0, ..small_cfg() };
    let out = train(&splits[0], &suite, &[], &b, &cfg, &TrainOptions::default()).unwrap();
    assert!(!out.checkpoint.labels.iter().any(|l| l == UNKNOWN_LABEL));
    let img = &splits[0].target_samples(&suite)[0].image;
    let p = predict(&out.checkpoint, &b, img, None, cfg.tau).unwrap();
    assert_eq!(p.label, UNKNOWN_LABEL);
    assert_eq!(p.index, splits[0].unknown_index());
}

#[test]
fn frechet_matrix_is_symmetric_with_zero_diagonal() {
    let (suite, _) = fixture();
    let (names, m) = frechet_matrix(&backend(), &suite).unwrap();
    assert_eq!(names, suite.domains);
    for i in 0..m.len() {
        assert_eq!(m[i][i], 0.0);
        for j in 0..m.len() {
            assert_eq!(m[i][j], m[j][i]);
            assert!(m[i][j] >= 0.0);
        }
    }
    let a: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
    let c: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] * 2.0 + 1.0, v[1] - 0.5]).collect();
    assert!((frechet_distance(&a, &c).unwrap() - frechet_distance(&c, &a).unwrap()).abs() < 1e-6);
    assert!(frechet_distance(&a, &[vec![f64::NAN, 0.0]]).is_err());
}

#[test]
fn open_pool_cache_hits_and_records_prompt_mode() {
    let dir = tempfile::tempdir().unwrap();
    let gen = make_stub_generator(4);
    let domains = vec!["art".to_string(), "photo".to_string()];
    let known = vec!["cat".to_string(), "dog".to_string()];
    let req = PoolRequest {
        domains: &domains,
        known: &known,
        count: 40,
        seed: 2,
        image_size: 32,
        pp_only: true,
        threshold: 0.2,
        template: "a {domain} of an unknown class",
    };
    let (p1, m1) = build_open_pool(&gen, &req, Some(dir.path())).unwrap();
    assert!(m1.domains.values().all(|d| !d.cache_hit && d.accepted >= 36 && d.negatives.is_empty()));
    assert!(dir.path().join("art/2/00000.png").is_file());
    assert!(dir.path().join("photo/2/manifest.json").is_file());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("pool.json")).unwrap()).unwrap();
    assert_eq!(manifest["pp_only"], true);

    let (p2, m2) = build_open_pool(&gen, &req, Some(dir.path())).unwrap();
    assert!(m2.domains.values().all(|d| d.cache_hit));
    assert_eq!(p1.samples.len(), p2.samples.len());
    assert!(p1.samples.iter().zip(&p2.samples).all(|(a, b)| a.image == b.image && a.id == b.id));

    let with_neg = PoolRequest { pp_only: false, ..req };
    let (_, m3) = build_open_pool(&gen, &with_neg, Some(dir.path())).unwrap();
    assert!(m3.domains.values().all(|d| !d.cache_hit && d.negatives.len() == 2));
}

#[test]
fn mock_backend_is_deterministic_per_seed() {
    let a = backend();
    let b = backend();
    assert_eq!(a.param_digest(), b.param_digest());
    let c = MockBackend::new(BackendDescriptor { d_v: 8, d_tok: 8, d_t: 8, seed: 1, ..Default::default() }).unwrap();
    assert_ne!(a.param_digest(), c.param_digest());
}
