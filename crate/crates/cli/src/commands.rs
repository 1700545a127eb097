use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use opendg::config::RunConfig;
use opendg::datasets::{make_lodo_splits, DomainSuite, SplitSpec, UNKNOWN_LABEL};
use opendg::encoders::{build_backend, EncoderBackend};
use opendg::engine::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainOptions};
use opendg::evalkit::{
    evaluate_split, frechet_matrix, openness_sweep, plot_bars, plot_curve, run_lodo, split_open_pool,
    split_open_pool_with_manifest, split_pool_cache, write_report_csv, write_report_json, xhat_cosine_diagnostic,
    DiagnosticItem, Partition,
};
use opendg::OdgError;
use tracing::{info, warn};

use crate::{Command, Common};

/// An error caused by the invocation rather than by a runtime failure.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// 1 for user errors, 2 for runtime failures.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(o) = cause.downcast_ref::<OdgError>() {
            return if o.is_user_error() { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateOpen { common, target } => generate_open(&common, target.as_deref()),
        Command::Train { common, target, resume, stop_after } => cmd_train(&common, &target, resume.as_deref(), stop_after),
        Command::Evaluate { common, checkpoint } => evaluate(&common, &checkpoint),
        Command::Lodo { common, seeds, closed_set } => lodo(&common, seeds, closed_set),
        Command::Diagnose { common, checkpoint, compare } => diagnose(&common, &checkpoint, compare.as_deref()),
    }
}

/// Config file (or the toy preset) with command-line overrides applied.
fn effective_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) if !p.is_file() => return Err(user(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    for a in &c.ablate {
        cfg.train.apply_ablation(a)?;
    }
    if let Some(p) = c.dom_token_position {
        cfg.train.dom_token_position = p;
    }
    if c.pp_only {
        cfg.train.pp_only = true;
    }
    if let Some(t) = c.entropy_threshold {
        cfg.opengen.threshold = t;
    }
    if let Some(n) = c.count {
        cfg.opengen.count = Some(n);
    }
    if let Some(d) = &c.cache {
        cfg.opengen.cache = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.eval.out_dir.clone())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Echo the default-expanded config into an output directory.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()?).with_context(|| format!("cannot write {}", p.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("cannot write {}", path.display()))
}

fn splits(cfg: &RunConfig, suite: &DomainSuite, closed_set: bool) -> Result<Vec<SplitSpec>> {
    let cs = if closed_set { None } else { cfg.class_split()? };
    Ok(make_lodo_splits(suite, cs.as_ref())?)
}

fn find_split(splits: Vec<SplitSpec>, target: &str) -> Result<SplitSpec> {
    let names: Vec<String> = splits.iter().map(|s| s.target.clone()).collect();
    splits
        .into_iter()
        .find(|s| s.target == target)
        .ok_or_else(|| user(format!("unknown target domain `{target}`; expected one of {}", names.join(", "))))
}

fn image_size(suite: &DomainSuite) -> usize {
    suite.samples.first().map(|s| s.image.height()).unwrap_or(0)
}

fn require_cache(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.cache_root().ok_or_else(|| {
        user("no open-pool cache configured; set `opengen.cache`, pass --cache or export OPENDG_CACHE")
    })
}

fn generate_open(c: &Common, target: Option<&str>) -> Result<()> {
    let cfg = effective_config(c)?;
    let cache = require_cache(&cfg)?;
    let suite = cfg.load_suite()?;
    let mut todo = splits(&cfg, &suite, cfg.eval.closed_set)?;
    if let Some(t) = target {
        todo = vec![find_split(todo, t)?];
    }
    let generator = cfg.build_generator()?;
    let pool = cfg.pool_settings();
    echo_config(&cfg, &cache)?;
    for split in &todo {
        let (_, m) =
            split_open_pool_with_manifest(generator.as_ref(), split, &suite, &cfg.train, &pool, image_size(&suite))?;
        let rate = 100.0 * m.accepted as f64 / m.generated.max(1) as f64;
        let hit = m.domains.values().all(|d| d.cache_hit);
        println!(
            "holdout {}: {}/{} accepted ({rate:.1}%){} -> {}",
            split.target,
            m.accepted,
            m.generated,
            if hit { ", cached" } else { "" },
            split_pool_cache(&cache, &split.target).join("pool.json").display()
        );
    }
    Ok(())
}

fn cmd_train(c: &Common, target: &str, resume: Option<&Path>, stop_after_epochs: Option<usize>) -> Result<()> {
    let cfg = effective_config(c)?;
    let suite = cfg.load_suite()?;
    let split = find_split(splits(&cfg, &suite, cfg.eval.closed_set)?, target)?;
    let backend = cfg.build_backend()?;
    let pool = if cfg.train.open_slots() > 0 {
        let cache = require_cache(&cfg)?;
        let manifest = split_pool_cache(&cache, target).join("pool.json");
        if !manifest.is_file() {
            return Err(user(format!(
                "open pool for target `{target}` not found at {}; run `opendg generate-open` first",
                manifest.display()
            )));
        }
        let generator = cfg.build_generator()?;
        let (samples, m) = split_open_pool_with_manifest(
            generator.as_ref(),
            &split,
            &suite,
            &cfg.train,
            &cfg.pool_settings(),
            image_size(&suite),
        )?;
        if !m.domains.values().all(|d| d.cache_hit) {
            warn!("cached pool did not match the current settings and was regenerated");
        }
        samples
    } else {
        Vec::new()
    };
    let resume = match resume {
        Some(p) if !p.is_file() => return Err(user(format!("checkpoint {} does not exist", p.display()))),
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let dir = out_dir(c, &cfg).join(format!("train-{target}-seed{}", cfg.train.seed));
    echo_config(&cfg, &dir)?;
    let log_path = dir.join("log.jsonl");
    let ckpt_path = dir.join("checkpoint.json");
    let opts = TrainOptions { log_path: Some(log_path), checkpoint_path: Some(ckpt_path.clone()), resume, stop_after_epochs };
    let out = train(&split, &suite, &pool, backend.as_ref(), &cfg.train, &opts)?;
    save_checkpoint(&out.checkpoint, &ckpt_path)?;
    if let Some(last) = out.log.last() {
        info!(steps = last.step + 1, l_con = last.l_con, l_sem = last.l_sem, "training finished");
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

/// Checkpoint plus the backend and split it was trained against.
fn open_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, Arc<dyn EncoderBackend>, DomainSuite, SplitSpec)> {
    if !path.is_file() {
        return Err(user(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    let backend = build_backend(&ckpt.backend, None)?;
    let suite = cfg.load_suite()?;
    let known: Vec<&String> = ckpt.labels.iter().filter(|l| *l != UNKNOWN_LABEL).collect();
    for closed in [false, true] {
        let candidate = find_split(splits(cfg, &suite, closed)?, &ckpt.target)?;
        if candidate.sources == ckpt.sources && candidate.known_labels.iter().collect::<Vec<_>>() == known {
            return Ok((ckpt, backend, suite, candidate));
        }
    }
    Err(user(format!("checkpoint {} does not match any split of the configured dataset", path.display())))
}

fn default_dir(c: &Common, checkpoint: &Path) -> PathBuf {
    c.out.clone().unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn evaluate(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = effective_config(c)?;
    let (ckpt, backend, suite, split) = open_checkpoint(&cfg, checkpoint)?;
    let eval = evaluate_split(&ckpt, backend.as_ref(), &split, &suite, ckpt.config.seed)?;
    let dir = default_dir(c, checkpoint);
    echo_config(&cfg, &dir)?;
    let p = dir.join(format!("eval-{}.json", split.target));
    write_json(&eval, &p)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "target {}: acc {:.2} open {} h {} -> {}",
        eval.target,
        eval.acc_closed,
        fmt(eval.acc_open),
        fmt(eval.h_score),
        p.display()
    );
    Ok(())
}

fn lodo(c: &Common, seeds: Option<usize>, closed_set: bool) -> Result<()> {
    let mut cfg = effective_config(c)?;
    if let Some(n) = seeds {
        cfg.eval.seeds = n;
    }
    cfg.eval.closed_set |= closed_set;
    cfg.validate()?;
    let suite = cfg.load_suite()?;
    let class_split = cfg.class_split()?;
    let backend = cfg.build_backend()?;
    let generator = cfg.build_generator()?;
    let dir = out_dir(c, &cfg);
    echo_config(&cfg, &dir)?;
    let mut report =
        run_lodo(&suite, class_split.as_ref(), backend.as_ref(), generator.as_ref(), &cfg.lodo_settings(Some(dir.clone())))?;
    report.metadata.insert("backend".into(), format!("{:?}", cfg.backend.backend).to_lowercase());
    report.metadata.insert("generator".into(), generator.name());
    report
        .metadata
        .insert("reference.pacs_vit_b32".into(), "acc 99.53, h 99.70 with pretrained encoders at full scale".into());
    write_report_json(&report, &dir.join("report.json"))?;
    write_report_csv(&report, &dir.join("report.csv"))?;
    let bars: Vec<f64> = report.targets.iter().map(|t| t.h_score.unwrap_or(t.acc_closed)).collect();
    plot_bars(&bars, 100.0, &dir.join("targets.png"))?;
    for t in report.targets.iter().chain(std::iter::once(&report.mean)) {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        println!("{:<12} acc {:>6.2} open {:>6} h {:>6}", t.target, t.acc_closed, fmt(t.acc_open), fmt(t.h_score));
    }
    println!("{}", dir.join("report.json").display());
    Ok(())
}

fn diagnose(c: &Common, checkpoint: &Path, compare: Option<&Path>) -> Result<()> {
    let cfg = effective_config(c)?;
    let (ckpt, backend, suite, split) = open_checkpoint(&cfg, checkpoint)?;
    let backend = backend.as_ref();
    let dir = default_dir(c, checkpoint).join(format!("diagnose-{}", split.target));
    echo_config(&cfg, &dir)?;

    let pool = if ckpt.labels.iter().any(|l| l == UNKNOWN_LABEL) {
        let generator = cfg.build_generator()?;
        split_open_pool(generator.as_ref(), &split, &suite, &ckpt.config, &cfg.pool_settings(), image_size(&suite))?
    } else {
        Vec::new()
    };
    let mut items: Vec<DiagnosticItem> = split
        .real_pool(&suite)
        .into_iter()
        .map(|(s, _)| DiagnosticItem { label: &s.label, domain: &s.domain, image: &s.image })
        .collect();
    items.extend(pool.iter().map(|o| DiagnosticItem { label: UNKNOWN_LABEL, domain: &o.domain, image: &o.image }));
    let cos = xhat_cosine_diagnostic(&ckpt, backend, &items, &ckpt.labels)?;
    let other = match compare {
        Some(p) => {
            let (b, b_backend, _, b_split) = open_checkpoint(&cfg, p)?;
            if b_split.target != split.target || b.labels != ckpt.labels {
                return Err(user("compared checkpoints must share the target domain and labels"));
            }
            Some(xhat_cosine_diagnostic(&b, b_backend.as_ref(), &items, &ckpt.labels)?)
        }
        None => None,
    };
    let mut w = csv::Writer::from_path(dir.join("cosine.csv"))?;
    match &other {
        Some(_) => w.write_record(["class", "cosine", "cosine_compare"])?,
        None => w.write_record(["class", "cosine"])?,
    }
    for (class, v) in &cos {
        let mut row = vec![class.clone(), format!("{v:.6}")];
        if let Some(o) = &other {
            row.push(o.get(class).map(|x| format!("{x:.6}")).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    plot_bars(&cos.values().copied().collect::<Vec<_>>(), 1.0, &dir.join("cosine.png"))?;

    let (domains, m) = frechet_matrix(backend, &suite)?;
    let mut w = csv::Writer::from_path(dir.join("frechet.csv"))?;
    w.write_record(std::iter::once("domain".to_string()).chain(domains.iter().cloned()))?;
    for (d, row) in domains.iter().zip(&m) {
        w.write_record(std::iter::once(d.clone()).chain(row.iter().map(|v| format!("{v:.6}"))))?;
    }
    w.flush()?;

    let targets = split.target_samples(&suite);
    let partitions: Vec<Partition> = (1..=split.known_labels.len())
        .rev()
        .filter(|&k| k < split.known_labels.len() || !split.target_open_labels.is_empty())
        .map(|k| Partition {
            known: split.known_labels[..k].iter().cloned().collect(),
            unknown: split.known_labels[k..].iter().chain(&split.target_open_labels).cloned().collect(),
        })
        .collect();
    let sweep = openness_sweep(&ckpt, backend, &split, &targets, &partitions)?;
    write_json(&sweep, &dir.join("openness.json"))?;
    if sweep.len() >= 2 {
        plot_curve(&sweep.iter().map(|p| (p.openness, p.h_score)).collect::<Vec<_>>(), 100.0, &dir.join("openness.png"))?;
    }
    println!("{}", dir.display());
    Ok(())
}
