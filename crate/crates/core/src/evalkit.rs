//! Metrics, leave-one-domain-out campaigns, and diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::datasets::{make_lodo_splits, open_quota, ClassSplit, DomainSample, DomainSuite, SplitSpec, UNKNOWN_LABEL};
use crate::encoders::{visual_encode, EncoderBackend, VisualOutput};
use crate::engine::{predict_with, save_checkpoint, train, Checkpoint, TrainConfig, TrainOptions};
use crate::error::{OdgError, Result};
use crate::model::ModelInput;
use crate::opengen::{build_open_pool, GeneratorBackend, OpenSample, PoolManifest, PoolRequest, DEFAULT_ENTROPY_THRESHOLD, DEFAULT_TEMPLATE};
use crate::pixels::Image;
use crate::tape::cosine;

/// Percentage of correct predictions among the masked entries.
pub fn accuracy(preds: &[usize], gts: &[usize], mask: &[bool]) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != mask.len() {
        return Err(OdgError::InvalidArgument(format!(
            "length mismatch: {} predictions, {} labels, {} mask entries",
            preds.len(),
            gts.len(),
            mask.len()
        )));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for ((p, g), m) in preds.iter().zip(gts).zip(mask) {
        if *m {
            n += 1;
            hit += usize::from(p == g);
        }
    }
    if n == 0 {
        return Err(OdgError::InvalidArgument("accuracy over an empty subset".into()));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

/// Harmonic mean of closed accuracy and unknown recall (both in percent).
pub fn h_score(acc_closed: f64, acc_open: f64) -> f64 {
    if acc_closed + acc_open <= 0.0 {
        return 0.0;
    }
    2.0 * acc_closed * acc_open / (acc_closed + acc_open)
}

/// Evaluation of one trained model on its held-out domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub target: String,
    pub seed: u64,
    pub acc_closed: f64,
    /// Recall of "unknown" on target-open samples; absent in closed-set DG.
    pub acc_open: Option<f64>,
    pub h_score: Option<f64>,
    pub n_closed: usize,
    pub n_open: usize,
    /// Mean probability of the open class on known-class target images.
    pub mean_unknown_prob_known: Option<f64>,
    /// Mean probability of the open class on target-open images.
    pub mean_unknown_prob_open: Option<f64>,
}

/// Per-sample inference results on a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub labels: Vec<String>,
    pub preds: Vec<usize>,
    pub gts: Vec<usize>,
    /// Probability assigned to the open class, when the model has one.
    pub unknown_probs: Vec<Option<f64>>,
}

/// Predict every sample; indices refer to `split`'s augmented labels.
pub fn predict_samples(
    ckpt: &Checkpoint,
    backend: &dyn EncoderBackend,
    split: &SplitSpec,
    samples: &[&DomainSample],
) -> Result<PredictionSet> {
    let tau = ckpt.config.tau;
    let unknown_pos = ckpt.labels.iter().position(|l| l == UNKNOWN_LABEL);
    let results: Vec<(usize, Option<f64>)> = samples
        .par_iter()
        .map(|s| {
            let visual = visual_encode(backend, &s.image)?;
            let input = ModelInput { image: &s.image, visual: &visual, domain: Some(&s.domain) };
            let p = predict_with(ckpt, backend, &input, tau)?;
            let idx = split.label_index(&p.label).unwrap_or(split.unknown_index());
            Ok((idx, unknown_pos.map(|u| p.posterior.probs[u])))
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSet {
        labels: split.augmented_labels.clone(),
        preds: results.iter().map(|r| r.0).collect(),
        gts: samples.iter().map(|s| split.target_index(&s.label)).collect(),
        unknown_probs: results.iter().map(|r| r.1).collect(),
    })
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Closed accuracy, unknown recall and H-score from a prediction set.
pub fn score_predictions(set: &PredictionSet, unknown_index: usize, target: &str, seed: u64) -> Result<SplitEval> {
    let closed: Vec<bool> = set.gts.iter().map(|g| *g != unknown_index).collect();
    let open: Vec<bool> = closed.iter().map(|c| !c).collect();
    let n_closed = closed.iter().filter(|c| **c).count();
    let n_open = set.gts.len() - n_closed;
    let acc_closed = accuracy(&set.preds, &set.gts, &closed)?;
    let acc_open = if n_open > 0 { Some(accuracy(&set.preds, &set.gts, &open)?) } else { None };
    let probs = |mask: &[bool]| {
        mean_of(set.unknown_probs.iter().zip(mask).filter(|(_, m)| **m).filter_map(|(p, _)| *p))
    };
    Ok(SplitEval {
        target: target.to_string(),
        seed,
        acc_closed,
        acc_open,
        h_score: acc_open.map(|o| h_score(acc_closed, o)),
        n_closed,
        n_open,
        mean_unknown_prob_known: probs(&closed),
        mean_unknown_prob_open: probs(&open),
    })
}

pub fn evaluate_split(
    ckpt: &Checkpoint,
    backend: &dyn EncoderBackend,
    split: &SplitSpec,
    suite: &DomainSuite,
    seed: u64,
) -> Result<SplitEval> {
    let samples = split.target_samples(suite);
    if samples.is_empty() {
        return Err(OdgError::Data(format!("target domain `{}` has no samples", split.target)));
    }
    let set = predict_samples(ckpt, backend, split, &samples)?;
    score_predictions(&set, split.unknown_index(), &split.target, seed)
}

/// Pool generation settings for a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSettings {
    /// Images requested per source domain; derived from the batch quota and
    /// steps per epoch when absent.
    pub count: Option<usize>,
    pub threshold: f64,
    pub template: String,
    pub cache: Option<PathBuf>,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { count: None, threshold: DEFAULT_ENTROPY_THRESHOLD, template: DEFAULT_TEMPLATE.into(), cache: None }
    }
}

/// Pool for the split's source domains under `cfg`; empty when the
/// configuration reserves no open slots.
pub fn split_open_pool(
    generator: &dyn GeneratorBackend,
    split: &SplitSpec,
    suite: &DomainSuite,
    cfg: &TrainConfig,
    pool: &PoolSettings,
    image_size: usize,
) -> Result<Vec<OpenSample>> {
    if cfg.open_slots() == 0 {
        return Ok(Vec::new());
    }
    Ok(split_open_pool_with_manifest(generator, split, suite, cfg, pool, image_size)?.0)
}

/// Cache directory of the pool built for a held-out target.
pub fn split_pool_cache(cache_root: &Path, target: &str) -> PathBuf {
    cache_root.join(format!("holdout-{target}"))
}

/// Like [`split_open_pool`] but always builds the pool and also returns
/// its manifest.
pub fn split_open_pool_with_manifest(
    generator: &dyn GeneratorBackend,
    split: &SplitSpec,
    suite: &DomainSuite,
    cfg: &TrainConfig,
    pool: &PoolSettings,
    image_size: usize,
) -> Result<(Vec<OpenSample>, PoolManifest)> {
    let slots = open_quota(cfg.batch_size, cfg.open_fraction).max(1);
    let steps = cfg.steps_per_epoch_for(split.real_pool(suite).len());
    let count = pool.count.unwrap_or(slots * steps).max(1);
    let cache = pool.cache.as_ref().map(|c| split_pool_cache(c, &split.target));
    let req = PoolRequest {
        domains: &split.sources,
        known: &split.known_labels,
        count,
        seed: cfg.seed,
        image_size,
        pp_only: cfg.pp_only,
        threshold: pool.threshold,
        template: &pool.template,
    };
    let (p, manifest) = build_open_pool(generator, &req, cache.as_deref())?;
    if p.samples.is_empty() {
        return Err(OdgError::Data(format!("open pool for target `{}` is empty after filtering", split.target)));
    }
    Ok((p.samples, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoSettings {
    pub train: TrainConfig,
    /// Base seed; runs use `seed, seed + 1, ..`.
    pub seed: u64,
    pub n_seeds: usize,
    pub pool: PoolSettings,
    /// Score closed accuracy only and ignore any class split.
    pub closed_set: bool,
    /// Per-split results and checkpoints are persisted here as they finish.
    pub out_dir: Option<PathBuf>,
}

impl Default for LodoSettings {
    fn default() -> Self {
        Self { train: TrainConfig::default(), seed: 0, n_seeds: 3, pool: PoolSettings::default(), closed_set: false, out_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    pub acc_closed: f64,
    pub acc_open: Option<f64>,
    pub h_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub closed_set: bool,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub runs: Vec<SplitEval>,
    /// Per-target means over seeds.
    pub targets: Vec<TargetRow>,
    /// Mean over targets.
    pub mean: TargetRow,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    if xs.iter().any(Option::is_none) || xs.is_empty() {
        return None;
    }
    Some(xs.iter().flatten().sum::<f64>() / xs.len() as f64)
}

/// Average runs per target, then across targets.
pub fn aggregate(runs: &[SplitEval], closed_set: bool) -> (Vec<TargetRow>, TargetRow) {
    let mut by_target: BTreeMap<&str, Vec<&SplitEval>> = BTreeMap::new();
    for r in runs {
        by_target.entry(&r.target).or_default().push(r);
    }
    let targets: Vec<TargetRow> = by_target
        .into_iter()
        .map(|(t, rs)| {
            let acc = rs.iter().map(|r| r.acc_closed).sum::<f64>() / rs.len() as f64;
            let (o, h) = if closed_set {
                (None, None)
            } else {
                (
                    mean_opt(&rs.iter().map(|r| r.acc_open).collect::<Vec<_>>()),
                    mean_opt(&rs.iter().map(|r| r.h_score).collect::<Vec<_>>()),
                )
            };
            TargetRow { target: t.to_string(), acc_closed: acc, acc_open: o, h_score: h }
        })
        .collect();
    let n = targets.len().max(1) as f64;
    let mean = TargetRow {
        target: "mean".into(),
        acc_closed: targets.iter().map(|t| t.acc_closed).sum::<f64>() / n,
        acc_open: mean_opt(&targets.iter().map(|t| t.acc_open).collect::<Vec<_>>()),
        h_score: mean_opt(&targets.iter().map(|t| t.h_score).collect::<Vec<_>>()),
    };
    (targets, mean)
}

/// Train one model per held-out domain and seed, evaluate each on its
/// target, and average.
pub fn run_lodo(
    suite: &DomainSuite,
    class_split: Option<&ClassSplit>,
    backend: &dyn EncoderBackend,
    generator: &dyn GeneratorBackend,
    settings: &LodoSettings,
) -> Result<EvalReport> {
    if settings.n_seeds == 0 {
        return Err(OdgError::Config("at least one seed is required".into()));
    }
    let splits = make_lodo_splits(suite, if settings.closed_set { None } else { class_split })?;
    let image_size = suite.samples.first().map(|s| s.image.height()).unwrap_or(0);
    let seeds: Vec<u64> = (0..settings.n_seeds as u64).map(|k| settings.seed + k).collect();
    let mut runs = Vec::new();
    for &seed in &seeds {
        let cfg = TrainConfig { seed, ..settings.train.clone() };
        for split in &splits {
            let pool = split_open_pool(generator, split, suite, &cfg, &settings.pool, image_size)?;
            let out = train(split, suite, &pool, backend, &cfg, &TrainOptions::default())?;
            let mut eval = evaluate_split(&out.checkpoint, backend, split, suite, seed)?;
            if settings.closed_set {
                eval.acc_open = None;
                eval.h_score = None;
            }
            info!(target = %split.target, seed, acc = eval.acc_closed, h = ?eval.h_score, "split done");
            if let Some(dir) = &settings.out_dir {
                let d = dir.join("splits");
                std::fs::create_dir_all(&d).map_err(|e| OdgError::io(&d, e))?;
                let stem = format!("seed{seed}-{}", split.target);
                save_checkpoint(&out.checkpoint, &d.join(format!("{stem}.ckpt.json")))?;
                let p = d.join(format!("{stem}.json"));
                std::fs::write(&p, serde_json::to_vec_pretty(&eval)?).map_err(|e| OdgError::io(&p, e))?;
            }
            runs.push(eval);
        }
    }
    let (targets, mean) = aggregate(&runs, settings.closed_set);
    Ok(EvalReport {
        suite: suite.name.clone(),
        closed_set: settings.closed_set,
        seeds,
        config: settings.train.clone(),
        runs,
        targets,
        mean,
        metadata: BTreeMap::new(),
    })
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| OdgError::io(path, e))
}

/// Per-target rows plus the mean row.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    w.write_record(["target", "acc_closed", "acc_open", "h_score"])?;
    for r in report.targets.iter().chain(std::iter::once(&report.mean)) {
        w.write_record([r.target.clone(), format!("{:.4}", r.acc_closed), fmt(r.acc_open), fmt(r.h_score)])?;
    }
    w.flush().map_err(|e| OdgError::io(path, e))
}

/// One known/unknown re-partition of the target label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub known: BTreeSet<String>,
    pub unknown: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpennessPoint {
    pub n_known: usize,
    pub n_unknown: usize,
    /// Unknown-to-known class ratio.
    pub openness: f64,
    pub acc_closed: f64,
    pub acc_open: f64,
    pub h_score: f64,
}

/// H-score for each partition of the target labels, from one set of
/// predictions. Known-side samples must be classified correctly; the
/// unknown side must be rejected.
pub fn openness_sweep(
    ckpt: &Checkpoint,
    backend: &dyn EncoderBackend,
    split: &SplitSpec,
    samples: &[&DomainSample],
    partitions: &[Partition],
) -> Result<Vec<OpennessPoint>> {
    for p in partitions {
        if p.known.is_empty() || p.unknown.is_empty() {
            return Err(OdgError::InvalidArgument("openness partition with an empty side".into()));
        }
        if let Some(l) = p.known.intersection(&p.unknown).next() {
            return Err(OdgError::InvalidArgument(format!("label `{l}` is on both sides of a partition")));
        }
    }
    let set = predict_samples(ckpt, backend, split, samples)?;
    partitions
        .iter()
        .map(|p| {
            let (mut kp, mut kg, mut km) = (Vec::new(), Vec::new(), Vec::new());
            let mut open_hits = (0usize, 0usize);
            for ((s, pred), gt) in samples.iter().zip(&set.preds).zip(&set.gts) {
                if p.known.contains(&s.label) {
                    kp.push(*pred);
                    kg.push(*gt);
                    km.push(true);
                } else if p.unknown.contains(&s.label) {
                    open_hits.1 += 1;
                    open_hits.0 += usize::from(*pred == split.unknown_index());
                }
            }
            if kp.is_empty() || open_hits.1 == 0 {
                return Err(OdgError::InvalidArgument("partition matches no target samples on one side".into()));
            }
            let acc_closed = accuracy(&kp, &kg, &km)?;
            let acc_open = 100.0 * open_hits.0 as f64 / open_hits.1 as f64;
            Ok(OpennessPoint {
                n_known: p.known.len(),
                n_unknown: p.unknown.len(),
                openness: p.unknown.len() as f64 / p.known.len() as f64,
                acc_closed,
                acc_open,
                h_score: h_score(acc_closed, acc_open),
            })
        })
        .collect()
}

/// A sample for the x̂ consistency diagnostic.
#[derive(Clone, Copy, Debug)]
pub struct DiagnosticItem<'a> {
    pub label: &'a str,
    pub domain: &'a str,
    pub image: &'a Image,
}

/// For each class, the mean over cross-domain pairs of `cos(|x̂_i|, |x̂_j|)`.
/// Classes seen in a single domain are skipped.
pub fn xhat_cosine_diagnostic(
    ckpt: &Checkpoint,
    backend: &dyn EncoderBackend,
    items: &[DiagnosticItem<'_>],
    classes: &[String],
) -> Result<BTreeMap<String, f64>> {
    let model = &ckpt.model;
    let mut out = BTreeMap::new();
    for class in classes {
        let idx = model.prompt.class_index(class)?;
        let members: Vec<&DiagnosticItem> = items.iter().filter(|i| i.label == class).collect();
        let domains: BTreeSet<&str> = members.iter().map(|m| m.domain).collect();
        if domains.len() < 2 {
            warn!(class = %class, "class appears in fewer than two domains; skipped");
            continue;
        }
        let xs: Vec<(&str, Vec<f64>)> = members
            .par_iter()
            .map(|m| {
                let visual: VisualOutput = visual_encode(backend, m.image)?;
                let input = ModelInput { image: m.image, visual: &visual, domain: Some(m.domain) };
                let x = model.xhat(backend, &input, idx)?;
                Ok((m.domain, x.into_iter().map(f64::abs).collect()))
            })
            .collect::<Result<_>>()?;
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                if xs[i].0 != xs[j].0 {
                    sum += cosine(&xs[i].1, &xs[j].1);
                    n += 1;
                }
            }
        }
        out.insert(class.clone(), sum / n as f64);
    }
    Ok(out)
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(OdgError::InvalidArgument("need at least two feature vectors".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(OdgError::Shape("feature vectors have ragged or zero width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(OdgError::NonFinite("features".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eps = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `||μ_A − μ_B||² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})` with shrinkage
/// `1e-6 · trace / d` on each covariance.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(OdgError::Shape(format!("feature widths {} and {} differ", mu_a.len(), mu_b.len())));
    }
    // (Σ_A Σ_B)^{1/2} has the trace of (Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}
    let sa = sqrt_psd(&cov_a);
    let cross = sqrt_psd(&(&sa * &cov_b * &sa)).trace();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Pairwise distances between domains over raw-image visual embeddings.
pub fn frechet_matrix(backend: &dyn EncoderBackend, suite: &DomainSuite) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let feats: Vec<Vec<Vec<f64>>> = suite
        .domains
        .iter()
        .map(|d| {
            let samples: Vec<&DomainSample> = suite.samples_in(d).collect();
            samples.par_iter().map(|s| Ok(visual_encode(backend, &s.image)?.embedding)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let n = feats.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = frechet_distance(&feats[i], &feats[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok((suite.domains.clone(), m))
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    for x in 20..PLOT_W - 10 {
        img.put_pixel(x, PLOT_H - 20, Rgb([0, 0, 0]));
    }
    for y in 10..PLOT_H - 20 {
        img.put_pixel(20, y, Rgb([0, 0, 0]));
    }
    img
}

fn y_pixel(v: f64, max: f64) -> u32 {
    let span = (PLOT_H - 30) as f64;
    (PLOT_H as f64 - 20.0 - (v / max).clamp(0.0, 1.0) * span).round() as u32
}

/// Bar chart with bars scaled against `max`.
pub fn plot_bars(values: &[f64], max: f64, path: &Path) -> Result<()> {
    let mut img = canvas();
    let n = values.len().max(1) as u32;
    let slot = (PLOT_W - 40) / n;
    for (i, v) in values.iter().enumerate() {
        let x0 = 25 + i as u32 * slot;
        let top = y_pixel(*v, max);
        for x in x0..x0 + slot.saturating_sub(4).max(1) {
            for y in top..PLOT_H - 20 {
                img.put_pixel(x, y, Rgb([70, 110, 200]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Polyline over `(x, y)` points with y scaled against `max`.
pub fn plot_curve(points: &[(f64, f64)], max: f64, path: &Path) -> Result<()> {
    let mut img = canvas();
    let (xmin, xmax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let span = (xmax - xmin).max(1e-12);
    let px = |x: f64| 25.0 + (x - xmin) / span * (PLOT_W - 45) as f64;
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (px(*x), f64::from(y_pixel(*y, max)))).collect();
    for w in pts.windows(2) {
        let steps = ((w[1].0 - w[0].0).abs().max((w[1].1 - w[0].1).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1));
            img.put_pixel(x.round() as u32, y.round() as u32, Rgb([200, 60, 60]));
        }
    }
    for (x, y) in &pts {
        for dx in 0..3u32 {
            for dy in 0..3u32 {
                img.put_pixel((*x as u32 + dx).saturating_sub(1), (*y as u32 + dy).saturating_sub(1), Rgb([200, 60, 60]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}
