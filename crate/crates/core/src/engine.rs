//! Training, checkpoints and inference.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, info};

use crate::datasets::{derive_seed, open_quota, sample_batch, DomainSuite, SplitSpec, UNKNOWN_LABEL};
use crate::encoders::{BackendDescriptor, EncoderBackend};
use crate::error::{OdgError, Result};
use crate::latentspace::UPSAMPLER_CHANNELS;
use crate::model::{build_cue_cache, CueCache, ModelInput, OdgModel, XhatMode};
use crate::objectives::{class_posterior, total_loss, LabeledInput, Posterior};
use crate::opengen::OpenSample;
use crate::pixels::Image;
use crate::promptspace::{InitMode, PromptBaseline, PromptInit, TokenPosition};
use crate::tape::Tape;

pub const CHECKPOINT_FORMAT: &str = "opendg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak learning rate reached at the end of warm-up.
    pub base_lr: f64,
    /// Fraction of all steps spent in linear warm-up.
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub open_fraction: f64,
    pub tau: f64,
    pub seed: u64,
    /// Overrides the derived `ceil(|real pool| / real slots per batch)`.
    pub steps_per_epoch: Option<usize>,
    pub use_sem: bool,
    pub xhat: XhatMode,
    /// Recorded for provenance; consumed by pool generation.
    pub pp_only: bool,
    pub init_mode: InitMode,
    pub dom_token_position: TokenPosition,
    pub prompt_baseline: PromptBaseline,
    pub context_cls: usize,
    pub context_dom: usize,
    pub upsampler_channels: Vec<usize>,
    /// Train an extra "unknown" class on pseudo-open images. When false the
    /// model is closed-set and rejects by maximum probability instead.
    pub unknown_class: bool,
    /// Rejection threshold on the maximum probability for closed-set models.
    pub msp_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            base_lr: 0.01,
            warmup_fraction: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            open_fraction: 0.25,
            tau: 0.01,
            seed: 0,
            steps_per_epoch: None,
            use_sem: true,
            xhat: XhatMode::Differential,
            pp_only: false,
            init_mode: InitMode::Phrase,
            dom_token_position: TokenPosition::Front,
            prompt_baseline: PromptBaseline::None,
            context_cls: 4,
            context_dom: 4,
            upsampler_channels: UPSAMPLER_CHANNELS.to_vec(),
            unknown_class: true,
            msp_threshold: 0.5,
        }
    }
}

/// Named configuration switches for the ablation arms.
pub const ABLATIONS: [&str; 9] = [
    "no-sem",
    "no-xhat",
    "manual-xhat",
    "pp-only",
    "b1-manual",
    "b2-manual",
    "b3-gaussian-init",
    "dom-middle",
    "dom-end",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OdgError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if self.batch_size < 4 {
            return bad(format!("batch_size must be >= 4, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.open_fraction) {
            return bad(format!("open_fraction must lie in [0, 1), got {}", self.open_fraction));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.msp_threshold) {
            return bad(format!("msp_threshold must lie in [0, 1], got {}", self.msp_threshold));
        }
        Ok(())
    }

    /// Apply a named ablation switch.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name.to_ascii_lowercase().as_str() {
            "no-sem" => self.use_sem = false,
            "no-xhat" => {
                self.xhat = XhatMode::Off;
                self.use_sem = false;
            }
            "manual-xhat" => self.xhat = XhatMode::Manual,
            "pp-only" => self.pp_only = true,
            "b1-manual" => self.prompt_baseline = PromptBaseline::B1Manual,
            "b2-manual" => self.prompt_baseline = PromptBaseline::B2Manual,
            "b3-gaussian-init" => self.init_mode = InitMode::Gaussian,
            "dom-front" => self.dom_token_position = TokenPosition::Front,
            "dom-middle" => self.dom_token_position = TokenPosition::Middle,
            "dom-end" => self.dom_token_position = TokenPosition::End,
            other => {
                return Err(OdgError::Config(format!(
                    "unknown ablation `{other}`; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Pseudo-open slots per batch under this configuration.
    pub fn open_slots(&self) -> usize {
        if self.unknown_class {
            open_quota(self.batch_size, self.open_fraction)
        } else {
            0
        }
    }

    pub fn steps_per_epoch_for(&self, real_pool: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| {
            let slots = (self.batch_size - self.open_slots()).max(1);
            real_pool.div_ceil(slots).max(1)
        })
    }
}

/// Linear warm-up over the first `warmup_fraction` of steps, then cosine
/// decay to zero.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    let total = total.max(1);
    let warm = ((warmup_fraction * total as f64).ceil() as usize).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &OdgModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, model: &mut OdgModel, grads: &[Vec<f64>], mask: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, tensor) in model.tensors_mut().into_iter().enumerate() {
            if !mask[k] {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..tensor.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                tensor.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_con: f64,
    pub l_sem: f64,
    pub total: f64,
    pub n_sem_pairs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// The encoder is referenced, not stored.
    pub backend: BackendDescriptor,
    pub encoder_digest: String,
    pub labels: Vec<String>,
    pub sources: Vec<String>,
    pub target: String,
    pub model: OdgModel,
    pub optimizer: AdamState,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub total_steps: usize,
    /// Hash chain over the serialized training-log lines.
    pub log_digest: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    digest: String,
    body: Checkpoint,
}

fn body_digest(body: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(body)?)))
}

/// Write atomically as self-describing JSON.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        digest: body_digest(ckpt)?,
        body: ckpt.clone(),
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&file)?).map_err(|e| OdgError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| OdgError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| OdgError::io(path, e))?;
    let head: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| OdgError::Checkpoint(format!("{}: {e}", path.display())))?;
    let format = head.get("format").and_then(|v| v.as_str());
    let version = head.get("version").and_then(|v| v.as_u64());
    if format != Some(CHECKPOINT_FORMAT) {
        return Err(OdgError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(OdgError::Checkpoint(format!(
            "{}: version {:?} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            version
        )));
    }
    let file: CheckpointFile =
        serde_json::from_value(head).map_err(|e| OdgError::Checkpoint(format!("{}: {e}", path.display())))?;
    if body_digest(&file.body)? != file.digest {
        return Err(OdgError::Checkpoint(format!("{}: content digest mismatch", path.display())));
    }
    Ok(file.body)
}

/// Where training writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// JSONL loss log, appended to.
    pub log_path: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<Checkpoint>,
    /// Return once this many epochs are complete; the schedule still spans
    /// `epochs`, so a later resume finishes the identical run.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

fn chain_digest(prev: &str, line: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(line.as_bytes());
    hex::encode(h.finalize())
}

/// Labels the classifier distinguishes under `cfg`.
pub fn classifier_labels(split: &SplitSpec, cfg: &TrainConfig) -> Vec<String> {
    if cfg.unknown_class {
        split.augmented_labels.clone()
    } else {
        split.known_labels.clone()
    }
}

pub fn init_model(backend: &dyn EncoderBackend, labels: &[String], cfg: &TrainConfig) -> Result<OdgModel> {
    let init = PromptInit {
        class_names: labels,
        init_mode: cfg.init_mode,
        seed: cfg.seed,
        context_cls: cfg.context_cls,
        context_dom: cfg.context_dom,
        position: cfg.dom_token_position,
        baseline: cfg.prompt_baseline,
    };
    OdgModel::new(backend, &init, &cfg.upsampler_channels, cfg.xhat)
}

/// Optimize prompts, domain projector, upsampler and fuse projector on the
/// split's source domains plus the pseudo-open pool.
pub fn train(
    split: &SplitSpec,
    suite: &DomainSuite,
    open_pool: &[OpenSample],
    backend: &dyn EncoderBackend,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = classifier_labels(split, cfg);
    let real_pool = split.real_pool(suite);
    if real_pool.is_empty() {
        return Err(OdgError::Data(format!("split with target `{}` has no source samples", split.target)));
    }
    let open_slots = cfg.open_slots();
    if open_slots > 0 && open_pool.is_empty() {
        return Err(OdgError::Data("open pool is empty but the configuration reserves open slots".into()));
    }
    let open_fraction = if open_slots > 0 { cfg.open_fraction } else { 0.0 };
    let steps_per_epoch = cfg.steps_per_epoch_for(real_pool.len());
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut ckpt = match &opts.resume {
        Some(prev) => {
            if prev.config != *cfg || prev.labels != labels || prev.target != split.target {
                return Err(OdgError::Checkpoint("resume checkpoint was trained with a different configuration or split".into()));
            }
            if prev.encoder_digest != backend.param_digest() {
                return Err(OdgError::Checkpoint("resume checkpoint references a different encoder".into()));
            }
            prev.clone()
        }
        None => {
            let model = init_model(backend, &labels, cfg)?;
            Checkpoint {
                config: cfg.clone(),
                backend: backend.descriptor(),
                encoder_digest: backend.param_digest(),
                labels: labels.clone(),
                sources: split.sources.clone(),
                target: split.target.clone(),
                optimizer: AdamState::new(&model),
                model,
                epochs_done: 0,
                steps_done: 0,
                total_steps,
                log_digest: String::new(),
            }
        }
    };

    let cues: CueCache = build_cue_cache(
        backend,
        real_pool
            .iter()
            .map(|(s, _)| (s.id.as_str(), &s.image))
            .chain(open_pool.iter().map(|o| (o.id.as_str(), &o.image))),
    )?;
    let mask = ckpt.model.trainable_mask();
    let mut log_file = match &opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(p)
                .map_err(|e| OdgError::io(p, e))?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::new();
    info!(target = %split.target, steps = total_steps, start_epoch = ckpt.epochs_done, "training");

    let last_epoch = opts.stop_after_epochs.map_or(cfg.epochs, |n| n.min(cfg.epochs));
    for epoch in ckpt.epochs_done..last_epoch {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[b"epoch-batches", &cfg.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]));
        for _ in 0..steps_per_epoch {
            let step = ckpt.steps_done;
            let batch = sample_batch(split, &real_pool, open_pool, cfg.batch_size, open_fraction, &mut rng)?;
            let mut items = Vec::with_capacity(batch.len());
            for (s, label) in &batch.real {
                items.push(LabeledInput {
                    input: ModelInput { image: &s.image, visual: &cues[&s.id], domain: Some(&s.domain) },
                    label: *label,
                    domain: &s.domain,
                });
            }
            for (o, label) in &batch.open {
                items.push(LabeledInput {
                    input: ModelInput { image: &o.image, visual: &cues[&o.id], domain: Some(&o.domain) },
                    label: *label,
                    domain: &o.domain,
                });
            }
            let mut tape = Tape::new();
            let obj = total_loss(&mut tape, &ckpt.model, backend, &items, cfg.tau, cfg.use_sem)?;
            if !obj.report.total.is_finite() {
                return Err(OdgError::Divergence { step, detail: format!("loss is {:?}", obj.report) });
            }
            let grads = tape.backward(obj.total);
            let grads = ckpt.model.collect_grads(&obj.vars, &grads);
            if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(OdgError::Divergence {
                    step,
                    detail: format!("non-finite gradient in {}", ckpt.model.tensor_names()[k]),
                });
            }
            let lr = lr_at(step, total_steps, cfg.base_lr, cfg.warmup_fraction);
            ckpt.optimizer.step(&mut ckpt.model, &grads, &mask, lr, cfg);
            if let Some(k) = ckpt.model.tensors().iter().position(|t| !t.is_finite()) {
                return Err(OdgError::Divergence {
                    step,
                    detail: format!("{} became non-finite", ckpt.model.tensor_names()[k]),
                });
            }
            let rec = LogRecord {
                step,
                epoch,
                l_con: obj.report.l_con,
                l_sem: obj.report.l_sem,
                total: obj.report.total,
                n_sem_pairs: obj.report.n_sem_pairs,
                lr,
            };
            let line = serde_json::to_string(&rec)?;
            ckpt.log_digest = chain_digest(&ckpt.log_digest, &line);
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{line}").map_err(|e| OdgError::io(opts.log_path.as_deref().unwrap_or(Path::new("")), e))?;
            }
            debug!(step, l_con = rec.l_con, l_sem = rec.l_sem, lr, "step");
            log.push(rec);
            ckpt.steps_done += 1;
        }
        ckpt.epochs_done = epoch + 1;
        if let Some(p) = &opts.checkpoint_path {
            save_checkpoint(&ckpt, p)?;
        }
    }
    if backend.param_digest() != ckpt.encoder_digest {
        return Err(OdgError::Checkpoint("encoder weights changed during training".into()));
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// A single prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    /// Index into the split's augmented labels (open index for unknown).
    pub index: usize,
    pub posterior: Posterior,
}

/// Classify one image: argmax of the posterior (lowest index on ties), or
/// unknown below the rejection threshold for closed-set models.
pub fn predict(
    ckpt: &Checkpoint,
    backend: &dyn EncoderBackend,
    image: &Image,
    domain: Option<&str>,
    tau: f64,
) -> Result<Prediction> {
    let visual = crate::encoders::visual_encode(backend, image)?;
    predict_with(ckpt, backend, &ModelInput { image, visual: &visual, domain }, tau)
}

pub fn predict_with(ckpt: &Checkpoint, backend: &dyn EncoderBackend, input: &ModelInput<'_>, tau: f64) -> Result<Prediction> {
    let posterior = class_posterior(&ckpt.model, backend, input, tau)?;
    let mut index = posterior.argmax();
    let n_known = ckpt.labels.iter().filter(|l| *l != UNKNOWN_LABEL).count();
    if !ckpt.config.unknown_class && posterior.max_prob() < ckpt.config.msp_threshold {
        index = n_known;
    }
    let label = ckpt.labels.get(index).cloned().unwrap_or_else(|| UNKNOWN_LABEL.to_string());
    Ok(Prediction { label, index, posterior })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, 100, 0.01, 0.1)).collect();
        assert!((lrs[9] - 0.01).abs() < 1e-15);
        assert!(lrs[..10].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[9..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] < 1e-4);
    }

    #[test]
    fn ablation_switches() {
        let mut c = TrainConfig::default();
        c.apply_ablation("no-sem").unwrap();
        assert!(!c.use_sem);
        c.apply_ablation("B3-gaussian-init").unwrap();
        assert_eq!(c.init_mode, InitMode::Gaussian);
        c.apply_ablation("no-xhat").unwrap();
        assert_eq!(c.xhat, XhatMode::Off);
        assert!(c.apply_ablation("warp-drive").is_err());
    }

    #[test]
    fn steps_per_epoch_follow_real_slots() {
        let c = TrainConfig { batch_size: 32, ..TrainConfig::default() };
        assert_eq!(c.steps_per_epoch_for(100), 5);
        let closed = TrainConfig { unknown_class: false, ..c };
        assert_eq!(closed.steps_per_epoch_for(100), 4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 2, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
