//! Run configuration: one TOML file describing the dataset, backend, open
//! pool, training and evaluation of a campaign.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{load_suite, synth_toy_suite, ClassSplit, DomainSuite};
use crate::encoders::{build_backend, BackendDescriptor, EncoderBackend};
use crate::engine::TrainConfig;
use crate::error::{OdgError, Result};
use crate::evalkit::{LodoSettings, PoolSettings};
use crate::opengen::{
    make_diffusion_client, make_stub_generator, DiffusionConfig, GeneratorBackend, DEFAULT_ENTROPY_THRESHOLD,
    DEFAULT_TEMPLATE,
};

/// Environment variable naming the open-pool cache root when the config
/// leaves `opengen.cache` unset.
pub const CACHE_ENV: &str = "OPENDG_CACHE";

/// Procedural suite parameters, used when `dataset.root` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySuiteConfig {
    pub seed: u64,
    pub domains: usize,
    pub classes: usize,
    pub per_cell: usize,
}

impl Default for ToySuiteConfig {
    fn default() -> Self {
        Self { seed: 7, domains: 3, classes: 6, per_cell: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// `{root}/{domain}/{class}/*.png|jpg`; the toy suite is used when unset.
    pub root: Option<PathBuf>,
    /// Square side every image is resized to.
    pub image_size: usize,
    pub toy: ToySuiteConfig,
    /// JSON class split; all classes in every domain when unset.
    pub class_split: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { root: None, image_size: 32, toy: ToySuiteConfig::default(), class_split: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    /// Offline procedural generator.
    #[default]
    Stub,
    /// HTTP text-to-image service.
    Diffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpenGenConfig {
    pub generator: GeneratorKind,
    /// Seed of the stub generator.
    pub seed: u64,
    /// Images with normalized entropy at or below this are discarded.
    pub threshold: f64,
    /// Images per source domain; derived from the batch quota when unset.
    pub count: Option<usize>,
    /// Positive prompt template; `{domain}` is substituted.
    pub template: String,
    /// Cache root; falls back to the `OPENDG_CACHE` environment variable.
    pub cache: Option<PathBuf>,
    pub diffusion: DiffusionConfig,
}

impl Default for OpenGenConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Stub,
            seed: 0,
            threshold: DEFAULT_ENTROPY_THRESHOLD,
            count: None,
            template: DEFAULT_TEMPLATE.into(),
            cache: None,
            diffusion: DiffusionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// First seed; runs use `seed, seed + 1, ..`.
    pub seed: u64,
    pub seeds: usize,
    /// Score closed accuracy only.
    pub closed_set: bool,
    pub out_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, seeds: 3, closed_set: false, out_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backend: BackendDescriptor,
    pub opengen: OpenGenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale preset: toy suite with 4 known and 2 open classes, a
    /// 16-dimensional mock backend and 10 epochs.
    pub fn toy() -> Self {
        Self {
            backend: BackendDescriptor { d_v: 16, d_tok: 16, d_t: 16, ..BackendDescriptor::default() },
            train: TrainConfig { batch_size: 16, base_lr: 0.02, ..TrainConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| OdgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OdgError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            OdgError::Config(m) => OdgError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fully expanded TOML, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| OdgError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.dataset;
        if d.image_size < crate::datasets::MIN_IMAGE_SIZE {
            return Err(OdgError::Config(format!(
                "dataset.image_size must be >= {}, got {}",
                crate::datasets::MIN_IMAGE_SIZE,
                d.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.opengen.threshold) {
            return Err(OdgError::Config(format!("opengen.threshold must lie in [0, 1), got {}", self.opengen.threshold)));
        }
        if self.opengen.count == Some(0) {
            return Err(OdgError::Config("opengen.count must be >= 1".into()));
        }
        if self.eval.seeds == 0 {
            return Err(OdgError::Config("eval.seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_suite(&self) -> Result<DomainSuite> {
        let d = &self.dataset;
        match &d.root {
            Some(root) => load_suite(root, d.image_size),
            None => synth_toy_suite(d.toy.seed, d.toy.domains, d.toy.classes, d.toy.per_cell, d.image_size),
        }
    }

    /// The configured class split. The toy suite defaults to holding out
    /// `dots` and `rings` as open classes when it has exactly six classes.
    pub fn class_split(&self) -> Result<Option<ClassSplit>> {
        match (&self.dataset.class_split, &self.dataset.root) {
            (Some(p), _) => ClassSplit::load(p).map(Some),
            (None, None) if self.dataset.toy.classes == 6 => {
                let per_domain = vec!["[0,1,3,5]"; self.dataset.toy.domains.saturating_sub(1)].join(",");
                ClassSplit::from_json(&format!(r#"{{"sources": [{per_domain}]}}"#)).map(Some)
            }
            (None, _) => Ok(None),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn EncoderBackend>> {
        build_backend(&self.backend, None)
    }

    pub fn build_generator(&self) -> Result<Box<dyn GeneratorBackend>> {
        Ok(match self.opengen.generator {
            GeneratorKind::Stub => Box::new(make_stub_generator(self.opengen.seed)),
            GeneratorKind::Diffusion => Box::new(make_diffusion_client(self.opengen.diffusion.clone())?),
        })
    }

    /// `opengen.cache`, else the `OPENDG_CACHE` environment variable.
    pub fn cache_root(&self) -> Option<PathBuf> {
        self.opengen.cache.clone().or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn pool_settings(&self) -> PoolSettings {
        PoolSettings {
            count: self.opengen.count,
            threshold: self.opengen.threshold,
            template: self.opengen.template.clone(),
            cache: self.cache_root(),
        }
    }

    pub fn lodo_settings(&self, out_dir: Option<PathBuf>) -> LodoSettings {
        LodoSettings {
            train: self.train.clone(),
            seed: self.eval.seed,
            n_seeds: self.eval.seeds,
            pool: self.pool_settings(),
            closed_set: self.eval.closed_set,
            out_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig::toy();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        let partial = RunConfig::from_toml("[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.dataset, DatasetConfig::default());
    }

    #[test]
    fn shipped_toy_config_matches_preset() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
        assert_eq!(RunConfig::load(std::path::Path::new(path)).unwrap(), RunConfig::toy());
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(RunConfig::from_toml("[eval]\nseeds = 0\n").is_err());
        assert!(RunConfig::from_toml("[opengen]\nthreshold = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[train]\ntau = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[dataset]\nimage_size = 8\n").is_err());
    }

    #[test]
    fn toy_split_holds_out_two_classes() {
        let cfg = RunConfig::toy();
        let suite = cfg.load_suite().unwrap();
        let split = cfg.class_split().unwrap().unwrap();
        let splits = crate::datasets::make_lodo_splits(&suite, Some(&split)).unwrap();
        assert_eq!(splits.len(), 3);
        for s in &splits {
            assert_eq!(s.known_labels.len(), 4);
            assert_eq!(s.target_open_labels.len(), 2);
        }
    }
}
