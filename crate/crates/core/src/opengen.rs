//! Pseudo-open sample synthesis.
//!
//! A generator is asked for images "a {domain} of an unknown class" with the
//! known class names as negative prompts; low-information results are
//! rejected by their normalized grayscale entropy.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, info, warn};

use crate::datasets::{derive_seed, DomainStyle};
use crate::error::{OdgError, Result};
use crate::pixels::Image;

pub const DEFAULT_TEMPLATE: &str = "a {domain} of an unknown class";
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.2;

/// A retained generated image tagged with the domain it imitates.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSample {
    pub id: String,
    pub image: Image,
    pub domain: String,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRequest {
    pub positive: String,
    pub negatives: Vec<String>,
    pub count: usize,
    pub seed: u64,
    pub domain: String,
    pub image_size: usize,
}

impl GenRequest {
    /// Stable hash of the prompt pair, used as part of the cache key.
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.positive.as_bytes());
        for n in &self.negatives {
            h.update([0]);
            h.update(n.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub trait GeneratorBackend: Send + Sync {
    /// Short identifier recorded in pool manifests.
    fn name(&self) -> String;

    /// Exactly `req.count` images of `req.image_size` squared pixels.
    fn generate(&self, req: &GenRequest) -> Result<Vec<Image>>;
}

/// Positive prompt from `template` and the negative class-name prompts.
pub fn build_prompts_with(template: &str, domain: &str, known: &[String], pp_only: bool) -> Result<(String, Vec<String>)> {
    if domain.trim().is_empty() {
        return Err(OdgError::InvalidArgument("empty domain name".into()));
    }
    if known.is_empty() {
        return Err(OdgError::InvalidArgument("no known classes for negative prompts".into()));
    }
    let negatives = if pp_only { Vec::new() } else { known.to_vec() };
    Ok((template.replace("{domain}", domain), negatives))
}

pub fn build_prompts(domain: &str, known: &[String], pp_only: bool) -> Result<(String, Vec<String>)> {
    build_prompts_with(DEFAULT_TEMPLATE, domain, known, pp_only)
}

/// Shannon entropy of the 8-bit luminance histogram, in bits divided by 8.
pub fn grayscale_entropy(image: &Image) -> f64 {
    let gray = image.gray_u8();
    if gray.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for g in &gray {
        hist[*g as usize] += 1;
    }
    let n = gray.len() as f64;
    let bits: f64 = hist
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum();
    bits / 8.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub id: String,
    pub domain: String,
    pub entropy: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpenPool {
    pub samples: Vec<OpenSample>,
    pub records: Vec<EntropyRecord>,
    pub threshold: f64,
}

impl OpenPool {
    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.samples.len() as f64 / self.records.len() as f64
    }

    pub fn extend(&mut self, other: OpenPool) {
        self.samples.extend(other.samples);
        self.records.extend(other.records);
    }
}

/// Keep images whose normalized entropy is strictly above `threshold`.
pub fn filter_pool(images: Vec<(String, String, Image)>, threshold: f64) -> Result<OpenPool> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(OdgError::InvalidArgument(format!("entropy threshold {threshold} outside [0, 1]")));
    }
    let mut pool = OpenPool { threshold, ..OpenPool::default() };
    for (id, domain, image) in images {
        let entropy = grayscale_entropy(&image);
        let accepted = entropy > threshold;
        pool.records.push(EntropyRecord { id: id.clone(), domain: domain.clone(), entropy, accepted });
        if accepted {
            pool.samples.push(OpenSample { id, image, domain, entropy });
        }
    }
    if pool.samples.is_empty() && !pool.records.is_empty() {
        warn!(threshold, candidates = pool.records.len(), "entropy filter rejected every image");
    }
    Ok(pool)
}

/// Deterministic procedural generator: smooth multi-octave value noise plus
/// soft blobs, rendered through the requested domain's color style. It draws
/// no periodic structure, so it stays clear of the toy suite's class shapes.
#[derive(Clone, Debug)]
pub struct StubGenerator {
    pub seed: u64,
}

pub fn make_stub_generator(seed: u64) -> StubGenerator {
    StubGenerator { seed }
}

fn value_noise(rng: &mut ChaCha8Rng, cells: usize, size: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / size as f32 * cells as f32;
            let fx = x as f32 / size as f32 * cells as f32;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

impl StubGenerator {
    pub fn render(&self, domain: &str, request_seed: u64, index: usize, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            b"stub-generator",
            &self.seed.to_le_bytes(),
            &request_seed.to_le_bytes(),
            domain.as_bytes(),
            &(index as u64).to_le_bytes(),
        ]));
        let mut field = vec![0.0f32; size * size];
        for (cells, amp) in [(3, 0.5f32), (6, 0.3), (12, 0.2)] {
            for (f, v) in field.iter_mut().zip(value_noise(&mut rng, cells, size)) {
                *f += amp * v;
            }
        }
        let n_blobs = rng.gen_range(2..=4);
        for _ in 0..n_blobs {
            let (cy, cx) = (rng.gen::<f32>(), rng.gen::<f32>());
            let r = rng.gen_range(0.08f32..0.25);
            let a = if rng.gen_bool(0.5) { 0.6 } else { -0.6 };
            for y in 0..size {
                for x in 0..size {
                    let (v, u) = (y as f32 / size as f32, x as f32 / size as f32);
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    field[y * size + x] += a * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
        let (lo, hi) = field.iter().fold((f32::MAX, f32::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = (hi - lo).max(1e-6);
        let style = DomainStyle::for_domain(domain);
        let img = Image::from_fn(size, size, |y, x| {
            let g = (field[y * size + x] - lo) / span;
            style.render(g, x as f32 / size as f32, y as f32 / size as f32)
        });
        quantize(&img)
    }
}

/// Round-trip through 8 bits so in-memory images match their PNG cache.
fn quantize(img: &Image) -> Image {
    Image::from_dynamic(&image::DynamicImage::ImageRgb8(img.to_rgb8()))
}

impl GeneratorBackend for StubGenerator {
    fn name(&self) -> String {
        format!("stub:{}", self.seed)
    }

    fn generate(&self, req: &GenRequest) -> Result<Vec<Image>> {
        if req.count == 0 {
            return Err(OdgError::InvalidArgument("generation count must be >= 1".into()));
        }
        Ok((0..req.count).into_par_iter().map(|i| self.render(&req.domain, req.seed, i, req.image_size)).collect())
    }
}

/// JSON field names of the text-to-image service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionFields {
    pub model: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: String,
    pub count: String,
    pub guidance: String,
    pub steps: String,
    pub size: String,
    /// Response field holding a list of base64-encoded images.
    pub images: String,
}

impl Default for DiffusionFields {
    fn default() -> Self {
        Self {
            model: "model".into(),
            prompt: "prompt".into(),
            negative_prompt: "negative_prompt".into(),
            seed: "seed".into(),
            count: "num_images".into(),
            guidance: "guidance_scale".into(),
            steps: "num_inference_steps".into(),
            size: "size".into(),
            images: "images".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Full URL of the generation endpoint.
    pub endpoint: String,
    pub model_id: String,
    pub guidance_scale: f64,
    pub steps: usize,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub fields: DiffusionFields,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:7860/generate".into(),
            model_id: "stable-diffusion-v1-5".into(),
            guidance_scale: 7.5,
            steps: 50,
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
            fields: DiffusionFields::default(),
        }
    }
}

/// Client for an HTTP text-to-image service with negative-prompt support.
pub struct DiffusionClient {
    cfg: DiffusionConfig,
    http: reqwest::blocking::Client,
}

pub fn make_diffusion_client(cfg: DiffusionConfig) -> Result<DiffusionClient> {
    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
        .map_err(|e| OdgError::Config(format!("cannot build HTTP client: {e}")))?;
    Ok(DiffusionClient { cfg, http })
}

impl DiffusionClient {
    /// Request body for one generation call.
    pub fn payload(&self, req: &GenRequest) -> serde_json::Value {
        let f = &self.cfg.fields;
        let mut m = serde_json::Map::new();
        m.insert(f.model.clone(), self.cfg.model_id.clone().into());
        m.insert(f.prompt.clone(), req.positive.clone().into());
        m.insert(f.negative_prompt.clone(), req.negatives.join(", ").into());
        m.insert(f.seed.clone(), req.seed.into());
        m.insert(f.count.clone(), req.count.into());
        m.insert(f.guidance.clone(), self.cfg.guidance_scale.into());
        m.insert(f.steps.clone(), self.cfg.steps.into());
        m.insert(f.size.clone(), req.image_size.into());
        serde_json::Value::Object(m)
    }

    fn decode(&self, body: &serde_json::Value, req: &GenRequest) -> Result<Vec<Image>> {
        let list = body
            .get(&self.cfg.fields.images)
            .and_then(|v| v.as_array())
            .ok_or_else(|| OdgError::Payload(format!("response lacks an `{}` array", self.cfg.fields.images)))?;
        if list.len() != req.count {
            return Err(OdgError::Payload(format!("asked for {} images, got {}", req.count, list.len())));
        }
        list.iter()
            .map(|v| {
                let s = v.as_str().ok_or_else(|| OdgError::Payload("image entry is not a string".into()))?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s.trim())
                    .map_err(|e| OdgError::Payload(format!("bad base64: {e}")))?;
                let img = image::load_from_memory(&bytes).map_err(|e| OdgError::Payload(format!("undecodable image: {e}")))?;
                let img = img.resize_exact(req.image_size as u32, req.image_size as u32, image::imageops::FilterType::Triangle);
                Ok(Image::from_dynamic(&img))
            })
            .collect()
    }

    fn attempt(&self, payload: &serde_json::Value) -> std::result::Result<serde_json::Value, (bool, String)> {
        let resp = self.http.post(&self.cfg.endpoint).json(payload).send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            // client errors will not improve on retry
            return Err((status.is_server_error() || status.as_u16() == 429, format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| (false, format!("response is not JSON: {e}")))
    }
}

impl GeneratorBackend for DiffusionClient {
    fn name(&self) -> String {
        format!("diffusion:{}", self.cfg.model_id)
    }

    fn generate(&self, req: &GenRequest) -> Result<Vec<Image>> {
        let payload = self.payload(req);
        let mut delay = self.cfg.backoff_ms;
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
            }
            match self.attempt(&payload) {
                Ok(body) => return self.decode(&body, req),
                Err((retry, msg)) => {
                    warn!(attempt, endpoint = %self.cfg.endpoint, "generation request failed: {msg}");
                    last = msg;
                    if !retry {
                        if last.starts_with("response is not JSON") {
                            return Err(OdgError::Payload(last));
                        }
                        break;
                    }
                }
            }
        }
        Err(OdgError::OpenGenUnavailable(format!("{}: {last}", self.cfg.endpoint)))
    }
}

/// Manifest stored next to one cached `(domain, seed)` batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub domain: String,
    pub seed: u64,
    pub generator: String,
    pub prompt: String,
    pub negatives: Vec<String>,
    pub prompt_hash: String,
    pub pp_only: bool,
    pub threshold: f64,
    pub image_size: usize,
    pub entries: Vec<CacheEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub file: String,
    pub entropy: f64,
    pub accepted: bool,
}

/// Summary manifest of a whole pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub generator: String,
    pub seed: u64,
    pub pp_only: bool,
    pub threshold: f64,
    pub count_per_domain: usize,
    pub domains: BTreeMap<String, PoolDomainSummary>,
    pub accepted: usize,
    pub generated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolDomainSummary {
    pub prompt: String,
    pub negatives: Vec<String>,
    pub accepted: usize,
    pub generated: usize,
    pub cache_hit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolRequest<'a> {
    pub domains: &'a [String],
    pub known: &'a [String],
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub pp_only: bool,
    pub threshold: f64,
    pub template: &'a str,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(&tmp, text).map_err(|e| OdgError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| OdgError::io(path, e))
}

fn load_cached(dir: &Path, req: &GenRequest, generator: &str, threshold: f64) -> Option<(CacheManifest, Vec<Image>)> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    let m: CacheManifest = serde_json::from_str(&text).ok()?;
    if m.prompt_hash != req.prompt_hash()
        || m.generator != generator
        || m.image_size != req.image_size
        || m.entries.len() != req.count
        || m.threshold != threshold
    {
        return None;
    }
    let images = m
        .entries
        .iter()
        .map(|e| Image::load(&dir.join(&e.file), req.image_size).ok())
        .collect::<Option<Vec<_>>>()?;
    Some((m, images))
}

/// Generate (or reload from `cache`) and filter the pool for every domain.
///
/// Images live at `{cache}/{domain}/{seed}/{idx}.png` with a manifest per
/// directory; a matching manifest is a cache hit and skips generation.
pub fn build_open_pool(
    generator: &dyn GeneratorBackend,
    req: &PoolRequest<'_>,
    cache: Option<&Path>,
) -> Result<(OpenPool, PoolManifest)> {
    let gen_name = generator.name();
    let mut pool = OpenPool { threshold: req.threshold, ..OpenPool::default() };
    let mut summary = BTreeMap::new();
    for domain in req.domains {
        let (positive, negatives) = build_prompts_with(req.template, domain, req.known, req.pp_only)?;
        let greq = GenRequest {
            positive,
            negatives,
            count: req.count,
            seed: req.seed,
            domain: domain.clone(),
            image_size: req.image_size,
        };
        let dir: Option<PathBuf> = cache.map(|c| c.join(domain).join(req.seed.to_string()));
        let cached = dir.as_deref().and_then(|d| load_cached(d, &greq, &gen_name, req.threshold));
        let cache_hit = cached.is_some();
        let images = match cached {
            Some((_, imgs)) => {
                debug!(domain = %domain, "open pool cache hit");
                imgs
            }
            None => generator.generate(&greq)?.iter().map(quantize).collect(),
        };
        let named: Vec<(String, String, Image)> = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| (format!("open/{domain}/{}/{i:05}", req.seed), domain.clone(), img))
            .collect();
        let images_for_cache: Vec<Image> = if cache_hit { Vec::new() } else { named.iter().map(|n| n.2.clone()).collect() };
        let part = filter_pool(named, req.threshold)?;
        if let (Some(dir), false) = (dir.as_deref(), cache_hit) {
            std::fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
            let mut entries = Vec::with_capacity(images_for_cache.len());
            for (i, (img, rec)) in images_for_cache.iter().zip(&part.records).enumerate() {
                let file = format!("{i:05}.png");
                img.save_png(&dir.join(&file))?;
                entries.push(CacheEntry { file, entropy: rec.entropy, accepted: rec.accepted });
            }
            let m = CacheManifest {
                domain: domain.clone(),
                seed: req.seed,
                generator: gen_name.clone(),
                prompt: greq.positive.clone(),
                negatives: greq.negatives.clone(),
                prompt_hash: greq.prompt_hash(),
                pp_only: req.pp_only,
                threshold: req.threshold,
                image_size: req.image_size,
                entries,
            };
            write_json_atomic(&dir.join("manifest.json"), &m)?;
        }
        info!(domain = %domain, accepted = part.samples.len(), generated = part.records.len(), cache_hit, "open pool");
        summary.insert(
            domain.clone(),
            PoolDomainSummary {
                prompt: greq.positive,
                negatives: greq.negatives,
                accepted: part.samples.len(),
                generated: part.records.len(),
                cache_hit,
            },
        );
        pool.extend(part);
    }
    let manifest = PoolManifest {
        generator: gen_name,
        seed: req.seed,
        pp_only: req.pp_only,
        threshold: req.threshold,
        count_per_domain: req.count,
        accepted: pool.samples.len(),
        generated: pool.records.len(),
        domains: summary,
    };
    if let Some(c) = cache {
        std::fs::create_dir_all(c).map_err(|e| OdgError::io(c, e))?;
        let mut m = manifest.clone();
        for s in m.domains.values_mut() {
            // keep the top-level manifest independent of cache state
            s.cache_hit = false;
        }
        write_json_atomic(&c.join("pool.json"), &m)?;
    }
    Ok((pool, manifest))
}

/// Base64 PNG encoding, the wire format of the generation service.
pub fn encode_png_base64(img: &Image) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_template_and_negatives() {
        let (p, n) = build_prompts("sketch", &names(&["dog", "cat"]), false).unwrap();
        assert_eq!(p, "a sketch of an unknown class");
        assert_eq!(n, names(&["dog", "cat"]));
        let (_, n) = build_prompts("sketch", &names(&["dog", "cat"]), true).unwrap();
        assert!(n.is_empty());
        assert!(build_prompts(" ", &names(&["dog"]), false).is_err());
        assert!(build_prompts("art", &[], false).is_err());
    }

    #[test]
    fn entropy_oracles() {
        assert_eq!(grayscale_entropy(&Image::filled(8, 8, [0.3, 0.3, 0.3])), 0.0);
        let two = Image::from_fn(8, 8, |y, _| if y < 4 { [0.0; 3] } else { [1.0; 3] });
        assert!((grayscale_entropy(&two) - 0.125).abs() < 1e-12);
        let uniform = Image::from_fn(16, 16, |y, x| [((y * 16 + x) as f32) / 255.0; 3]);
        assert!((grayscale_entropy(&uniform) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filter_keeps_only_high_entropy() {
        let stub = make_stub_generator(1);
        let mut imgs = Vec::new();
        for i in 0..10 {
            imgs.push((format!("c{i}"), "art".to_string(), Image::filled(32, 32, [i as f32 / 10.0; 3])));
            imgs.push((format!("n{i}"), "art".to_string(), stub.render("art", 0, i, 32)));
        }
        let pool = filter_pool(imgs, 0.2).unwrap();
        assert_eq!(pool.samples.len(), 10);
        assert!(pool.samples.iter().all(|s| s.id.starts_with('n') && s.entropy > 0.2));
        assert!(filter_pool(Vec::new(), 1.5).is_err());
    }

    #[test]
    fn stub_is_deterministic_and_sized() {
        let g = make_stub_generator(3);
        let req = GenRequest {
            positive: "a art of an unknown class".into(),
            negatives: names(&["x"]),
            count: 3,
            seed: 9,
            domain: "art".into(),
            image_size: 40,
        };
        let a = g.generate(&req).unwrap();
        assert_eq!(a, g.generate(&req).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].height(), 40);
        assert_ne!(a[0], a[1]);
    }
}
