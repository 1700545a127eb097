//! Multi-domain corpora, leave-one-domain-out splits and batch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{OdgError, Result};
use crate::opengen::OpenSample;
use crate::pixels::Image;

/// Reserved label of the extra open-set class.
pub const UNKNOWN_LABEL: &str = "unknown";

pub const MIN_IMAGE_SIZE: usize = 32;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug)]
pub struct DomainSample {
    pub id: String,
    pub image: Image,
    pub label: String,
    pub domain: String,
}

#[derive(Clone, Debug)]
pub struct DomainSuite {
    pub name: String,
    pub domains: Vec<String>,
    pub samples: Vec<DomainSample>,
    pub label_sets: BTreeMap<String, BTreeSet<String>>,
}

impl DomainSuite {
    pub fn new(name: impl Into<String>, domains: Vec<String>, samples: Vec<DomainSample>) -> Result<Self> {
        if domains.len() < 2 {
            return Err(OdgError::Data(format!("a suite needs at least 2 domains, got {}", domains.len())));
        }
        let mut label_sets: BTreeMap<String, BTreeSet<String>> =
            domains.iter().map(|d| (d.clone(), BTreeSet::new())).collect();
        for s in &samples {
            if s.label.is_empty() {
                return Err(OdgError::Data(format!("sample {} has an empty label", s.id)));
            }
            if s.image.height() < MIN_IMAGE_SIZE || s.image.width() < MIN_IMAGE_SIZE {
                return Err(OdgError::Data(format!(
                    "sample {} is {}x{}, below the {MIN_IMAGE_SIZE}px minimum",
                    s.id,
                    s.image.height(),
                    s.image.width()
                )));
            }
            label_sets
                .get_mut(&s.domain)
                .ok_or_else(|| OdgError::Data(format!("sample {} has undeclared domain {}", s.id, s.domain)))?
                .insert(s.label.clone());
        }
        if let Some((d, _)) = label_sets.iter().find(|(_, l)| l.is_empty()) {
            return Err(OdgError::Data(format!("empty domain `{d}`")));
        }
        Ok(Self { name: name.into(), domains, samples, label_sets })
    }

    /// Union of all label sets in lexicographic order.
    pub fn classes(&self) -> Vec<String> {
        self.label_sets.values().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn samples_in<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a DomainSample> + 'a {
        self.samples.iter().filter(move |s| s.domain == domain)
    }

    pub fn manifest(&self) -> SuiteManifest {
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.domain.clone()).or_default().entry(s.label.clone()).or_default() += 1;
        }
        SuiteManifest {
            name: self.name.clone(),
            domains: self.domains.clone(),
            classes: self.classes(),
            counts,
        }
    }

    /// Hash over sample ids, labels, domains and pixel data.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(s.label.as_bytes());
            h.update(s.domain.as_bytes());
            h.update(s.image.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub name: String,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Write a suite as `{dir}/{domain}/{class}/{n}.png` plus `manifest.json`.
pub fn write_suite(suite: &DomainSuite, dir: &Path) -> Result<SuiteManifest> {
    let mut counters: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in &suite.samples {
        let n = counters.entry((s.domain.clone(), s.label.clone())).or_default();
        s.image.save_png(&dir.join(&s.domain).join(&s.label).join(format!("{:05}.png", *n)))?;
        *n += 1;
    }
    let manifest = suite.manifest();
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| OdgError::io(&path, e))?;
    Ok(manifest)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| OdgError::io(dir, e))? {
        let entry = entry.map_err(|e| OdgError::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load a `{root}/{domain}/{class}/{image}` tree, resizing every image to
/// `image_size x image_size`. Undecodable files are skipped with a warning.
pub fn load_suite(root: &Path, image_size: usize) -> Result<DomainSuite> {
    if !root.is_dir() {
        return Err(OdgError::Config(format!("dataset root {} does not exist", root.display())));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(OdgError::Config(format!("image size {image_size} below {MIN_IMAGE_SIZE}")));
    }
    let domain_dirs = sorted_subdirs(root)?;
    if domain_dirs.is_empty() {
        return Err(OdgError::Data("no domains found".into()));
    }
    let mut jobs = Vec::new();
    for d in &domain_dirs {
        for c in sorted_subdirs(d)? {
            let mut files: Vec<PathBuf> = fs::read_dir(&c)
                .map_err(|e| OdgError::io(&c, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            jobs.extend(files.into_iter().map(|f| (file_name(d), file_name(&c), f)));
        }
    }
    let samples: Vec<DomainSample> = jobs
        .par_iter()
        .filter_map(|(domain, label, path)| match Image::load(path, image_size) {
            Ok(image) => Some(DomainSample {
                id: format!("{domain}/{label}/{}", file_name(path)),
                image,
                label: label.clone(),
                domain: domain.clone(),
            }),
            Err(e) => {
                warn!("skipping undecodable image {}: {e}", path.display());
                None
            }
        })
        .collect();
    let domains: Vec<String> = domain_dirs.iter().map(|d| file_name(d)).collect();
    for d in &domains {
        if !samples.iter().any(|s| &s.domain == d) {
            return Err(OdgError::Data(format!("empty domain `{d}`")));
        }
    }
    let name = file_name(root);
    DomainSuite::new(name, domains, samples)
}

/// A class referenced by global index or by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

/// Restriction of the classes each source domain contributes.
///
/// `Positional` lists class subsets for the first, second, ... source of
/// every split (in suite domain order, target skipped); `ByDomain` keys the
/// subsets by domain name. Domains not covered keep all their classes, and
/// the target domain is never restricted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassSplit {
    Positional { sources: Vec<Vec<ClassRef>> },
    ByDomain(BTreeMap<String, Vec<ClassRef>>),
}

impl ClassSplit {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OdgError::Config(format!("class split: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OdgError::io(path, e))?;
        Self::from_json(&text)
    }

    fn resolve(refs: &[ClassRef], classes: &[String]) -> Result<BTreeSet<String>> {
        refs.iter()
            .map(|r| match r {
                ClassRef::Index(i) => classes
                    .get(*i)
                    .cloned()
                    .ok_or_else(|| OdgError::Config(format!("class index {i} out of range (0..{})", classes.len()))),
                ClassRef::Name(n) if classes.contains(n) => Ok(n.clone()),
                ClassRef::Name(n) => Err(OdgError::UnknownClass(n.clone())),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sources: Vec<String>,
    pub target: String,
    /// Known label set Y, lexicographic.
    pub known_labels: Vec<String>,
    /// Y followed by [`UNKNOWN_LABEL`].
    pub augmented_labels: Vec<String>,
    pub target_open_labels: BTreeSet<String>,
    /// Classes each source domain contributes.
    pub source_classes: BTreeMap<String, BTreeSet<String>>,
}

impl SplitSpec {
    pub fn num_known(&self) -> usize {
        self.known_labels.len()
    }

    /// Classifier index of the open class (one past the known labels).
    pub fn unknown_index(&self) -> usize {
        self.known_labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.augmented_labels.iter().position(|l| l == label)
    }

    pub fn is_closed_set(&self) -> bool {
        self.target_open_labels.is_empty()
    }

    /// Source samples whose class the split admits, with their label index.
    pub fn real_pool<'a>(&self, suite: &'a DomainSuite) -> Vec<(&'a DomainSample, usize)> {
        suite
            .samples
            .iter()
            .filter(|s| self.source_classes.get(&s.domain).is_some_and(|c| c.contains(&s.label)))
            .map(|s| (s, self.label_index(&s.label).expect("source class is known")))
            .collect()
    }

    pub fn target_samples<'a>(&self, suite: &'a DomainSuite) -> Vec<&'a DomainSample> {
        suite.samples.iter().filter(|s| s.domain == self.target).collect()
    }

    /// Ground-truth index for a target sample: its class, or the open index.
    pub fn target_index(&self, label: &str) -> usize {
        self.known_labels.iter().position(|l| l == label).unwrap_or(self.unknown_index())
    }
}

/// One split per domain acting as target, all others as sources.
pub fn make_lodo_splits(suite: &DomainSuite, class_split: Option<&ClassSplit>) -> Result<Vec<SplitSpec>> {
    if suite.domains.len() < 2 {
        return Err(OdgError::Data("leave-one-domain-out needs at least 2 domains".into()));
    }
    let classes = suite.classes();
    if classes.iter().any(|c| c == UNKNOWN_LABEL) {
        return Err(OdgError::Data(format!("`{UNKNOWN_LABEL}` is reserved and cannot be a class name")));
    }
    if let Some(ClassSplit::ByDomain(map)) = class_split {
        if let Some(d) = map.keys().find(|d| !suite.domains.contains(d)) {
            return Err(OdgError::Config(format!("class split names unknown domain `{d}`")));
        }
    }
    let mut splits = Vec::with_capacity(suite.domains.len());
    for target in &suite.domains {
        let sources: Vec<String> = suite.domains.iter().filter(|d| *d != target).cloned().collect();
        let mut source_classes = BTreeMap::new();
        for (pos, src) in sources.iter().enumerate() {
            let available = &suite.label_sets[src];
            let allowed = match class_split {
                None => available.clone(),
                Some(ClassSplit::ByDomain(map)) => match map.get(src) {
                    Some(refs) => ClassSplit::resolve(refs, &classes)?,
                    None => available.clone(),
                },
                Some(ClassSplit::Positional { sources: subsets }) => match subsets.get(pos) {
                    Some(refs) => ClassSplit::resolve(refs, &classes)?,
                    None => available.clone(),
                },
            };
            let kept: BTreeSet<String> = allowed.intersection(available).cloned().collect();
            source_classes.insert(src.clone(), kept);
        }
        let known: BTreeSet<String> = source_classes.values().flatten().cloned().collect();
        let known_labels: Vec<String> = known.iter().cloned().collect();
        if known_labels.is_empty() {
            return Err(OdgError::Data(format!("split with target `{target}` has no known classes")));
        }
        let mut augmented_labels = known_labels.clone();
        augmented_labels.push(UNKNOWN_LABEL.to_string());
        let target_open_labels = suite.label_sets[target].difference(&known).cloned().collect();
        splits.push(SplitSpec {
            sources,
            target: target.clone(),
            known_labels,
            augmented_labels,
            target_open_labels,
            source_classes,
        });
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Procedural toy suite
// ---------------------------------------------------------------------------

const TOY_DOMAINS: &[&str] = &["art", "cartoon", "photo", "sketch", "clipart", "product", "quickdraw", "real"];
const TOY_FAMILIES: &[&str] = &["hstripes", "vstripes", "diagonals", "checker", "rings", "dots"];

/// Deterministic 64-bit stream seed derived from a label path.
pub(crate) fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Pointwise color map and additive texture that define a visual domain.
#[derive(Clone, Debug)]
pub struct DomainStyle {
    pub dark: [f32; 3],
    pub light: [f32; 3],
    pub gamma: f32,
    pub texture_freq: f32,
    pub texture_angle: f32,
    pub texture_amp: f32,
}

impl DomainStyle {
    /// Style keyed by domain name only, so generators and the toy suite agree.
    pub fn for_domain(name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"domain-style", name.as_bytes()]));
        let dark = [rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35)];
        let light = [rng.gen_range(0.65..1.0), rng.gen_range(0.65..1.0), rng.gen_range(0.65..1.0)];
        let (dark, light) = if rng.gen_bool(0.3) { (light, dark) } else { (dark, light) };
        Self {
            dark,
            light,
            gamma: rng.gen_range(0.6..1.6),
            texture_freq: rng.gen_range(5.0..11.0),
            texture_angle: rng.gen_range(0.0..std::f32::consts::PI),
            texture_amp: rng.gen_range(0.04..0.1),
        }
    }

    /// Map a gray level in `[0, 1]` at normalized position `(u, v)` to RGB.
    pub fn render(&self, g: f32, u: f32, v: f32) -> [f32; 3] {
        let g = g.clamp(0.0, 1.0).powf(self.gamma);
        let (s, c) = self.texture_angle.sin_cos();
        let tex = self.texture_amp
            * (std::f32::consts::TAU * self.texture_freq * (u * c + v * s)).sin();
        std::array::from_fn(|ch| self.dark[ch] + (self.light[ch] - self.dark[ch]) * g + tex)
    }
}

fn toy_domain_name(i: usize) -> String {
    TOY_DOMAINS.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("domain{i:02}"))
}

fn toy_class_name(c: usize) -> String {
    let family = TOY_FAMILIES[c % TOY_FAMILIES.len()];
    match c / TOY_FAMILIES.len() {
        0 => family.to_string(),
        tier => format!("{family}{}", tier + 1),
    }
}

/// Gray-level pattern for class `c` at normalized coordinates.
fn class_pattern(c: usize, u: f32, v: f32, freq: f32, phase: f32, center: (f32, f32)) -> f32 {
    use std::f32::consts::TAU;
    let s = |t: f32| 0.5 + 0.5 * t.sin();
    match c % TOY_FAMILIES.len() {
        0 => s(TAU * freq * v + phase),
        1 => s(TAU * freq * u + phase),
        2 => s(TAU * freq * (u + v) * std::f32::consts::FRAC_1_SQRT_2 + phase),
        3 => {
            let t = (TAU * freq * u + phase).sin() * (TAU * freq * v + phase).sin();
            0.5 + 0.5 * (4.0 * t).tanh()
        }
        4 => {
            let r = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
            s(TAU * 1.5 * freq * r + phase)
        }
        _ => {
            let fu = (freq * u + phase / TAU).fract() - 0.5;
            let fv = (freq * v + phase / TAU).fract() - 0.5;
            (-(fu * fu + fv * fv) / 0.03).exp()
        }
    }
}

/// Procedural multi-domain suite: the class picks a pattern family and
/// frequency tier, the domain picks a [`DomainStyle`].
pub fn synth_toy_suite(
    seed: u64,
    n_domains: usize,
    n_classes: usize,
    n_per_cell: usize,
    image_size: usize,
) -> Result<DomainSuite> {
    if n_domains < 2 || n_classes < 3 || image_size < MIN_IMAGE_SIZE || n_per_cell == 0 {
        return Err(OdgError::InvalidArgument(format!(
            "toy suite needs n_domains >= 2, n_classes >= 3, n_per_cell >= 1, image_size >= {MIN_IMAGE_SIZE}; \
             got ({n_domains}, {n_classes}, {n_per_cell}, {image_size})"
        )));
    }
    let mut domains: Vec<String> = (0..n_domains).map(toy_domain_name).collect();
    domains.sort();
    let classes: Vec<(usize, String)> = (0..n_classes).map(|c| (c, toy_class_name(c))).collect();
    let mut samples = Vec::with_capacity(n_domains * n_classes * n_per_cell);
    for domain in &domains {
        let style = DomainStyle::for_domain(domain);
        for (c, class) in &classes {
            for i in 0..n_per_cell {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    &seed.to_le_bytes(),
                    domain.as_bytes(),
                    class.as_bytes(),
                    &(i as u64).to_le_bytes(),
                ]));
                let tier = (c / TOY_FAMILIES.len()) as f32;
                let freq = 2.5 + 1.5 * tier + rng.gen_range(-0.3..0.3);
                let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                let center = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
                let size = image_size as f32;
                let image = Image::from_fn(image_size, image_size, |y, x| {
                    let (u, v) = (x as f32 / size, y as f32 / size);
                    let g = class_pattern(*c, u, v, freq, phase, center);
                    let mut px = style.render(g, u, v);
                    for p in &mut px {
                        *p += rng.gen_range(-0.02..0.02);
                    }
                    px
                });
                samples.push(DomainSample {
                    id: format!("{domain}/{class}/{i:05}"),
                    image,
                    label: class.clone(),
                    domain: domain.clone(),
                });
            }
        }
    }
    DomainSuite::new(format!("toy-{seed}"), domains, samples)
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainBatch<'a> {
    pub real: Vec<(&'a DomainSample, usize)>,
    /// Pseudo-open samples, all labeled with the open index.
    pub open: Vec<(&'a OpenSample, usize)>,
}

impl TrainBatch<'_> {
    pub fn len(&self) -> usize {
        self.real.len() + self.open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of pseudo-open slots in a batch.
pub fn open_quota(batch_size: usize, open_fraction: f64) -> usize {
    ((open_fraction * batch_size as f64).round() as usize).min(batch_size)
}

/// Draw one training batch.
///
/// Real samples are drawn class by class, taking each class from two
/// different source domains whenever the pool has it in more than one, so
/// same-class cross-domain pairs are present. Pseudo-open samples are drawn
/// round-robin across their pseudo-domains.
pub fn sample_batch<'a>(
    split: &SplitSpec,
    real_pool: &[(&'a DomainSample, usize)],
    open_pool: &'a [OpenSample],
    batch_size: usize,
    open_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch<'a>> {
    if batch_size < 4 {
        return Err(OdgError::InvalidArgument(format!("batch size {batch_size} < 4")));
    }
    if !(0.0..=1.0).contains(&open_fraction) {
        return Err(OdgError::InvalidArgument(format!("open fraction {open_fraction} outside [0, 1]")));
    }
    if real_pool.is_empty() {
        return Err(OdgError::Data("empty real pool".into()));
    }
    let n_open = open_quota(batch_size, open_fraction);
    if n_open > 0 && open_pool.is_empty() {
        return Err(OdgError::Data("open pool is empty but the open fraction is positive".into()));
    }
    let n_real = batch_size - n_open;

    // class -> domain -> pool indices, in deterministic order
    let mut by_class: BTreeMap<usize, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, (s, label)) in real_pool.iter().enumerate() {
        if *label >= split.num_known() {
            return Err(OdgError::Data(format!("real sample {} carries a non-known label index", s.id)));
        }
        by_class.entry(*label).or_default().entry(s.domain.as_str()).or_default().push(i);
    }
    let class_ids: Vec<usize> = by_class.keys().copied().collect();
    let mut real = Vec::with_capacity(n_real);
    while real.len() < n_real {
        let c = *class_ids.choose(rng).expect("non-empty pool");
        let doms: Vec<&Vec<usize>> = by_class[&c].values().collect();
        let take = (n_real - real.len()).min(2);
        if doms.len() >= 2 {
            let mut order: Vec<usize> = (0..doms.len()).collect();
            order.shuffle(rng);
            for d in order.into_iter().take(take) {
                let i = *doms[d].choose(rng).expect("non-empty domain bucket");
                real.push(real_pool[i]);
            }
        } else {
            for _ in 0..take {
                let i = *doms[0].choose(rng).expect("non-empty domain bucket");
                real.push(real_pool[i]);
            }
        }
    }

    let mut open = Vec::with_capacity(n_open);
    if n_open > 0 {
        let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in open_pool.iter().enumerate() {
            by_domain.entry(s.domain.as_str()).or_default().push(i);
        }
        let mut buckets: Vec<Vec<usize>> = by_domain.into_values().collect();
        for b in &mut buckets {
            b.shuffle(rng);
        }
        buckets.shuffle(rng);
        let mut cursor = vec![0usize; buckets.len()];
        let mut k = 0;
        while open.len() < n_open {
            let b = k % buckets.len();
            let bucket = &buckets[b];
            let i = if cursor[b] < bucket.len() {
                cursor[b] += 1;
                bucket[cursor[b] - 1]
            } else {
                *bucket.choose(rng).expect("non-empty bucket")
            };
            open.push((&open_pool[i], split.unknown_index()));
            k += 1;
        }
    }
    Ok(TrainBatch { real, open })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_suite(domains: &[&str], classes: &[&[&str]]) -> DomainSuite {
        let mut samples = Vec::new();
        for (d, cls) in domains.iter().zip(classes) {
            for c in *cls {
                for i in 0..3 {
                    samples.push(DomainSample {
                        id: format!("{d}/{c}/{i}"),
                        image: Image::filled(32, 32, [0.1 * i as f32, 0.5, 0.5]),
                        label: c.to_string(),
                        domain: d.to_string(),
                    });
                }
            }
        }
        DomainSuite::new("tiny", domains.iter().map(|s| s.to_string()).collect(), samples).unwrap()
    }

    fn pacs_like() -> DomainSuite {
        let classes: &[&str] = &["dog", "elephant", "giraffe", "guitar", "horse", "house", "person"];
        tiny_suite(&["art_painting", "cartoon", "photo", "sketch"], &[classes, classes, classes, classes])
    }

    #[test]
    fn splits_have_one_target_each() {
        let suite = pacs_like();
        assert_eq!(suite.classes().len(), 7);
        let splits = make_lodo_splits(&suite, None).unwrap();
        assert_eq!(splits.len(), 4);
        for s in &splits {
            assert_eq!(s.sources.len(), 3);
            assert!(!s.sources.contains(&s.target));
            assert!(s.target_open_labels.is_empty());
            assert_eq!(s.augmented_labels.last().unwrap(), UNKNOWN_LABEL);
            assert_eq!(s.augmented_labels.len(), s.known_labels.len() + 1);
        }
    }

    #[test]
    fn positional_class_split_mirrors_published_pacs_protocol() {
        let suite = pacs_like();
        let split = ClassSplit::from_json(r#"{"sources": [[3, 0, 1], [4, 0, 2], [5, 1, 2]]}"#).unwrap();
        for s in make_lodo_splits(&suite, Some(&split)).unwrap() {
            assert_eq!(s.known_labels.len(), 6);
            assert_eq!(s.target_open_labels.len(), 1);
            assert!(s.target_open_labels.contains("person"));
            assert_eq!(s.source_classes[&s.sources[0]].len(), 3);
        }
    }

    #[test]
    fn class_split_errors() {
        let suite = pacs_like();
        let bad_name = ClassSplit::from_json(r#"{"photo": ["zebra"]}"#).unwrap();
        assert!(matches!(make_lodo_splits(&suite, Some(&bad_name)), Err(OdgError::UnknownClass(_))));
        let bad_idx = ClassSplit::from_json(r#"{"photo": [9]}"#).unwrap();
        assert!(make_lodo_splits(&suite, Some(&bad_idx)).is_err());
        let bad_domain = ClassSplit::from_json(r#"{"mars": [0]}"#).unwrap();
        assert!(make_lodo_splits(&suite, Some(&bad_domain)).is_err());
    }

    #[test]
    fn identical_label_sets_are_closed_set() {
        let suite = tiny_suite(&["a", "b"], &[&["x", "y"], &["x", "y"]]);
        let splits = make_lodo_splits(&suite, None).unwrap();
        assert_eq!(splits.len(), 2);
        assert!(splits.iter().all(SplitSpec::is_closed_set));
    }

    #[test]
    fn suite_needs_two_domains_and_rejects_reserved_label() {
        assert!(DomainSuite::new("x", vec!["a".into()], vec![]).is_err());
        let suite = tiny_suite(&["a", "b"], &[&["unknown"], &["x"]]);
        assert!(make_lodo_splits(&suite, None).is_err());
    }

    #[test]
    fn toy_suite_counts_and_determinism() {
        let a = synth_toy_suite(7, 3, 6, 20, 64).unwrap();
        assert_eq!(a.samples.len(), 360);
        assert_eq!(a.domains.len(), 3);
        assert_eq!(a.classes().len(), 6);
        let b = synth_toy_suite(7, 3, 6, 20, 64).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(synth_toy_suite(7, 1, 6, 2, 64).is_err());
        assert!(synth_toy_suite(7, 2, 2, 2, 64).is_err());
        assert!(synth_toy_suite(7, 2, 3, 2, 16).is_err());
    }

    #[test]
    fn toy_suite_seeds_differ() {
        for s in 0..10u64 {
            let a = synth_toy_suite(s, 2, 3, 1, 32).unwrap();
            let b = synth_toy_suite(s + 100, 2, 3, 1, 32).unwrap();
            assert_ne!(a.checksum(), b.checksum());
        }
    }

    #[test]
    fn quota_matches_batch_modes() {
        assert_eq!(open_quota(32, 0.25), 8);
        assert_eq!(open_quota(8, 0.25), 2);
        assert_eq!(open_quota(32, 0.0), 0);
    }

    fn stub_open(domains: &[&str], n: usize) -> Vec<OpenSample> {
        domains
            .iter()
            .flat_map(|d| {
                (0..n).map(move |i| OpenSample {
                    id: format!("{d}/{i}"),
                    image: Image::filled(32, 32, [0.5, 0.5, 0.5]),
                    domain: d.to_string(),
                    entropy: 0.5,
                })
            })
            .collect()
    }

    #[test]
    fn batch_composition_and_labels() {
        let suite = synth_toy_suite(1, 3, 4, 4, 32).unwrap();
        let split = &make_lodo_splits(&suite, None).unwrap()[0];
        let pool = split.real_pool(&suite);
        let open = stub_open(&["art", "cartoon"], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(split, &pool, &open, 32, 0.25, &mut rng).unwrap();
        assert_eq!(b.open.len(), 8);
        assert_eq!(b.real.len(), 24);
        assert!(b.open.iter().all(|(_, y)| *y == split.unknown_index()));
        assert!(b.real.iter().all(|(s, y)| split.known_labels[*y] == s.label));
        // every represented class comes from two domains
        let mut doms: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        for (s, y) in &b.real {
            doms.entry(*y).or_default().insert(&s.domain);
        }
        assert!(doms.values().all(|d| d.len() >= 2));
        let b8 = sample_batch(split, &pool, &open, 8, 0.25, &mut rng).unwrap();
        assert_eq!((b8.open.len(), b8.real.len()), (2, 6));
        let closed = sample_batch(split, &pool, &[], 32, 0.0, &mut rng).unwrap();
        assert_eq!((closed.open.len(), closed.real.len()), (0, 32));
    }

    #[test]
    fn batch_errors() {
        let suite = synth_toy_suite(1, 2, 3, 2, 32).unwrap();
        let split = &make_lodo_splits(&suite, None).unwrap()[0];
        let pool = split.real_pool(&suite);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(split, &[], &[], 8, 0.0, &mut rng).is_err());
        assert!(sample_batch(split, &pool, &[], 8, 0.25, &mut rng).is_err());
        assert!(sample_batch(split, &pool, &[], 3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let suite = synth_toy_suite(3, 2, 3, 2, 32).unwrap();
        let written = write_suite(&suite, dir.path()).unwrap();
        // a stray file that is not an image is ignored, a corrupt png is skipped
        fs::write(dir.path().join("art/diagonals/notes.txt"), "x").unwrap();
        fs::write(dir.path().join("art/diagonals/broken.png"), "not a png").unwrap();
        fs::remove_file(dir.path().join("manifest.json")).unwrap();
        let loaded = load_suite(dir.path(), 32).unwrap();
        assert_eq!(loaded.manifest().counts, written.counts);
        assert_eq!(loaded.label_sets, suite.label_sets);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_suite(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("no domains found"));
        assert!(matches!(load_suite(&dir.path().join("missing"), 32), Err(OdgError::Config(_))));
        fs::create_dir_all(dir.path().join("a/cls")).unwrap();
        fs::create_dir_all(dir.path().join("b/cls")).unwrap();
        Image::filled(32, 32, [0.2; 3]).save_png(&dir.path().join("a/cls/0.png")).unwrap();
        let err = load_suite(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("empty domain"));
    }
}
