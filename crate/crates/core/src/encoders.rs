//! Frozen dual-encoder contract and a small deterministic mock backend.
//!
//! Backends expose their forward passes on a [`Tape`] so that gradients flow
//! through the frozen weights into prompt tokens and into the fused latent
//! image. Backend weights are always registered as tape constants.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::derive_seed;
use crate::error::{OdgError, Result};
use crate::pixels::Image;
use crate::tape::{bilinear_map, SparseMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDims {
    /// Visual embedding / token width.
    pub d_v: usize,
    /// Text token width.
    pub d_tok: usize,
    /// Text embedding width.
    pub d_t: usize,
    pub max_context: usize,
}

/// Pooled embedding and final-layer patch-token statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualOutput {
    pub embedding: Vec<f64>,
    pub token_mean: Vec<f64>,
    pub token_std: Vec<f64>,
}

/// Tape handles for a visual forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    pub embedding: Var,
    pub token_mean: Var,
    pub token_std: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = tokens.first() else {
            return Err(OdgError::InvalidArgument("token sequence is empty".into()));
        };
        let width = first.len();
        if tokens.iter().any(|t| t.len() != width) {
            return Err(OdgError::Shape("token sequence has ragged widths".into()));
        }
        if tokens.iter().flatten().any(|v| !v.is_finite()) {
            return Err(OdgError::NonFinite("token sequence".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let width = self.tokens[0].len();
        Tensor {
            shape: vec![self.tokens.len(), width],
            data: self.tokens.iter().flatten().copied().collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let width = *t.shape.last().unwrap_or(&0);
        if width == 0 {
            return Err(OdgError::Shape(format!("token tensor {:?}", t.shape)));
        }
        Self::new(t.data.chunks(width).map(<[f64]>::to_vec).collect())
    }
}

/// Frozen vision and text encoders.
///
/// Implementations must be deterministic and must never expose their
/// weights to the tape as anything other than constants.
pub trait EncoderBackend: Send + Sync {
    fn dims(&self) -> BackendDims;

    fn descriptor(&self) -> BackendDescriptor;

    /// Visual pass over a `[height * width, 3]` image node.
    fn visual_forward(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<VisualVars>;

    /// Text pass over a `[len, d_tok]` token node, returning a `[d_t]` node.
    fn text_forward(&self, tape: &mut Tape, tokens: Var) -> Result<Var>;

    /// Fixed token embedding of a word or class name (`d_tok` values).
    fn name_embedding(&self, name: &str) -> Vec<f64>;

    /// Hash over every weight the backend owns.
    fn param_digest(&self) -> String;

    /// Token embeddings of a whitespace-separated phrase.
    fn phrase_embedding(&self, phrase: &str) -> Vec<Vec<f64>> {
        phrase.split_whitespace().map(|w| self.name_embedding(w)).collect()
    }
}

pub fn visual_encode(backend: &dyn EncoderBackend, image: &Image) -> Result<VisualOutput> {
    let t = image.to_tensor();
    if !t.is_finite() {
        return Err(OdgError::NonFinite("image".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let v = backend.visual_forward(&mut tape, x, image.height(), image.width())?;
    Ok(VisualOutput {
        embedding: tape.value(v.embedding).data.clone(),
        token_mean: tape.value(v.token_mean).data.clone(),
        token_std: tape.value(v.token_std).data.clone(),
    })
}

pub fn text_encode(backend: &dyn EncoderBackend, seq: &TokenSequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.to_tensor());
    let out = backend.text_forward(&mut tape, x)?;
    Ok(tape.value(out).data.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Clip,
}

/// Config-level description of a backend; checkpoints reference the
/// encoder through this instead of owning its weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendDescriptor {
    pub backend: BackendKind,
    pub seed: u64,
    pub d_v: usize,
    pub d_tok: usize,
    pub d_t: usize,
    pub n_patch_tokens: usize,
    pub max_context: usize,
    pub weights: Option<PathBuf>,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            seed: 0,
            d_v: 32,
            d_tok: 32,
            d_t: 32,
            n_patch_tokens: 64,
            max_context: 16,
            weights: None,
        }
    }
}

impl BackendDescriptor {
    /// Dimensions of the pretrained ViT-B/32 adapter.
    pub fn clip_vit_b32(weights: PathBuf) -> Self {
        Self {
            backend: BackendKind::Clip,
            d_v: 512,
            d_tok: 512,
            d_t: 512,
            n_patch_tokens: 49,
            max_context: 77,
            weights: Some(weights),
            ..Self::default()
        }
    }
}

pub type BackendFactory = fn(&BackendDescriptor) -> Result<Arc<dyn EncoderBackend>>;

/// Build a backend. Pretrained adapters are supplied through `adapter`;
/// none ships with this crate.
pub fn build_backend(desc: &BackendDescriptor, adapter: Option<BackendFactory>) -> Result<Arc<dyn EncoderBackend>> {
    match (desc.backend, adapter) {
        (BackendKind::Mock, _) => Ok(Arc::new(MockBackend::new(desc.clone())?)),
        (BackendKind::Clip, Some(f)) => f(desc),
        (BackendKind::Clip, None) => Err(OdgError::Unsupported(
            "no pretrained CLIP adapter is registered; use `backend = \"mock\"` or supply an adapter".into(),
        )),
    }
}

const PATCH: usize = 4;

/// Tiny fixed-weight encoder pair.
///
/// Vision: bilinear resize to a fixed grid, 4x4 patch projection, a
/// token-mixing layer, then mean pooling and a linear head. Text: learned-free
/// positional offsets, a token-wise layer, causal running-mean mixing, and the
/// last position projected to the text embedding.
pub struct MockBackend {
    desc: BackendDescriptor,
    grid: usize,
    w_patch: Tensor,
    b_patch: Tensor,
    w_mix: Tensor,
    b_mix: Tensor,
    w_head: Tensor,
    pos_text: Tensor,
    w_t1: Tensor,
    b_t1: Tensor,
    w_t2: Tensor,
    b_t2: Tensor,
    w_t3: Tensor,
    resize_cache: Mutex<HashMap<(usize, usize), Arc<SparseMap>>>,
    patch_index: Arc<Vec<usize>>,
    causal: Tensor,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("desc", &self.desc).finish_non_exhaustive()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor { shape, data: (0..n).map(|_| dist.sample(rng)).collect() }
}

impl MockBackend {
    pub fn new(desc: BackendDescriptor) -> Result<Self> {
        let BackendDescriptor { d_v, d_tok, d_t, n_patch_tokens, max_context, .. } = desc;
        if d_v < 8 || d_tok < 8 || d_t < 8 {
            return Err(OdgError::InvalidArgument(format!("mock dims must be >= 8, got ({d_v}, {d_tok}, {d_t})")));
        }
        let grid = (n_patch_tokens as f64).sqrt().round() as usize;
        if grid < 2 || grid * grid != n_patch_tokens {
            return Err(OdgError::InvalidArgument(format!(
                "n_patch_tokens must be a square >= 4, got {n_patch_tokens}"
            )));
        }
        if max_context < 2 {
            return Err(OdgError::InvalidArgument("max_context must be >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"mock-backend", &desc.seed.to_le_bytes()]));
        let patch_dim = 3 * PATCH * PATCH;
        let w_patch = gaussian(&mut rng, vec![patch_dim, d_v], 2.0 / (patch_dim as f64).sqrt());
        let b_patch = gaussian(&mut rng, vec![d_v], 0.1);
        let w_mix = gaussian(&mut rng, vec![d_v, d_v], 1.5 / (d_v as f64).sqrt());
        let b_mix = gaussian(&mut rng, vec![d_v], 0.1);
        let w_head = gaussian(&mut rng, vec![d_v, d_v], 1.0 / (d_v as f64).sqrt());
        let pos_text = gaussian(&mut rng, vec![max_context, d_tok], 0.5);
        let w_t1 = gaussian(&mut rng, vec![d_tok, d_t], 1.0 / (d_tok as f64).sqrt());
        let b_t1 = gaussian(&mut rng, vec![d_t], 0.1);
        let w_t2 = gaussian(&mut rng, vec![d_t, d_t], 1.5 / (d_t as f64).sqrt());
        let b_t2 = gaussian(&mut rng, vec![d_t], 0.1);
        let w_t3 = gaussian(&mut rng, vec![d_t, d_t], 1.0 / (d_t as f64).sqrt());

        let res = grid * PATCH;
        let mut patch_index = Vec::with_capacity(n_patch_tokens * patch_dim);
        for py in 0..grid {
            for px in 0..grid {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        for ch in 0..3 {
                            patch_index.push(((py * PATCH + dy) * res + px * PATCH + dx) * 3 + ch);
                        }
                    }
                }
            }
        }
        let mut causal = Tensor::zeros(vec![max_context, max_context]);
        for i in 0..max_context {
            for j in 0..=i {
                causal.data[i * max_context + j] = 1.0 / (i + 1) as f64;
            }
        }
        Ok(Self {
            desc,
            grid,
            w_patch,
            b_patch,
            w_mix,
            b_mix,
            w_head,
            pos_text,
            w_t1,
            b_t1,
            w_t2,
            b_t2,
            w_t3,
            resize_cache: Mutex::new(HashMap::new()),
            patch_index: Arc::new(patch_index),
            causal,
        })
    }

    fn weights(&self) -> [&Tensor; 11] {
        [
            &self.w_patch,
            &self.b_patch,
            &self.w_mix,
            &self.b_mix,
            &self.w_head,
            &self.pos_text,
            &self.w_t1,
            &self.b_t1,
            &self.w_t2,
            &self.b_t2,
            &self.w_t3,
        ]
    }

    fn resize_map(&self, h: usize, w: usize) -> Arc<SparseMap> {
        let res = self.grid * PATCH;
        let mut cache = self.resize_cache.lock().expect("resize cache poisoned");
        cache.entry((h, w)).or_insert_with(|| Arc::new(bilinear_map(h, w, 3, res, res))).clone()
    }
}

impl EncoderBackend for MockBackend {
    fn dims(&self) -> BackendDims {
        BackendDims {
            d_v: self.desc.d_v,
            d_tok: self.desc.d_tok,
            d_t: self.desc.d_t,
            max_context: self.desc.max_context,
        }
    }

    fn descriptor(&self) -> BackendDescriptor {
        self.desc.clone()
    }

    fn visual_forward(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<VisualVars> {
        if tape.value(image).data.len() != height * width * 3 {
            return Err(OdgError::Shape(format!(
                "image node {:?} is not {height}x{width}x3",
                tape.shape(image)
            )));
        }
        if !tape.value(image).is_finite() {
            return Err(OdgError::NonFinite("image".into()));
        }
        let res = self.grid * PATCH;
        let x = if (height, width) == (res, res) {
            image
        } else {
            let map = self.resize_map(height, width);
            tape.sparse(image, map, vec![res * res, 3])?
        };
        let centre = tape.constant(Tensor::vector(vec![-0.5; 3]));
        let x = tape.add_row(x, centre)?;
        let n_tok = self.grid * self.grid;
        let patches = tape.gather(x, self.patch_index.clone(), vec![n_tok, 3 * PATCH * PATCH])?;
        let w = tape.constant(self.w_patch.clone());
        let b = tape.constant(self.b_patch.clone());
        let e = tape.matmul(patches, w)?;
        let e = tape.add_row(e, b)?;
        let e = tape.tanh(e);
        let m = tape.mix_mean(e, 0.5);
        let w = tape.constant(self.w_mix.clone());
        let b = tape.constant(self.b_mix.clone());
        let f = tape.matmul(m, w)?;
        let f = tape.add_row(f, b)?;
        let tokens = tape.tanh(f);
        let token_mean = tape.mean_rows(tokens);
        let token_std = tape.std_rows(tokens);
        let w = tape.constant(self.w_head.clone());
        let pooled = tape.reshape(token_mean, vec![1, self.desc.d_v])?;
        let emb = tape.matmul(pooled, w)?;
        let embedding = tape.reshape(emb, vec![self.desc.d_v])?;
        Ok(VisualVars { embedding, token_mean, token_std })
    }

    fn text_forward(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let (len, width) = match shape.as_slice() {
            [l, w] => (*l, *w),
            _ => return Err(OdgError::Shape(format!("token node {:?} is not [len, d_tok]", shape))),
        };
        if width != self.desc.d_tok {
            return Err(OdgError::Shape(format!("token width {width} != d_tok {}", self.desc.d_tok)));
        }
        if len == 0 || len > self.desc.max_context {
            return Err(OdgError::InvalidArgument(format!(
                "sequence length {len} outside 1..={}",
                self.desc.max_context
            )));
        }
        let d_tok = self.desc.d_tok;
        let pos = Tensor { shape: vec![len, d_tok], data: self.pos_text.data[..len * d_tok].to_vec() };
        let pos = tape.constant(pos);
        let x = tape.add(tokens, pos)?;
        let w1 = tape.constant(self.w_t1.clone());
        let b1 = tape.constant(self.b_t1.clone());
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let mc = self.desc.max_context;
        let mut causal = Tensor::zeros(vec![len, len]);
        for i in 0..len {
            causal.data[i * len..(i + 1) * len].copy_from_slice(&self.causal.data[i * mc..i * mc + len]);
        }
        let causal = tape.constant(causal);
        let h = tape.matmul(causal, h)?;
        let w2 = tape.constant(self.w_t2.clone());
        let b2 = tape.constant(self.b_t2.clone());
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        let h = tape.tanh(h);
        let last = tape.row(h, len - 1)?;
        let last = tape.reshape(last, vec![1, self.desc.d_t])?;
        let w3 = tape.constant(self.w_t3.clone());
        let out = tape.matmul(last, w3)?;
        tape.reshape(out, vec![self.desc.d_t])
    }

    fn name_embedding(&self, name: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            b"name-embedding",
            &self.desc.seed.to_le_bytes(),
            name.as_bytes(),
        ]));
        gaussian(&mut rng, vec![self.desc.d_tok], 1.0).data
    }

    fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights() {
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
