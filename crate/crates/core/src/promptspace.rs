//! Learnable prompt state and the two prompt constructors.
//!
//! The class-conditioned prompt is `[dom] ν_1 .. ν_M [cls]` and the
//! domain-only prompt is `[dom] ω_1 .. ω_N`, where the domain token is an
//! affine projection of the image's visual token statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::derive_seed;
use crate::encoders::{EncoderBackend, TokenSequence, VisualOutput};
use crate::error::{OdgError, Result};
use crate::tape::{Tape, Tensor, Var};

/// Phrase the context tokens start from.
pub const INIT_PHRASE: &str = "Image of a";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Phrase,
    Gaussian,
}

/// Where the domain token sits inside both prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenPosition {
    #[default]
    Front,
    Middle,
    End,
}

/// Hand-written prompt variants used as ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptBaseline {
    /// Learned domain projector and learned contexts.
    #[default]
    None,
    /// Domain token is the embedding of the domain name; contexts are the
    /// fixed phrases "of a" and "this is a".
    B1Manual,
    /// Domain token is the embedding of the domain name; contexts learned.
    B2Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// `[M, d_tok]` context of the class-conditioned prompt.
    pub nu: Tensor,
    /// `[N, d_tok]` context of the domain-only prompt.
    pub omega: Tensor,
    /// `[2 d_v, d_tok]` weight of the domain projector.
    pub dom_weight: Tensor,
    /// `[d_tok]` bias of the domain projector.
    pub dom_bias: Tensor,
    /// Classifier label order.
    pub class_names: Vec<String>,
    /// Fixed class-name token for each entry of `class_names`.
    pub class_table: Vec<Vec<f64>>,
    pub position: TokenPosition,
    pub baseline: PromptBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainToken<'a>(pub &'a [f64]);

/// Tape handles of the prompt parameters.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub nu: Var,
    pub omega: Var,
    pub dom_weight: Var,
    pub dom_bias: Var,
}

#[derive(Clone, Debug)]
pub struct PromptInit<'a> {
    pub class_names: &'a [String],
    pub init_mode: InitMode,
    pub seed: u64,
    pub context_cls: usize,
    pub context_dom: usize,
    pub position: TokenPosition,
    pub baseline: PromptBaseline,
}

impl<'a> PromptInit<'a> {
    pub fn new(class_names: &'a [String]) -> Self {
        Self {
            class_names,
            init_mode: InitMode::Phrase,
            seed: 0,
            context_cls: 4,
            context_dom: 4,
            position: TokenPosition::Front,
            baseline: PromptBaseline::None,
        }
    }
}

fn tile(rows: &[Vec<f64>], n: usize) -> Tensor {
    let width = rows[0].len();
    let data = (0..n).flat_map(|i| rows[i % rows.len()].iter().copied()).collect();
    Tensor { shape: vec![n, width], data }
}

pub fn init_prompt_state(backend: &dyn EncoderBackend, init: &PromptInit<'_>) -> Result<PromptState> {
    let dims = backend.dims();
    let names = init.class_names;
    if names.is_empty() {
        return Err(OdgError::InvalidArgument("no class names".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(OdgError::InvalidArgument(format!("duplicate class name `{n}`")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"prompt-init", &init.seed.to_le_bytes()]));
    let (nu, omega) = match init.baseline {
        PromptBaseline::B1Manual => (
            tile(&backend.phrase_embedding("of a"), 2),
            tile(&backend.phrase_embedding("this is a"), 3),
        ),
        _ => {
            if init.context_cls == 0 || init.context_dom == 0 {
                return Err(OdgError::InvalidArgument("context lengths must be >= 1".into()));
            }
            match init.init_mode {
                InitMode::Phrase => {
                    let phrase = backend.phrase_embedding(INIT_PHRASE);
                    (tile(&phrase, init.context_cls), tile(&phrase, init.context_dom))
                }
                InitMode::Gaussian => {
                    let dist = Normal::new(0.0, 1.0).expect("unit normal");
                    let mut draw = |n: usize| Tensor {
                        shape: vec![n, dims.d_tok],
                        data: (0..n * dims.d_tok).map(|_| dist.sample(&mut rng)).collect(),
                    };
                    let nu = draw(init.context_cls);
                    (nu, draw(init.context_dom))
                }
            }
        }
    };
    let fan_in = 2 * dims.d_v;
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let dom_weight = Tensor {
        shape: vec![fan_in, dims.d_tok],
        data: (0..fan_in * dims.d_tok).map(|_| dist.sample(&mut rng)).collect(),
    };
    let position = if init.baseline == PromptBaseline::B1Manual { TokenPosition::Front } else { init.position };
    let state = PromptState {
        nu,
        omega,
        dom_weight,
        dom_bias: Tensor::zeros(vec![dims.d_tok]),
        class_names: names.to_vec(),
        class_table: names.iter().map(|n| backend.name_embedding(n)).collect(),
        position,
        baseline: init.baseline,
    };
    let longest = state.nu.shape[0].max(state.omega.shape[0]) + 2;
    if longest > dims.max_context {
        return Err(OdgError::InvalidArgument(format!(
            "prompt length {longest} exceeds backend context {}",
            dims.max_context
        )));
    }
    Ok(state)
}

impl PromptState {
    pub fn d_tok(&self) -> usize {
        self.dom_bias.len()
    }

    pub fn context_lengths(&self) -> (usize, usize) {
        (self.nu.shape[0], self.omega.shape[0])
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names.iter().position(|n| n == name).ok_or_else(|| OdgError::UnknownClass(name.into()))
    }

    /// Whether the context tokens are updated by training.
    pub fn context_trainable(&self) -> bool {
        self.baseline != PromptBaseline::B1Manual
    }

    /// Whether the domain projector participates in the forward pass.
    pub fn projector_used(&self) -> bool {
        self.baseline == PromptBaseline::None
    }

    pub fn bind(&self, tape: &mut Tape) -> PromptVars {
        let ctx = |tape: &mut Tape, t: &Tensor| {
            if self.context_trainable() {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let nu = ctx(tape, &self.nu);
        let omega = ctx(tape, &self.omega);
        let (dom_weight, dom_bias) = if self.projector_used() {
            (tape.param(self.dom_weight.clone()), tape.param(self.dom_bias.clone()))
        } else {
            (tape.constant(self.dom_weight.clone()), tape.constant(self.dom_bias.clone()))
        };
        PromptVars { nu, omega, dom_weight, dom_bias }
    }

    /// Domain token on the tape from token statistics (or from the domain
    /// name under the manual baselines).
    pub fn domain_token_var(
        &self,
        tape: &mut Tape,
        vars: &PromptVars,
        backend: &dyn EncoderBackend,
        stats: &DomainCue<'_>,
    ) -> Result<Var> {
        if !self.projector_used() {
            let name = stats.domain_name.ok_or_else(|| {
                OdgError::InvalidArgument("manual domain tokens need the domain name".into())
            })?;
            return Ok(tape.constant(Tensor::vector(backend.name_embedding(name))));
        }
        let d_in = self.dom_weight.shape[0];
        if stats.mean.len() + stats.std.len() != d_in {
            return Err(OdgError::Shape(format!(
                "token statistics of width {} + {} do not match projector input {d_in}",
                stats.mean.len(),
                stats.std.len()
            )));
        }
        let mut feat = stats.mean.to_vec();
        feat.extend_from_slice(stats.std);
        let feat = tape.constant(Tensor { shape: vec![1, d_in], data: feat });
        let t = tape.matmul(feat, vars.dom_weight)?;
        let t = tape.reshape(t, vec![self.d_tok()])?;
        tape.add(t, vars.dom_bias)
    }

    fn place(&self, tape: &mut Tape, position: TokenPosition, dt: Var, ctx: Var, tail: Option<Var>) -> Result<Var> {
        let n = tape.shape(ctx)[0];
        let rows: Vec<Var> = (0..n).map(|i| tape.row(ctx, i)).collect::<Result<_>>()?;
        let mut parts = Vec::with_capacity(n + 2);
        match position {
            TokenPosition::Front => {
                parts.push(dt);
                parts.extend(&rows);
                parts.extend(tail);
            }
            TokenPosition::Middle => {
                let half = n / 2;
                parts.extend(&rows[..half]);
                parts.push(dt);
                parts.extend(&rows[half..]);
                parts.extend(tail);
            }
            TokenPosition::End => {
                parts.extend(&rows);
                parts.extend(tail);
                parts.push(dt);
            }
        }
        tape.concat_rows(&parts)
    }

    /// `[dom] ν.. [cls]` on the tape.
    pub fn compose_dom_cls_var(&self, tape: &mut Tape, vars: &PromptVars, dt: Var, class: usize) -> Result<Var> {
        let token = self
            .class_table
            .get(class)
            .ok_or_else(|| OdgError::UnknownClass(format!("#{class}")))?;
        let cls = tape.constant(Tensor::vector(token.clone()));
        self.place(tape, self.position, dt, vars.nu, Some(cls))
    }

    /// `[dom] ω..` on the tape.
    pub fn compose_dom_var(&self, tape: &mut Tape, vars: &PromptVars, dt: Var) -> Result<Var> {
        // "this is a [dom]" under the fully manual baseline
        let position = match self.baseline {
            PromptBaseline::B1Manual => TokenPosition::End,
            _ => self.position,
        };
        self.place(tape, position, dt, vars.omega, None)
    }
}

/// What the domain token is computed from.
#[derive(Clone, Copy, Debug)]
pub struct DomainCue<'a> {
    pub mean: &'a [f64],
    pub std: &'a [f64],
    pub domain_name: Option<&'a str>,
}

impl<'a> DomainCue<'a> {
    pub fn from_visual(vo: &'a VisualOutput) -> Self {
        Self { mean: &vo.token_mean, std: &vo.token_std, domain_name: None }
    }
}

/// Domain token for a visual output (projected statistics).
pub fn domain_token(state: &PromptState, backend: &dyn EncoderBackend, cue: &DomainCue<'_>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape);
    let dt = state.domain_token_var(&mut tape, &vars, backend, cue)?;
    Ok(tape.value(dt).data.clone())
}

pub fn compose_dom_cls(state: &PromptState, dt: DomainToken<'_>, class_name: &str) -> Result<TokenSequence> {
    let class = state.class_index(class_name)?;
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape);
    let dt = checked_token(state, &mut tape, dt)?;
    let seq = state.compose_dom_cls_var(&mut tape, &vars, dt, class)?;
    TokenSequence::from_tensor(tape.value(seq))
}

pub fn compose_dom(state: &PromptState, dt: DomainToken<'_>) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape);
    let dt = checked_token(state, &mut tape, dt)?;
    let seq = state.compose_dom_var(&mut tape, &vars, dt)?;
    TokenSequence::from_tensor(tape.value(seq))
}

fn checked_token(state: &PromptState, tape: &mut Tape, dt: DomainToken<'_>) -> Result<Var> {
    if dt.0.len() != state.d_tok() {
        return Err(OdgError::Shape(format!("domain token width {} != d_tok {}", dt.0.len(), state.d_tok())));
    }
    Ok(tape.constant(Tensor::vector(dt.0.to_vec())))
}
