//! The trainable classifier: prompt state plus the latent-image modules,
//! evaluated against a frozen backend.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{visual_encode, EncoderBackend, VisualOutput};
use crate::error::{OdgError, Result};
use crate::latentspace::{differential_var, FuseProjector, Upsampler};
use crate::pixels::Image;
use crate::promptspace::{init_prompt_state, DomainCue, PromptBaseline, PromptInit, PromptState, PromptVars};
use crate::tape::{Grads, Tape, Tensor, Var};

/// How the latent image is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum XhatMode {
    /// Prompt differential, upsampled and fused with the image.
    #[default]
    Differential,
    /// Domain-independent text embedding of the class name alone.
    Manual,
    /// No fusion: the raw image is encoded for every class.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdgModel {
    pub prompt: PromptState,
    pub upsampler: Upsampler,
    pub fuse: FuseProjector,
    pub xhat: XhatMode,
}

/// Tape handles of every model tensor, in [`OdgModel::tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub prompt: PromptVars,
    pub upsampler: Vec<(Var, Var)>,
    pub fuse: (Var, Var),
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let p = &self.prompt;
        let mut v = vec![p.nu, p.omega, p.dom_weight, p.dom_bias];
        for (w, b) in &self.upsampler {
            v.push(*w);
            v.push(*b);
        }
        v.push(self.fuse.0);
        v.push(self.fuse.1);
        v
    }

    /// Rebuild from handles in [`ModelVars::all`] order.
    pub fn from_slice(vars: &[Var], n_upsampler_layers: usize) -> Result<Self> {
        let want = 6 + 2 * n_upsampler_layers;
        if vars.len() != want {
            return Err(OdgError::Shape(format!("expected {want} parameter handles, got {}", vars.len())));
        }
        let upsampler = (0..n_upsampler_layers).map(|i| (vars[4 + 2 * i], vars[5 + 2 * i])).collect();
        Ok(Self {
            prompt: PromptVars { nu: vars[0], omega: vars[1], dom_weight: vars[2], dom_bias: vars[3] },
            upsampler,
            fuse: (vars[want - 2], vars[want - 1]),
        })
    }
}

/// Per-sample forward result.
#[derive(Clone, Debug)]
pub struct SampleForward {
    /// `[n_classes]` logits `cos(t_y, F_v(x̃^y)) / τ`.
    pub logits: Var,
    /// Prompt differential of every class.
    pub xhat: Vec<Var>,
}

/// Visual statistics of the raw images, keyed by sample id.
pub type CueCache = HashMap<String, VisualOutput>;

pub fn build_cue_cache<'a>(backend: &dyn EncoderBackend, items: impl IntoIterator<Item = (&'a str, &'a Image)>) -> Result<CueCache> {
    let items: Vec<(&str, &Image)> = items.into_iter().collect();
    items
        .par_iter()
        .map(|(id, img)| Ok((id.to_string(), visual_encode(backend, img)?)))
        .collect()
}

/// One image to classify, with the cue for its domain token.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub image: &'a Image,
    pub visual: &'a VisualOutput,
    /// Domain name, required only by the manual prompt baselines.
    pub domain: Option<&'a str>,
}

impl<'a> ModelInput<'a> {
    fn cue(&self) -> DomainCue<'a> {
        DomainCue { domain_name: self.domain, ..DomainCue::from_visual(self.visual) }
    }
}

impl OdgModel {
    pub fn new(
        backend: &dyn EncoderBackend,
        init: &PromptInit<'_>,
        upsampler_channels: &[usize],
        xhat: XhatMode,
    ) -> Result<Self> {
        let prompt = init_prompt_state(backend, init)?;
        let upsampler = Upsampler::new(backend.dims().d_t, upsampler_channels, init.seed)?;
        Ok(Self { prompt, upsampler, fuse: FuseProjector::new(init.seed), xhat })
    }

    pub fn class_names(&self) -> &[String] {
        &self.prompt.class_names
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let p = &self.prompt;
        let mut v = vec![&p.nu, &p.omega, &p.dom_weight, &p.dom_bias];
        for l in &self.upsampler.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.fuse.weight);
        v.push(&self.fuse.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.prompt;
        let mut v = vec![&mut p.nu, &mut p.omega, &mut p.dom_weight, &mut p.dom_bias];
        for l in &mut self.upsampler.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.fuse.weight);
        v.push(&mut self.fuse.bias);
        v
    }

    /// Names parallel to [`OdgModel::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["nu", "omega", "dom_proj.weight", "dom_proj.bias"].map(String::from).to_vec();
        for i in 0..self.upsampler.layers.len() {
            v.push(format!("upsampler.{i}.weight"));
            v.push(format!("upsampler.{i}.bias"));
        }
        v.push("fuse_projector.weight".into());
        v.push("fuse_projector.bias".into());
        v
    }

    /// Which tensors the optimizer updates under this configuration.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let ctx = self.prompt.context_trainable();
        let proj = self.prompt.projector_used();
        let latent = self.xhat != XhatMode::Off;
        let mut v = vec![ctx, ctx, proj, proj];
        v.extend(std::iter::repeat_n(latent, 2 * self.upsampler.layers.len() + 2));
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let latent = self.xhat != XhatMode::Off;
        ModelVars {
            prompt: self.prompt.bind(tape),
            upsampler: self.upsampler.bind(tape, latent),
            fuse: self.fuse.bind(tape, latent),
        }
    }

    /// Gradients of every tensor, zero where none flowed.
    pub fn collect_grads(&self, vars: &ModelVars, grads: &Grads) -> Vec<Vec<f64>> {
        vars.all().into_iter().zip(self.tensors()).map(|(v, t)| grads.get_or_zero(v, t.len())).collect()
    }

    /// Logits over every class for one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        backend: &dyn EncoderBackend,
        input: &ModelInput<'_>,
        tau: f64,
    ) -> Result<SampleForward> {
        if !(tau > 0.0) {
            return Err(OdgError::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        let (h, w) = (input.image.height(), input.image.width());
        let image = tape.constant(input.image.to_tensor());
        let dt = self.prompt.domain_token_var(tape, &vars.prompt, backend, &input.cue())?;
        let dom_seq = self.prompt.compose_dom_var(tape, &vars.prompt, dt)?;
        let dom_emb = backend.text_forward(tape, dom_seq)?;
        let raw_embedding = if self.xhat == XhatMode::Off {
            Some(backend.visual_forward(tape, image, h, w)?.embedding)
        } else {
            None
        };
        let n = self.prompt.class_names.len();
        let mut logits = Vec::with_capacity(n);
        let mut xhats = Vec::with_capacity(n);
        for class in 0..n {
            let (xhat, cls_emb) = differential_var(tape, backend, &self.prompt, &vars.prompt, dt, dom_emb, class)?;
            xhats.push(xhat);
            let v = match raw_embedding {
                Some(e) => e,
                None => {
                    let drive = match self.xhat {
                        XhatMode::Manual => {
                            let tok = tape.constant(Tensor {
                                shape: vec![1, self.prompt.d_tok()],
                                data: self.prompt.class_table[class].clone(),
                            });
                            backend.text_forward(tape, tok)?
                        }
                        _ => xhat,
                    };
                    let map = self.upsampler.forward(tape, &vars.upsampler, drive, (h, w))?;
                    let latent = self.fuse.forward(tape, vars.fuse, image, map)?;
                    backend.visual_forward(tape, latent, h, w)?.embedding
                }
            };
            let c = tape.cosine(cls_emb, v)?;
            logits.push(tape.scale(c, 1.0 / tau));
        }
        let logits = tape.concat_rows(&logits)?;
        let logits = tape.reshape(logits, vec![n])?;
        Ok(SampleForward { logits, xhat: xhats })
    }

    /// Logits as plain numbers.
    pub fn logits(&self, backend: &dyn EncoderBackend, input: &ModelInput<'_>, tau: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = self.forward(&mut tape, &vars, backend, input, tau)?;
        Ok(tape.value(f.logits).data.clone())
    }

    /// Prompt differential of one class as plain numbers.
    pub fn xhat(&self, backend: &dyn EncoderBackend, input: &ModelInput<'_>, class: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.prompt.bind(&mut tape);
        let dt = self.prompt.domain_token_var(&mut tape, &vars, backend, &input.cue())?;
        let dom_seq = self.prompt.compose_dom_var(&mut tape, &vars, dt)?;
        let dom_emb = backend.text_forward(&mut tape, dom_seq)?;
        let (x, _) = differential_var(&mut tape, backend, &self.prompt, &vars, dt, dom_emb, class)?;
        Ok(tape.value(x).data.clone())
    }

    /// Whether the manual prompt baselines need domain names at inference.
    pub fn needs_domain_names(&self) -> bool {
        self.prompt.baseline != PromptBaseline::None
    }
}
