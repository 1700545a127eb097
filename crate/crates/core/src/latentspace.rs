//! Class-conditioned latent images.
//!
//! For an image `x` and candidate class `y`, the prompt differential
//! `x̂ = F_t(P_dom,cls) − F_t(P_dom)` is reshaped to a seed grid, upsampled to
//! a one-channel map, concatenated with `x` and projected back to three
//! channels. Only that fused image is passed to the visual encoder when
//! classifying.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::derive_seed;
use crate::encoders::EncoderBackend;
use crate::error::{OdgError, Result};
use crate::pixels::Image;
use crate::promptspace::{DomainCue, PromptState, PromptVars};
use crate::tape::{bilinear_map, ConvTSpec, Tape, Tensor, Var, GATHER_ZERO};

/// Channel widths of the transpose-convolution stack.
pub const UPSAMPLER_CHANNELS: [usize; 5] = [1, 16, 16, 8, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTLayer {
    pub spec: ConvTSpec,
    /// `[c_in, c_out, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Four stride-2 transpose convolutions, each rectified, then a bilinear
/// resize to the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Upsampler {
    /// Side of the square seed grid the differential is reshaped to.
    pub grid: usize,
    pub layers: Vec<ConvTLayer>,
}

impl Upsampler {
    pub fn new(d_t: usize, channels: &[usize], seed: u64) -> Result<Self> {
        if channels.len() != 5 || channels[0] != 1 || channels[4] != 1 {
            return Err(OdgError::InvalidArgument(format!(
                "upsampler needs 4 stages from 1 to 1 channel, got {channels:?}"
            )));
        }
        let grid = (d_t as f64).sqrt().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"upsampler", &seed.to_le_bytes()]));
        let layers = channels
            .windows(2)
            .map(|w| {
                let spec = ConvTSpec { c_in: w[0], c_out: w[1], kernel: 4, stride: 2, padding: 1 };
                // each output pixel sees c_in * 4 taps at stride 2
                let std = (2.0 / (spec.c_in * 4) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                let n = spec.c_in * spec.c_out * 16;
                ConvTLayer {
                    spec,
                    weight: Tensor { shape: vec![spec.c_in, spec.c_out, 4, 4], data: (0..n).map(|_| dist.sample(&mut rng)).collect() },
                    bias: Tensor::zeros(vec![spec.c_out]),
                }
            })
            .collect();
        Ok(Self { grid, layers })
    }

    /// Spatial side after the transpose-convolution stack.
    pub fn native_size(&self) -> usize {
        self.layers.iter().fold(self.grid, |n, l| l.spec.out_size(n))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    /// `[d_t]` differential node to a `[h * w, 1]` map node.
    pub fn forward(&self, tape: &mut Tape, vars: &[(Var, Var)], diff: Var, target: (usize, usize)) -> Result<Var> {
        let d_t = tape.value(diff).data.len();
        if d_t > self.grid * self.grid {
            return Err(OdgError::Shape(format!("differential of width {d_t} exceeds seed grid {}²", self.grid)));
        }
        let cells = self.grid * self.grid;
        let idx: Vec<usize> = (0..cells).map(|i| if i < d_t { i } else { GATHER_ZERO }).collect();
        let mut x = tape.gather(diff, Arc::new(idx), vec![1, self.grid, self.grid])?;
        for (layer, (w, b)) in self.layers.iter().zip(vars) {
            x = tape.conv_transpose2d(x, *w, *b, layer.spec)?;
            x = tape.relu(x);
        }
        let n = self.native_size();
        let x = tape.reshape(x, vec![n * n, 1])?;
        if (n, n) == target {
            return Ok(x);
        }
        let map = Arc::new(bilinear_map(n, n, 1, target.0, target.1));
        tape.sparse(x, map, vec![target.0 * target.1, 1])
    }
}

/// Per-pixel `4 -> 3` channel projection (a 1x1 convolution).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseProjector {
    /// `[4, 3]`, rows indexed by input channel.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FuseProjector {
    /// Identity on the image channels plus small random weights on the map.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"fuse-projector", &seed.to_le_bytes()]));
        let dist = Normal::new(0.0, 0.1).expect("positive std");
        let mut weight = Tensor::zeros(vec![4, 3]);
        for c in 0..3 {
            weight.data[c * 3 + c] = 1.0;
        }
        for c in 0..3 {
            weight.data[9 + c] = dist.sample(&mut rng);
        }
        Self { weight, bias: Tensor::zeros(vec![3]) }
    }

    /// Identity on the image and zero on the map channel.
    pub fn identity() -> Self {
        let mut weight = Tensor::zeros(vec![4, 3]);
        for c in 0..3 {
            weight.data[c * 3 + c] = 1.0;
        }
        Self { weight, bias: Tensor::zeros(vec![3]) }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }

    /// `[h * w, 3]` image and `[h * w, 1]` map to a `[h * w, 3]` latent image.
    pub fn forward(&self, tape: &mut Tape, vars: (Var, Var), image: Var, map: Var) -> Result<Var> {
        if tape.shape(image)[0] != tape.shape(map)[0] {
            return Err(OdgError::Shape(format!(
                "image {:?} and map {:?} differ spatially",
                tape.shape(image),
                tape.shape(map)
            )));
        }
        let x = tape.concat_cols(image, map)?;
        let y = tape.matmul(x, vars.0)?;
        tape.add_row(y, vars.1)
    }
}

/// Prompt differential on the tape for one class: returns `(x̂, F_t(P_dom,cls))`.
pub fn differential_var(
    tape: &mut Tape,
    backend: &dyn EncoderBackend,
    state: &PromptState,
    vars: &PromptVars,
    dt: Var,
    dom_embedding: Var,
    class: usize,
) -> Result<(Var, Var)> {
    let seq = state.compose_dom_cls_var(tape, vars, dt, class)?;
    let cls_embedding = backend.text_forward(tape, seq)?;
    Ok((tape.sub(cls_embedding, dom_embedding)?, cls_embedding))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialVector {
    pub vector: Vec<f64>,
    pub class_name: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub tensor: Tensor,
    pub height: usize,
    pub width: usize,
    pub class_name: String,
    pub image_id: String,
}

/// `x̂` for one image and class.
pub fn differential(
    backend: &dyn EncoderBackend,
    state: &PromptState,
    cue: &DomainCue<'_>,
    image_id: &str,
    class_name: &str,
) -> Result<DifferentialVector> {
    let class = state.class_index(class_name)?;
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape);
    let dt = state.domain_token_var(&mut tape, &vars, backend, cue)?;
    let dom_seq = state.compose_dom_var(&mut tape, &vars, dt)?;
    let dom_embedding = backend.text_forward(&mut tape, dom_seq)?;
    let (diff, _) = differential_var(&mut tape, backend, state, &vars, dt, dom_embedding, class)?;
    Ok(DifferentialVector {
        vector: tape.value(diff).data.clone(),
        class_name: class_name.to_string(),
        image_id: image_id.to_string(),
    })
}

/// `F_up(x̂)` as a flat `[h * w]` map.
pub fn upsample(ups: &Upsampler, dv: &DifferentialVector, target: (usize, usize)) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = ups.bind(&mut tape, false);
    let d = tape.constant(Tensor::vector(dv.vector.clone()));
    let m = ups.forward(&mut tape, &vars, d, target)?;
    Ok(tape.value(m).data.clone())
}

pub fn fuse(proj: &FuseProjector, image: &Image, map: &[f64], class_name: &str, image_id: &str) -> Result<LatentImage> {
    let (h, w) = (image.height(), image.width());
    if map.len() != h * w {
        return Err(OdgError::Shape(format!("map of {} values for a {h}x{w} image", map.len())));
    }
    let mut tape = Tape::new();
    let vars = proj.bind(&mut tape, false);
    let x = tape.constant(image.to_tensor());
    let m = tape.constant(Tensor { shape: vec![h * w, 1], data: map.to_vec() });
    let out = proj.forward(&mut tape, vars, x, m)?;
    Ok(LatentImage {
        tensor: tape.value(out).clone(),
        height: h,
        width: w,
        class_name: class_name.to_string(),
        image_id: image_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{visual_encode, BackendDescriptor, MockBackend};
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::promptspace::{init_prompt_state, PromptInit};
    use rand::Rng;

    fn setup() -> (MockBackend, PromptState) {
        let b = MockBackend::new(BackendDescriptor { n_patch_tokens: 16, ..Default::default() }).unwrap();
        let names: Vec<String> = ["a", "b", "c", "unknown"].iter().map(|s| s.to_string()).collect();
        let s = init_prompt_state(&b, &PromptInit { seed: 1, ..PromptInit::new(&names) }).unwrap();
        (b, s)
    }

    fn noise(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn seed_grid_and_native_size() {
        let u = Upsampler::new(32, &UPSAMPLER_CHANNELS, 0).unwrap();
        assert_eq!(u.grid, 6);
        assert_eq!(u.native_size(), 96);
        assert!(Upsampler::new(32, &[1, 4, 1], 0).is_err());
    }

    #[test]
    fn differential_shape_and_class_dependence() {
        let (b, s) = setup();
        for seed in 0..10 {
            let img = noise(seed, 32);
            let vo = visual_encode(&b, &img).unwrap();
            let cue = DomainCue::from_visual(&vo);
            let da = differential(&b, &s, &cue, "x", "a").unwrap();
            let db = differential(&b, &s, &cue, "x", "b").unwrap();
            assert_eq!(da.vector.len(), 32);
            let dist: f64 = da.vector.iter().zip(&db.vector).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(dist > 0.0);
        }
        let vo = visual_encode(&b, &noise(0, 32)).unwrap();
        assert!(differential(&b, &s, &DomainCue::from_visual(&vo), "x", "zebra").is_err());
    }

    #[test]
    fn coinciding_prompts_give_zero_differential() {
        let (b, mut s) = setup();
        // class-conditioned prompt [dom] ν ν ν ν [cls] vs domain prompt [dom] ω ω ω ω:
        // make ω carry the class token of "a" as its last context row
        s.omega = Tensor { shape: vec![5, s.d_tok()], data: s.nu.data.iter().chain(&s.class_table[0]).copied().collect() };
        let vo = visual_encode(&b, &noise(1, 32)).unwrap();
        let d = differential(&b, &s, &DomainCue::from_visual(&vo), "x", "a").unwrap();
        assert!(d.vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upsample_shapes_and_zero_map() {
        let mut u = Upsampler::new(32, &UPSAMPLER_CHANNELS, 0).unwrap();
        let dv = DifferentialVector { vector: vec![0.3; 32], class_name: "a".into(), image_id: "x".into() };
        for hw in [64, 96, 224] {
            assert_eq!(upsample(&u, &dv, (hw, hw)).unwrap().len(), hw * hw);
        }
        let zero = DifferentialVector { vector: vec![0.0; 32], ..dv };
        for l in &mut u.layers {
            l.bias.data.iter_mut().for_each(|b| *b = 0.0);
        }
        assert!(upsample(&u, &zero, (64, 64)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fuse_identity_and_map_sensitivity() {
        let img = noise(2, 32);
        let zero_map = vec![0.0; 32 * 32];
        let lat = fuse(&FuseProjector::identity(), &img, &zero_map, "a", "x").unwrap();
        assert_eq!(lat.tensor.shape, vec![32 * 32, 3]);
        assert_eq!(lat.tensor, img.to_tensor());
        let p = FuseProjector::new(3);
        let other: Vec<f64> = (0..32 * 32).map(|i| (i as f64 * 0.01).sin()).collect();
        let a = fuse(&p, &img, &zero_map, "a", "x").unwrap();
        let b = fuse(&p, &img, &other, "a", "x").unwrap();
        assert_ne!(a.tensor, b.tensor);
        assert!(fuse(&p, &img, &other[..10], "a", "x").is_err());
    }

    #[test]
    fn shape_pipeline_for_common_sizes() {
        let (b, s) = setup();
        let u = Upsampler::new(32, &UPSAMPLER_CHANNELS, 0).unwrap();
        let p = FuseProjector::new(0);
        for hw in [64, 96, 224] {
            let img = noise(hw as u64, hw);
            let vo = visual_encode(&b, &img).unwrap();
            let dv = differential(&b, &s, &DomainCue::from_visual(&vo), "x", "c").unwrap();
            let m = upsample(&u, &dv, (hw, hw)).unwrap();
            let lat = fuse(&p, &img, &m, "c", "x").unwrap();
            assert_eq!(lat.tensor.shape, vec![hw * hw, 3]);
        }
    }

    #[test]
    fn upsample_gradient_wrt_differential() {
        let u = Upsampler::new(16, &UPSAMPLER_CHANNELS, 5).unwrap();
        let d: Vec<f64> = (0..16).map(|i| ((i as f64) * 1.3 + 0.4).sin()).collect();
        let probe: Vec<f64> = (0..40 * 40).map(|i| ((i as f64) * 0.17).cos()).collect();
        let report = check_gradients(&[Tensor::vector(d)], GradCheck::default(), |tape, v| {
            let vars = u.bind(tape, false);
            let m = u.forward(tape, &vars, v[0], (40, 40))?;
            let p = tape.constant(Tensor { shape: vec![1600, 1], data: probe.clone() });
            let prod = tape.mul(m, p)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
