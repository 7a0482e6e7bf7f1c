//! The full model bundle (network, PE, CE, denoiser), batching and the two
//! stage losses.

use std::sync::Arc;

use autograd::{Graph, ParamStore, Real, Var};
use ndarray::{Array2, Array4, ArrayD, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::data::{ComplexImage, MultiContrastSample};
use crate::diffusion::{diff_loss, sample_prior, Denoiser, DiffusionSchedule, SamplerNoise};
use crate::error::{Error, Result};
use crate::kspace::{dc_loss_graph, fft2c, KSpaceMask};
use crate::plwformer::{bilinear_upsample, NetInputs, Plwformer};
use crate::prior::{pixel_unshuffle, Encoder};
use crate::seed;

pub const PE_PREFIX: &str = "pe.";
pub const CE_PREFIX: &str = "ce.";
pub const DENOISER_PREFIX: &str = "denoiser.";

/// Parameters that only exist for stage two.
pub fn is_stage_two_only(name: &str) -> bool {
    name.starts_with(CE_PREFIX) || name.starts_with(DENOISER_PREFIX)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub scale: usize,
    pub net: Plwformer,
    pub pe: Encoder,
    pub ce: Encoder,
    pub denoiser: Denoiser,
}

impl Model {
    /// Registers every parameter of both stages in `store`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, scale: usize, rng: &mut impl Rng) -> Self {
        let net = Plwformer::new(store, cfg, scale, rng);
        let lc = cfg.latent_channels;
        let pe = Encoder::new(store, "pe", 2 * scale * scale + 2, lc, cfg.encoder_blocks, cfg.leaky_slope, rng);
        let ce = Encoder::new(store, "ce", 2, lc, cfg.encoder_blocks, cfg.leaky_slope, rng);
        let denoiser = Denoiser::new(
            store,
            "denoiser",
            cfg.prior_dim(),
            cfg.time_embed_dim,
            cfg.denoiser_hidden,
            cfg.denoiser_layers,
            cfg.leaky_slope,
            rng,
        );
        Self { config: cfg.clone(), scale, net, pe, ce, denoiser }
    }

    /// Fresh weights seeded from the training seed.
    pub fn init<T: Real>(cfg: &RunConfig) -> (ParamStore<T>, Self) {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(cfg.train.seed, &[seed::stream::INIT]);
        let model = Self::new(&mut store, &cfg.model, cfg.data.scale, &mut rng);
        (store, model)
    }

    pub fn net_inputs<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &Inputs) -> NetInputs {
        NetInputs {
            lr: g.constant(cast::<T>(&inputs.lr)),
            lr_up: g.constant(cast::<T>(&inputs.lr_up)),
            reference: match (&inputs.reference, self.config.use_reference) {
                (Some(r), true) => Some(g.constant(cast::<T>(r))),
                _ => None,
            },
        }
    }

    /// `Z` from the HR target and LR input.
    pub fn pe_extract<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Var {
        let x = g.constant(cast::<T>(&batch.pe_input));
        self.pe.forward(g, x)
    }

    /// The condition `C` (zeros when the condition path is disabled).
    pub fn condition<T: Real>(&self, g: &mut Graph<'_, T>, lr: Var) -> Var {
        if self.config.use_condition {
            self.ce.forward(g, lr)
        } else {
            let b = g.shape(lr)[0];
            g.constant(ArrayD::zeros(vec![b, self.config.prior_dim()]))
        }
    }

    /// `Ẑ` from a full reverse rollout conditioned on the LR input.
    pub fn sample<T: Real>(&self, g: &mut Graph<'_, T>, lr: Var, schedule: &DiffusionSchedule, noise: &SamplerNoise) -> Var {
        let c = self.condition(g, lr);
        sample_prior(g, &self.denoiser, c, schedule, noise)
    }

    /// Super-resolved image `[B, H, W, 2]`; `z` is ignored without a prior.
    pub fn reconstruct<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &NetInputs, z: Option<Var>) -> Var {
        let z = if self.config.use_prior { z } else { None };
        self.net.forward(g, inputs, z)
    }
}

/// Network inputs that never involve the HR target.
#[derive(Clone, Debug)]
pub struct Inputs {
    /// `[B, h, w, 2]`.
    pub lr: ArrayD<f32>,
    /// `[B, h·s, w·s, 2]`.
    pub lr_up: ArrayD<f32>,
    /// Space-to-depth reference `[B, h, w, 2s²]`.
    pub reference: Option<ArrayD<f32>>,
}

impl Inputs {
    pub fn new(lr: &[&ComplexImage], reference: Option<&[&ComplexImage]>, scale: usize) -> Result<Self> {
        let first = lr.first().ok_or_else(|| Error::shape("empty batch"))?;
        let (h, w) = (first.height(), first.width());
        for x in lr {
            if (x.height(), x.width()) != (h, w) {
                return Err(Error::shape("LR images in a batch differ in size"));
            }
        }
        let lr4 = stack(lr.iter().map(|x| x.values().clone()))?;
        let lr_up = bilinear_upsample(&lr4, scale).into_dyn();
        let reference = match reference {
            Some(refs) => {
                if refs.len() != lr.len() {
                    return Err(Error::shape("one reference per LR image is required"));
                }
                let mut planes = Vec::with_capacity(refs.len());
                for r in refs {
                    if (r.height(), r.width()) != (h * scale, w * scale) {
                        return Err(Error::shape(format!(
                            "reference is {}x{}, expected {}x{} for a {h}x{w} input at scale {scale}",
                            r.height(),
                            r.width(),
                            h * scale,
                            w * scale
                        )));
                    }
                    planes.push(pixel_unshuffle(r, scale)?);
                }
                Some(stack(planes)?.into_dyn())
            }
            None => None,
        };
        Ok(Self { lr: lr4.into_dyn(), lr_up, reference })
    }

    pub fn batch_size(&self) -> usize {
        self.lr.shape()[0]
    }
}

pub(crate) fn cast<T: Real>(a: &ArrayD<f32>) -> ArrayD<T> {
    a.mapv(|v| T::lit(v as f64))
}

fn stack(planes: impl IntoIterator<Item = ndarray::Array3<f32>>) -> Result<Array4<f32>> {
    let planes: Vec<_> = planes.into_iter().map(|p| p.insert_axis(Axis(0))).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// A training batch: inputs plus everything derived from the HR target.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Inputs,
    /// `[B, H, W, 2]`.
    pub hr: ArrayD<f32>,
    /// `unshuffle(HR) ‖ LR`, `[B, h, w, 2s² + 2]`.
    pub pe_input: ArrayD<f32>,
    pub k_hr: Vec<Arc<Array2<Complex64>>>,
    pub mask: KSpaceMask,
}

impl Batch {
    pub fn new(samples: &[&MultiContrastSample], scale: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
        let lr: Vec<&ComplexImage> = samples.iter().map(|s| &s.target_lr).collect();
        let refs: Vec<&ComplexImage> = samples.iter().map(|s| &s.ref_hr).collect();
        let inputs = Inputs::new(&lr, Some(&refs), scale)?;
        let hr = stack(samples.iter().map(|s| s.target_hr.values().clone()))?;
        let unshuffled = stack(
            samples
                .iter()
                .map(|s| pixel_unshuffle(&s.target_hr, scale))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let pe_input = ndarray::concatenate(Axis(3), &[unshuffled.view(), inputs.lr.view().into_dimensionality().unwrap()])
            .map_err(|e| Error::shape(e.to_string()))?;
        let k_hr = samples.iter().map(|s| Arc::new(fft2c(&s.target_hr).values)).collect();
        if samples.iter().any(|s| s.mask != first.mask) {
            return Err(Error::shape("samples in a batch must share one sampling mask"));
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            inputs,
            hr: hr.into_dyn(),
            pe_input: pe_input.into_dyn(),
            k_hr,
            mask: first.mask.clone(),
        })
    }
}

/// Per-term loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_img: f64,
    pub l_dc: f64,
    pub l_diff: f64,
    pub total: f64,
}

/// Image and data-consistency terms for a reconstruction.
fn image_terms<T: Real>(
    g: &mut Graph<'_, T>,
    sr: Var,
    batch: &Batch,
    cfg: &RunConfig,
) -> (Vec<(Var, T)>, LossParts) {
    let hr = g.constant(cast::<T>(&batch.hr));
    let l_img = g.l1_loss(sr, hr);
    let mut terms = vec![(l_img, T::lit(cfg.train.lambda_img))];
    let mut parts = LossParts { l_img: g.item(l_img).to_f64_lossy(), ..LossParts::default() };
    if cfg.model.use_dc {
        let l_dc = dc_loss_graph(g, sr, &batch.k_hr, &batch.mask, cfg.kspace.blend_weight);
        parts.l_dc = g.item(l_dc).to_f64_lossy();
        terms.push((l_dc, T::lit(cfg.train.lambda_dc)));
    }
    (terms, parts)
}

/// `λ₁·L_img + λ₂·L_dc` for a given reconstruction `sr`.
pub fn image_loss<T: Real>(g: &mut Graph<'_, T>, sr: Var, batch: &Batch, cfg: &RunConfig) -> (Var, LossParts) {
    let (terms, parts) = image_terms(g, sr, batch, cfg);
    finish(g, &terms, parts, cfg)
}

fn finish<T: Real>(g: &mut Graph<'_, T>, terms: &[(Var, T)], mut parts: LossParts, cfg: &RunConfig) -> (Var, LossParts) {
    let total = g.lincomb(terms);
    let dc = if cfg.model.use_dc { cfg.train.lambda_dc * parts.l_dc } else { 0.0 };
    parts.total = cfg.train.lambda_img * parts.l_img + dc + parts.l_diff;
    (total, parts)
}

/// `λ₁·L_img + λ₂·L_dc` with `Z` from the prior extractor.
pub fn stage1_loss<T: Real>(g: &mut Graph<'_, T>, model: &Model, batch: &Batch, cfg: &RunConfig) -> (Var, LossParts) {
    let inputs = model.net_inputs(g, &batch.inputs);
    let z = cfg.model.use_prior.then(|| model.pe_extract(g, batch));
    let sr = model.reconstruct(g, &inputs, z);
    let (terms, parts) = image_terms(g, sr, batch, cfg);
    finish(g, &terms, parts, cfg)
}

/// Stage-two objective. With joint training: `λ₁·L_img + λ₂·L_dc + L_diff`
/// on the image reconstructed from the sampled prior. Without it, only
/// `L_diff` is optimised and the image terms are reported for reference.
pub fn stage2_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    batch: &Batch,
    cfg: &RunConfig,
    schedule: &DiffusionSchedule,
    noise: &SamplerNoise,
) -> (Var, LossParts) {
    let z = model.pe_extract(g, batch);
    let z = g.constant(g.value(z).clone());
    let inputs = model.net_inputs(g, &batch.inputs);
    let z_hat = model.sample(g, inputs.lr, schedule, noise);
    let l_diff = diff_loss(g, z_hat, z);
    let sr = model.reconstruct(g, &inputs, Some(z_hat));
    let (mut terms, mut parts) = image_terms(g, sr, batch, cfg);
    parts.l_diff = g.item(l_diff).to_f64_lossy();
    if cfg.model.use_joint_training {
        terms.push((l_diff, T::one()));
        finish(g, &terms, parts, cfg)
    } else {
        parts.total = parts.l_diff;
        (l_diff, parts)
    }
}

/// Which parameters a stage updates.
pub fn stage_trainable(stage: u8, cfg: &ModelConfig) -> impl Fn(&str) -> bool + 'static {
    let joint = cfg.use_joint_training;
    move |name: &str| match stage {
        1 => !is_stage_two_only(name),
        _ if joint => !name.starts_with(PE_PREFIX),
        _ => is_stage_two_only(name),
    }
}

/// Cosine similarity per row of two `[B, D]` arrays.
pub fn cosine_rows(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Vec<f64> {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny).max(1e-12)
        })
        .collect()
}
