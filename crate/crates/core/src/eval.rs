//! Metrics, inference and reports.

use autograd::{Graph, ParamStore};
use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{EvalConfig, RunConfig, Variant};
use crate::data::{ComplexImage, MultiContrastSample};
use crate::diffusion::{DiffusionSchedule, SamplerNoise};
use crate::error::{Error, Result};
use crate::model::{is_stage_two_only, Batch, Inputs, Model, PE_PREFIX};
use crate::seed;
use crate::training::Trainer;

fn check_same(x: &ComplexImage, y: &ComplexImage) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::shape(format!(
            "images are {}x{} and {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// PSNR of two magnitude images; `cap_db` when they are identical.
pub fn psnr_magnitude(x: &Array2<f64>, y: &Array2<f64>, data_range: f64, cap_db: f64) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return cap_db;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(cap_db)
}

pub fn psnr(x: &ComplexImage, y: &ComplexImage, cfg: &EvalConfig) -> Result<f64> {
    check_same(x, y)?;
    Ok(psnr_magnitude(&x.magnitude(), &y.magnitude(), cfg.data_range, cfg.psnr_cap_db))
}

/// Normalised 1-D Gaussian taps.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..n).map(|t| taps[t] * x[(i, j + t)]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..n).map(|t| taps[t] * rows[(i + t, j)]).sum())
}

/// Mean SSIM of two magnitude images with a Gaussian window.
pub fn ssim_magnitude(x: &Array2<f64>, y: &Array2<f64>, cfg: &EvalConfig) -> Result<f64> {
    let (h, w) = x.dim();
    if y.dim() != (h, w) {
        return Err(Error::shape("ssim: image shapes differ"));
    }
    if cfg.ssim_window > h.min(w) {
        return Err(Error::shape(format!("ssim window {} exceeds image size {h}x{w}", cfg.ssim_window)));
    }
    let taps = gaussian(cfg.ssim_window, cfg.ssim_sigma);
    let c1 = (cfg.ssim_k1 * cfg.data_range).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.data_range).powi(2);
    let mx = filter_valid(x, &taps);
    let my = filter_valid(y, &taps);
    let sxx = filter_valid(&(x * x), &taps);
    let syy = filter_valid(&(y * y), &taps);
    let sxy = filter_valid(&(x * y), &taps);
    let mut total = 0.0;
    for ((((mx, my), sxx), syy), sxy) in mx.iter().zip(&my).zip(&sxx).zip(&syy).zip(&sxy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cxy = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn ssim(x: &ComplexImage, y: &ComplexImage, cfg: &EvalConfig) -> Result<f64> {
    check_same(x, y)?;
    if x == y {
        return Ok(1.0);
    }
    ssim_magnitude(&x.magnitude(), &y.magnitude(), cfg)
}

/// Splits a `[B, H, W, 2]` array into images.
pub fn to_images(x: &ArrayD<f32>) -> Result<Vec<ComplexImage>> {
    x.outer_iter()
        .map(|a| ComplexImage::new(a.to_owned().into_dimensionality().map_err(|e| Error::shape(e.to_string()))?))
        .collect()
}

/// A loaded model ready for inference.
pub struct Predictor {
    pub config: RunConfig,
    pub stage: Stage,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub schedule: Option<DiffusionSchedule>,
}

impl Predictor {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        let schedule = match ckpt.stage {
            Stage::Two => Some(ckpt.schedule()?),
            Stage::One => None,
        };
        Ok(Self {
            config: ckpt.config.clone(),
            stage: ckpt.stage,
            model: ckpt.model(),
            params: ckpt.params.clone(),
            schedule,
        })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            stage: t.stage,
            model: t.model.clone(),
            params: t.params.clone(),
            schedule: t.schedule.clone(),
        }
    }

    /// Whether [`Self::infer`] is available: a stage-two model, or a model
    /// trained without a prior.
    pub fn can_infer(&self) -> bool {
        !self.config.model.use_prior || self.schedule.is_some()
    }

    /// Sampler noise for each batch element, from `(seed, element index)`.
    fn noise(&self, batch: usize, seed_value: u64) -> SamplerNoise {
        let schedule = self.schedule.as_ref().expect("stage-two model");
        let dim = self.config.model.prior_dim();
        let parts: Vec<SamplerNoise> = (0..batch)
            .map(|i| {
                let mut rng = seed::rng(seed_value, &[seed::stream::INFER, i as u64]);
                SamplerNoise::draw(&mut rng, 1, dim, schedule.steps())
            })
            .collect();
        let cat = |f: &dyn Fn(&SamplerNoise) -> ndarray::ArrayView2<'_, f64>| {
            let views: Vec<_> = parts.iter().map(f).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        SamplerNoise {
            start: cat(&|n| n.start.view()),
            eta: (0..schedule.steps()).map(|t| cat(&|n| n.eta[t].view())).collect(),
        }
    }

    /// Sampled priors `Ẑ`, `[B, 4Ĉ]`.
    pub fn sample_prior(&self, inputs: &Inputs, seed_value: u64) -> Result<ArrayD<f64>> {
        let schedule = self
            .schedule
            .as_ref()
            .ok_or_else(|| Error::config("sampling a prior needs a stage-two checkpoint"))?;
        let mut g = Graph::inference(&self.params);
        let ni = self.model.net_inputs(&mut g, inputs);
        let noise = self.noise(inputs.batch_size(), seed_value);
        let z = self.model.sample(&mut g, ni.lr, schedule, &noise);
        Ok(g.value(z).mapv(|v| v as f64))
    }

    /// Priors `Z` extracted from the HR targets.
    pub fn extract_prior(&self, batch: &Batch) -> ArrayD<f64> {
        let mut g = Graph::inference(&self.params);
        let z = self.model.pe_extract(&mut g, batch);
        g.value(z).mapv(|v| v as f64)
    }

    /// Test-time super-resolution from LR (and reference) only.
    pub fn infer(&self, inputs: &Inputs, seed_value: u64) -> Result<Vec<ComplexImage>> {
        Ok(self.infer_with_macs(inputs, seed_value)?.0)
    }

    /// [`Self::infer`] plus the multiply-accumulates it executed.
    pub fn infer_with_macs(&self, inputs: &Inputs, seed_value: u64) -> Result<(Vec<ComplexImage>, u64)> {
        if !self.can_infer() {
            return Err(Error::config(
                "inference needs a stage-two checkpoint (this model uses a prior but has no sampler)",
            ));
        }
        let mut g = Graph::inference(&self.params);
        let ni = self.model.net_inputs(&mut g, inputs);
        let z = match &self.schedule {
            Some(schedule) if self.config.model.use_prior => {
                let noise = self.noise(inputs.batch_size(), seed_value);
                Some(self.model.sample(&mut g, ni.lr, schedule, &noise))
            }
            _ => None,
        };
        let sr = self.model.reconstruct(&mut g, &ni, z);
        let macs = g.macs();
        Ok((to_images(&g.value(sr).clone())?, macs))
    }

    /// Reconstruction with the prior extracted from the HR target, as seen
    /// during stage-one training.
    pub fn reconstruct_with_target_prior(&self, batch: &Batch) -> Result<Vec<ComplexImage>> {
        let mut g = Graph::inference(&self.params);
        let ni = self.model.net_inputs(&mut g, &batch.inputs);
        let z = self.config.model.use_prior.then(|| self.model.pe_extract(&mut g, batch));
        let sr = self.model.reconstruct(&mut g, &ni, z);
        to_images(&g.value(sr).clone())
    }

    /// Scalars used at inference time (PE excluded; CE and denoiser only
    /// with a prior).
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| {
                !name.starts_with(PE_PREFIX) && (self.config.model.use_prior || !is_stage_two_only(name))
            })
            .map(|(_, _, v)| v.len())
            .sum()
    }
}

/// How the evaluated reconstruction obtains its prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// `Z` from the HR target (stage-one view).
    Target,
    /// `Ẑ` sampled from LR only (test time).
    Sampled,
    /// No prior in the model.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const REPORT_SCHEMA: &str = "priorsr-eval/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config_hash: String,
    pub variant: Option<Variant>,
    pub prior_source: PriorSource,
    pub seed: u64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub data_range: f64,
    pub samples: Vec<SampleMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Multiply-accumulates of one inference pass per sample.
    pub macs_per_sample: u64,
    pub param_count: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parses and checks a report: schema tag, non-empty rows, aggregates
    /// equal to the row means.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s).map_err(|e| Error::format("report", e))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != REPORT_SCHEMA {
            return Err(Error::format("report", format!("schema {:?}", self.schema)));
        }
        if self.samples.is_empty() {
            return Err(Error::format("report", "no samples"));
        }
        let n = self.samples.len() as f64;
        let mp = self.samples.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let ms = self.samples.iter().map(|s| s.ssim).sum::<f64>() / n;
        if mp != self.mean_psnr_db || ms != self.mean_ssim {
            return Err(Error::format("report", "aggregates differ from the per-sample means"));
        }
        Ok(())
    }
}

/// Evaluates `pred` on `samples`, one sample per forward pass.
pub fn evaluate(pred: &Predictor, samples: &[MultiContrastSample], source: PriorSource, seed_value: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::config("nothing to evaluate: the sample list is empty"));
    }
    let ecfg = &pred.config.eval;
    let mut rows = Vec::with_capacity(samples.len());
    let mut macs = 0;
    for s in samples {
        let batch = Batch::new(&[s], pred.config.data.scale)?;
        let sr = match source {
            PriorSource::Target => pred.reconstruct_with_target_prior(&batch)?,
            PriorSource::Sampled | PriorSource::None => {
                let (sr, m) = pred.infer_with_macs(&batch.inputs, seed_value)?;
                macs = m;
                sr
            }
        };
        rows.push(SampleMetrics {
            sample_id: s.sample_id.clone(),
            psnr_db: psnr(&sr[0], &s.target_hr, ecfg)?,
            ssim: ssim(&sr[0], &s.target_hr, ecfg)?,
        });
    }
    if macs == 0 && pred.can_infer() {
        let batch = Batch::new(&[&samples[0]], pred.config.data.scale)?;
        macs = pred.infer_with_macs(&batch.inputs, seed_value)?.1;
    }
    let n = rows.len() as f64;
    let report = EvalReport {
        schema: REPORT_SCHEMA.into(),
        config_hash: pred.config.hash(),
        variant: None,
        prior_source: source,
        seed: seed_value,
        ssim_window: ecfg.ssim_window,
        ssim_sigma: ecfg.ssim_sigma,
        ssim_k1: ecfg.ssim_k1,
        ssim_k2: ecfg.ssim_k2,
        data_range: ecfg.data_range,
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        samples: rows,
        macs_per_sample: macs,
        param_count: pred.param_count(),
    };
    Ok(report)
}

/// Test-time evaluation appropriate for the model: sampled prior when it has
/// one, none otherwise.
pub fn evaluate_inference(pred: &Predictor, samples: &[MultiContrastSample], seed_value: u64) -> Result<EvalReport> {
    let source = if pred.config.model.use_prior { PriorSource::Sampled } else { PriorSource::None };
    evaluate(pred, samples, source, seed_value)
}

/// Outcome of training and evaluating one variant.
pub struct AblationRun {
    pub variant: Variant,
    pub stage_one: Checkpoint,
    pub stage_two: Option<Checkpoint>,
    pub report: EvalReport,
}

/// Trains `variant` (stage one, then stage two when it has one) on
/// `samples` and evaluates test-time inference on the same samples.
pub fn run_ablation(variant: Variant, cfg: &RunConfig, samples: Vec<MultiContrastSample>) -> Result<AblationRun> {
    let cfg = cfg.with_variant(variant);
    cfg.validate()?;
    let mut t1 = Trainer::stage_one(&cfg, samples.clone())?;
    t1.run(|_, _| Ok(()))?;
    let ckpt1 = t1.checkpoint();
    let (pred, ckpt2) = if variant.has_stage_two() {
        let mut t2 = Trainer::stage_two(&cfg, &ckpt1, samples.clone())?;
        t2.run(|_, _| Ok(()))?;
        (Predictor::from_trainer(&t2), Some(t2.checkpoint()))
    } else {
        (Predictor::from_trainer(&t1), None)
    };
    let mut report = evaluate_inference(&pred, &samples, cfg.eval.seed)?;
    report.variant = Some(variant);
    Ok(AblationRun { variant, stage_one: ckpt1, stage_two: ckpt2, report })
}
