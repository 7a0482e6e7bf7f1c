//! Run configuration: one TOML document with sections `data`, `model`,
//! `kspace`, `diffusion`, `train` and `eval`. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub kspace: KSpaceConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// Keep the central `1/s` of k-space in each direction.
    #[default]
    KspaceTruncation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side length of the (square) high-resolution images.
    pub hr_size: usize,
    /// Upscaling factor `s`.
    pub scale: usize,
    pub num_ellipses: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub degradation: Degradation,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hr_size: 64,
            scale: 4,
            num_ellipses: 6,
            seed: 0,
            train_samples: 4,
            val_samples: 0,
            test_samples: 0,
            degradation: Degradation::KspaceTruncation,
        }
    }
}

impl DataConfig {
    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Latent channels `Ĉ`; the prior vector has `4Ĉ` entries.
    pub latent_channels: usize,
    /// Window side length `L`.
    pub window: usize,
    /// Key/value token reduction factor `k`.
    pub reduction: usize,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub ffn_expansion: usize,
    /// Channels after the sub-pixel shuffle in the reconstruction head.
    pub head_channels: usize,
    pub shift_windows: bool,
    pub fusion_heads: usize,
    pub encoder_blocks: usize,
    pub leaky_slope: f64,
    pub denoiser_layers: usize,
    pub denoiser_hidden: usize,
    pub time_embed_dim: usize,
    pub use_reference: bool,
    /// Prior modulation, diffusion and condition path as a whole.
    pub use_prior: bool,
    pub use_joint_training: bool,
    pub use_dc: bool,
    pub use_condition: bool,
    /// `false` swaps the permuted large window for a plain window of `L/2`
    /// with no key/value reduction.
    pub use_large_window: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            latent_channels: 16,
            window: 8,
            reduction: 2,
            blocks: vec![2, 2],
            heads: vec![4, 4],
            ffn_expansion: 2,
            head_channels: 8,
            shift_windows: true,
            fusion_heads: 4,
            encoder_blocks: 9,
            leaky_slope: 0.2,
            denoiser_layers: 5,
            denoiser_hidden: 256,
            time_embed_dim: 16,
            use_reference: true,
            use_prior: true,
            use_joint_training: true,
            use_dc: true,
            use_condition: true,
            use_large_window: true,
        }
    }
}

impl ModelConfig {
    /// The reference-scale network (64 channels, four layers of six blocks,
    /// 16×16 windows).
    pub fn large() -> Self {
        Self {
            channels: 64,
            latent_channels: 64,
            window: 16,
            blocks: vec![6, 6, 6, 6],
            heads: vec![4, 4, 4, 4],
            ..Self::default()
        }
    }

    pub fn prior_dim(&self) -> usize {
        4 * self.latent_channels
    }

    pub fn effective_window(&self) -> usize {
        if self.use_large_window {
            self.window
        } else {
            self.window / 2
        }
    }

    pub fn effective_reduction(&self) -> usize {
        if self.use_large_window {
            self.reduction
        } else {
            1
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    #[default]
    CartesianLowfreqRandom,
    Full,
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KSpaceConfig {
    pub pattern: MaskPattern,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub mask_seed: u64,
    /// Weight `n` of measured data in the consistency blend
    /// `(K_SR + n·K_HR)/(1 + n)`; infinity is hard replacement.
    pub blend_weight: f64,
}

impl Default for KSpaceConfig {
    fn default() -> Self {
        Self {
            pattern: MaskPattern::CartesianLowfreqRandom,
            acceleration: 4.0,
            center_fraction: 0.08,
            mask_seed: 0,
            blend_weight: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 4, beta_start: 0.1, beta_end: 0.99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub total_steps: u64,
    pub lr_milestones: Vec<u64>,
    pub lr_decay: f64,
    pub lambda_img: f64,
    pub lambda_dc: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            base_lr: 2e-4,
            total_steps: 5000,
            lr_milestones: vec![2500, 4000, 4500, 4750],
            lr_decay: 0.5,
            lambda_img: 1.0,
            lambda_dc: 0.001,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Changes the step budget and rescales the milestones proportionally.
    pub fn with_total_steps(&self, total: u64) -> Self {
        let old = self.total_steps.max(1) as f64;
        let mut milestones: Vec<u64> = self
            .lr_milestones
            .iter()
            .map(|&m| ((m as f64) * total as f64 / old).round() as u64)
            .filter(|&m| m > 0 && m < total)
            .collect();
        milestones.dedup();
        Self { total_steps: total, lr_milestones: milestones, ..self.clone() }
    }

    /// Step-decayed learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= step).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub psnr_cap_db: f64,
    pub data_range: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Seed for the initial latent noise at inference.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            psnr_cap_db: 100.0,
            data_range: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            seed: 0,
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every cross-field constraint; the message names the fields.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let m = &self.model;
        check(d.scale >= 1, || "data.scale must be at least 1".into())?;
        check(d.hr_size > 0 && d.hr_size % d.scale == 0, || {
            format!("data.hr_size ({}) must be a positive multiple of data.scale ({})", d.hr_size, d.scale)
        })?;
        check(d.num_ellipses >= 1, || "data.num_ellipses must be at least 1".into())?;
        let (l, k) = (m.effective_window(), m.effective_reduction());
        check(m.window >= 2 && m.window % 2 == 0, || format!("model.window ({}) must be even", m.window))?;
        check(m.channels > 0 && m.latent_channels > 0, || "model.channels and model.latent_channels must be positive".into())?;
        check(m.reduction >= 1 && m.window % m.reduction == 0, || {
            format!("model.window ({}) must be divisible by model.reduction ({})", m.window, m.reduction)
        })?;
        check(m.channels % (k * k) == 0, || {
            format!("model.channels ({}) must be divisible by model.reduction² ({})", m.channels, k * k)
        })?;
        check(!m.shift_windows || (l / 2) % k == 0, || {
            format!("half window ({}) must be divisible by model.reduction ({}) when model.shift_windows is set", l / 2, k)
        })?;
        check(!m.blocks.is_empty() && m.blocks.len() == m.heads.len(), || {
            format!("model.blocks ({:?}) and model.heads ({:?}) must be non-empty and of equal length", m.blocks, m.heads)
        })?;
        for (i, &h) in m.heads.iter().enumerate() {
            check(h > 0 && m.channels % h == 0, || {
                format!("model.channels ({}) must be divisible by model.heads[{i}] ({h})", m.channels)
            })?;
        }
        check(m.fusion_heads > 0 && m.channels % m.fusion_heads == 0, || {
            format!("model.channels ({}) must be divisible by model.fusion_heads ({})", m.channels, m.fusion_heads)
        })?;
        check(d.lr_size() % l == 0, || {
            format!("low-resolution size {} (data.hr_size / data.scale) must be divisible by the window length {l}", d.lr_size())
        })?;
        check(m.encoder_blocks >= 1, || "model.encoder_blocks must be at least 1".into())?;
        check(m.denoiser_layers >= 2, || "model.denoiser_layers must be at least 2".into())?;
        check(m.time_embed_dim % 2 == 0, || "model.time_embed_dim must be even".into())?;
        check(m.ffn_expansion >= 1 && m.head_channels >= 1, || "model.ffn_expansion and model.head_channels must be positive".into())?;

        let ks = &self.kspace;
        check(ks.acceleration >= 1.0, || format!("kspace.acceleration ({}) must be at least 1", ks.acceleration))?;
        check(ks.center_fraction > 0.0 && ks.center_fraction < 1.0, || {
            format!("kspace.center_fraction ({}) must lie in (0, 1)", ks.center_fraction)
        })?;
        check(ks.blend_weight >= 0.0, || "kspace.blend_weight must be non-negative".into())?;

        let df = &self.diffusion;
        check(df.steps >= 1, || "diffusion.steps must be at least 1".into())?;
        check(df.beta_start > 0.0 && df.beta_start <= df.beta_end && df.beta_end < 1.0, || {
            format!(
                "diffusion betas must satisfy 0 < beta_start ({}) <= beta_end ({}) < 1",
                df.beta_start, df.beta_end
            )
        })?;

        let t = &self.train;
        check(t.batch_size >= 1, || "train.batch_size must be at least 1".into())?;
        check(t.base_lr > 0.0, || "train.base_lr must be positive".into())?;
        check(t.lr_decay > 0.0 && t.lr_decay <= 1.0, || "train.lr_decay must lie in (0, 1]".into())?;
        check(t.lr_milestones.windows(2).all(|w| w[0] < w[1]), || {
            format!("train.lr_milestones ({:?}) must be strictly increasing", t.lr_milestones)
        })?;
        check(t.lr_milestones.iter().all(|&s| s < t.total_steps), || {
            format!("train.lr_milestones ({:?}) must be below train.total_steps ({})", t.lr_milestones, t.total_steps)
        })?;
        check(t.lambda_img >= 0.0 && t.lambda_dc >= 0.0, || "train loss weights must be non-negative".into())?;

        let e = &self.eval;
        check(e.ssim_window % 2 == 1 && e.ssim_window <= d.hr_size, || {
            format!("eval.ssim_window ({}) must be odd and no larger than data.hr_size", e.ssim_window)
        })?;
        check(e.data_range > 0.0 && e.ssim_sigma > 0.0, || "eval.data_range and eval.ssim_sigma must be positive".into())?;
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut cfg = self.clone();
        variant.apply(&mut cfg.model);
        cfg
    }
}

/// Ablation variants; each one switches off one component group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoReference,
    NoPrior,
    NoJoint,
    NoDc,
    NoCe,
    NoLargeWindow,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoReference,
        Variant::NoPrior,
        Variant::NoJoint,
        Variant::NoDc,
        Variant::NoCe,
        Variant::NoLargeWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReference => "no_reference",
            Variant::NoPrior => "no_prior",
            Variant::NoJoint => "no_joint",
            Variant::NoDc => "no_dc",
            Variant::NoCe => "no_ce",
            Variant::NoLargeWindow => "no_large_window",
        }
    }

    /// Sets all component flags for this variant.
    pub fn apply(self, m: &mut ModelConfig) {
        m.use_reference = true;
        m.use_prior = true;
        m.use_joint_training = true;
        m.use_dc = true;
        m.use_condition = true;
        m.use_large_window = true;
        match self {
            Variant::Full => {}
            Variant::NoReference => m.use_reference = false,
            Variant::NoPrior => {
                m.use_prior = false;
                m.use_joint_training = false;
                m.use_condition = false;
            }
            Variant::NoJoint => m.use_joint_training = false,
            Variant::NoDc => m.use_dc = false,
            Variant::NoCe => m.use_condition = false,
            Variant::NoLargeWindow => m.use_large_window = false,
        }
    }

    /// Whether the variant has a second (diffusion) stage at all.
    pub fn has_stage_two(self) -> bool {
        self != Variant::NoPrior
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}
