//! Closed-form multiply-accumulate accounting.
//!
//! Counts follow the same convention as the tape's counter: one MAC per
//! multiply in dense, convolution and attention products; elementwise work
//! (norms, activations, softmax, residuals) is not counted.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub component: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub lr_height: usize,
    pub lr_width: usize,
    pub rows: Vec<FlopsRow>,
    pub total: u64,
}

impl FlopsReport {
    pub fn get(&self, component: &str) -> u64 {
        self.rows.iter().filter(|r| r.component == component).map(|r| r.macs).sum()
    }
}

/// Dense 3×3 "same" convolution.
fn conv3(pixels: usize, cin: usize, cout: usize) -> u64 {
    (pixels * 9 * cin * cout) as u64
}

/// Output side of a stride-2 "same" convolution.
fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Per-block attention costs at `pixels` padded positions:
/// `(q/k/v/output projections, q·kᵀ and p·v)`.
pub fn attention_macs(pixels: usize, channels: usize, window: usize, reduction: usize) -> (u64, u64) {
    let c = channels;
    let kv = c / (reduction * reduction);
    let proj = pixels * (2 * c * c + 2 * c * kv);
    let nk = (window / reduction).pow(2);
    let core = 2 * pixels * nk * c;
    (proj as u64, core as u64)
}

/// Encoder (PE or CE) on an `h×w` input with `cin` channels.
pub fn encoder_macs(h: usize, w: usize, cin: usize, latent: usize, blocks: usize) -> u64 {
    let (mut h, mut w) = (h, w);
    let c = latent;
    let mut total = conv3(h * w, cin, c);
    for i in 0..blocks {
        total += 2 * conv3(h * w, c, c);
        if crate::prior::DOWNSAMPLE_AFTER.contains(&i) && i + 1 < blocks {
            h = halve(h);
            w = halve(w);
            total += conv3(h * w, c, c);
        }
    }
    total + (c * 4 * c + 4 * c * 4 * c) as u64
}

/// One evaluation of the noise predictor.
pub fn denoiser_macs(cfg: &ModelConfig) -> u64 {
    let d = cfg.prior_dim();
    let hid = cfg.denoiser_hidden;
    let first = (2 * d + cfg.time_embed_dim) * hid;
    let middle = (cfg.denoiser_layers - 2) * hid * hid;
    (first + middle + hid * d) as u64
}

/// Test-time cost of one `h×w` LR input: network, plus CE and `steps`
/// denoiser evaluations when the model has a prior.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize, scale: usize, diffusion_steps: usize) -> FlopsReport {
    let c = cfg.channels;
    let (l, k) = (cfg.effective_window(), cfg.effective_reduction());
    let (hp, wp) = (h.div_ceil(l) * l, w.div_ceil(l) * l);
    let p = hp * wp;
    let mut rows = Vec::new();
    let mut push = |name: &str, macs: u64| rows.push(FlopsRow { component: name.into(), macs });

    let mut embed = conv3(h * w, 2, c);
    if cfg.use_reference {
        embed += conv3(h * w, 2 * scale * scale, c);
    }
    push("embed", embed);
    if cfg.use_reference {
        // q, k, v, output projection, two-layer MLP of width 2C, and attention
        // over full windows.
        push("fusion", (8 * p * c * c + 2 * p * l * l * c) as u64);
    }

    let blocks = cfg.total_blocks();
    let (proj, core) = attention_macs(p, c, l, k);
    push("trunk.attention_proj", blocks as u64 * proj);
    push("trunk.attention_core", blocks as u64 * core);
    let e = cfg.ffn_expansion;
    push("trunk.ffn", (blocks * (3 * e * p * c * c + 18 * e * p * c)) as u64);
    if cfg.use_prior {
        push("trunk.modulation", (blocks * 4 * cfg.prior_dim() * c) as u64);
    }

    let hc = cfg.head_channels;
    push("head", conv3(h * w, c, hc * scale * scale) + conv3(h * w * scale * scale, hc, 2));

    if cfg.use_prior {
        push("ce", encoder_macs(h, w, 2, cfg.latent_channels, cfg.encoder_blocks));
        push("denoiser", diffusion_steps as u64 * denoiser_macs(cfg));
    }
    let total = rows.iter().map(|r| r.macs).sum();
    FlopsReport { lr_height: h, lr_width: w, rows, total }
}

/// Attention-module cost (projections and core) of one block at `pixels`
/// positions for a window/reduction pair.
pub fn attention_module_macs(pixels: usize, channels: usize, window: usize, reduction: usize) -> u64 {
    let (proj, core) = attention_macs(pixels, channels, window, reduction);
    proj + core
}
