//! The reconstruction network: pixel embedding, reference fusion, a trunk of
//! prior-modulated large-window transformer blocks and the upsampling head.

pub mod attention;
pub mod ffn;
pub mod fusion;
pub mod head;
pub mod modulation;
pub mod window;

use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;

pub use attention::PlMsa;
pub use ffn::PgFfn;
pub use fusion::{CrossAttention, PixelEmbed};
pub use head::{bilinear_upsample, ReconstructionHead};
pub use modulation::PriorModulation;

use crate::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: PlMsa,
    pub ffn: PgFfn,
}

impl Block {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>, shift: usize) -> Var {
        let x = self.attn.forward(g, x, z, shift);
        self.ffn.forward(g, x, z)
    }
}

#[derive(Clone, Debug)]
pub struct Plwformer {
    pub embed: PixelEmbed,
    pub fusion: Option<CrossAttention>,
    pub layers: Vec<Vec<Block>>,
    pub head: ReconstructionHead,
    pub window: usize,
    pub shift_windows: bool,
}

/// Inputs of one forward pass, already on the graph.
#[derive(Clone, Copy, Debug)]
pub struct NetInputs {
    /// `[B, h, w, 2]`.
    pub lr: Var,
    /// Bilinearly upsampled `lr`, `[B, h·s, w·s, 2]`.
    pub lr_up: Var,
    /// Space-to-depth reference `[B, h, w, 2s²]`.
    pub reference: Option<Var>,
}

impl Plwformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, scale: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let (l, k) = (cfg.effective_window(), cfg.effective_reduction());
        let embed = PixelEmbed::new(store, "embed", c, scale, cfg.use_reference, rng);
        let fusion = cfg
            .use_reference
            .then(|| CrossAttention::new(store, "fusion", c, cfg.fusion_heads, l, rng));
        let layers = cfg
            .blocks
            .iter()
            .zip(&cfg.heads)
            .enumerate()
            .map(|(i, (&n, &heads))| {
                (0..n)
                    .map(|j| Block {
                        attn: PlMsa::new(
                            store,
                            &format!("trunk.{i}.{j}.attn"),
                            c,
                            heads,
                            l,
                            k,
                            cfg.prior_dim(),
                            cfg.use_prior,
                            rng,
                        ),
                        ffn: PgFfn::new(
                            store,
                            &format!("trunk.{i}.{j}.ffn"),
                            c,
                            cfg.ffn_expansion,
                            cfg.prior_dim(),
                            cfg.use_prior,
                            rng,
                        ),
                    })
                    .collect()
            })
            .collect();
        let head = ReconstructionHead::new(store, "head", c, cfg.head_channels, scale, cfg.leaky_slope, rng);
        Self { embed, fusion, layers, head, window: l, shift_windows: cfg.shift_windows }
    }

    /// Reflect-pads `[B, h, w, C]` to whole windows.
    fn pad<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Var {
        let s = g.shape(f).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let l = self.window;
        let (hp, wp) = (h.div_ceil(l) * l, w.div_ceil(l) * l);
        if (hp, wp) == (h, w) {
            return f;
        }
        g.gather(f, window::reflect_pad_index(b, h, w, c, hp, wp), &[b, hp, wp, c])
    }

    fn crop<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, shape: &[usize]) -> Var {
        let p = g.shape(f).to_vec();
        if p == shape {
            return f;
        }
        g.gather(f, window::crop_index(p[0], p[1], p[2], p[3], shape[1], shape[2]), shape)
    }

    /// Embedding plus reference fusion on window-padded features (identity
    /// on the LR features when the reference path is disabled).
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, lr: Var, reference: Option<Var>) -> Var {
        let (f_lr, f_ref) = self.embed.forward(g, lr, reference);
        let f_lr = self.pad(g, f_lr);
        match (&self.fusion, f_ref) {
            (Some(ca), Some(f_ref)) => {
                let f_ref = self.pad(g, f_ref);
                ca.forward(g, f_lr, f_ref)
            }
            _ => f_lr,
        }
    }

    /// Transformer trunk on `[B, h, w, C]` with `h` and `w` multiples of the
    /// window.
    pub fn trunk<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, z: Option<Var>) -> Var {
        let s = g.shape(f).to_vec();
        let l = self.window;
        let can_shift = self.shift_windows && (s[1] > l || s[2] > l);
        let mut x = f;
        for layer in &self.layers {
            for (j, block) in layer.iter().enumerate() {
                let shift = if can_shift && j % 2 == 1 { l / 2 } else { 0 };
                x = block.forward(g, x, z, shift);
            }
        }
        x
    }

    /// Features at LR resolution after fusion and trunk, cropped back to the
    /// input size.
    pub fn features<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &NetInputs, z: Option<Var>) -> Var {
        let mut shape = g.shape(inputs.lr).to_vec();
        shape[3] = self.embed.lr.out_channels;
        let f = self.fuse(g, inputs.lr, inputs.reference);
        let f = self.trunk(g, f, z);
        self.crop(g, f, &shape)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &NetInputs, z: Option<Var>) -> Var {
        let f = self.features(g, inputs, z);
        self.head.forward(g, f, inputs.lr_up)
    }
}
