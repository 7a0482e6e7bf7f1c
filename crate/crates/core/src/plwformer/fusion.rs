use autograd::nn::{Conv2d, LayerNorm, Linear};
use autograd::{AttentionSpec, Graph, ParamStore, Real, Var};
use rand::Rng;

use super::window::{self, WindowGeom};

/// 3×3 convolutions lifting the LR image and the space-to-depth reference to
/// `C` channels at LR resolution.
#[derive(Clone, Debug)]
pub struct PixelEmbed {
    pub lr: Conv2d,
    pub reference: Option<Conv2d>,
}

impl PixelEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        scale: usize,
        use_reference: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lr: Conv2d::new(store, &format!("{name}.lr"), 2, channels, 3, 1, rng),
            reference: use_reference
                .then(|| Conv2d::new(store, &format!("{name}.ref"), 2 * scale * scale, channels, 3, 1, rng)),
        }
    }

    /// `lr` is `[B, h, w, 2]`, `reference` the unshuffled HR reference
    /// `[B, h, w, 2s²]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, lr: Var, reference: Option<Var>) -> (Var, Option<Var>) {
        let f_lr = self.lr.forward(g, lr);
        let f_ref = match (&self.reference, reference) {
            (Some(conv), Some(r)) => Some(conv.forward(g, r)),
            _ => None,
        };
        (f_lr, f_ref)
    }
}

/// One windowed cross-attention layer: queries from the LR features, keys and
/// values from the reference features, then a residual MLP.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm_ffn: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), c),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, true, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, true, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), c, c, false, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), c),
            fc1: Linear::new(store, &format!("{name}.fc1"), c, 2 * c, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * c, c, true, rng),
            channels,
            heads,
            window,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f_lr: Var, f_ref: Var) -> Var {
        assert_eq!(g.shape(f_lr), g.shape(f_ref), "cross attention: feature shapes differ");
        let s = g.shape(f_lr).to_vec();
        let geom = WindowGeom { batch: s[0], height: s[1], width: s[2], window: self.window, shift: 0 };
        let (c, h) = (self.channels, self.heads);
        let d = c / h;
        let groups = geom.batch * geom.windows_per_image() * h;
        let nt = geom.tokens();
        let split = window::query_index(&geom, c, h);

        let nq = self.norm_q.forward(g, f_lr);
        let nkv = self.norm_kv.forward(g, f_ref);
        let q = self.q.forward(g, nq);
        let k = self.k.forward(g, nkv);
        let v = self.v.forward(g, nkv);
        let q = g.gather(q, split.clone(), &[groups, nt, d]);
        let k = g.gather(k, split.clone(), &[groups, nt, d]);
        let v = g.gather(v, split, &[groups, nt, d]);
        let spec = AttentionSpec { heads: h, scale: T::lit(1.0 / (d as f64).sqrt()), mask: None };
        let a = g.attention(q, k, v, None, &spec);
        let a = g.gather(a, window::merge_index(&geom, c, h), &s);
        let a = self.proj.forward(g, a);
        let f = g.add(f_lr, a);

        let n = self.norm_ffn.forward(g, f);
        let m = self.fc1.forward(g, n);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m);
        g.add(f, m)
    }
}
