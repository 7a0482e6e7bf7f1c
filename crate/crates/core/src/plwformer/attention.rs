use std::sync::Arc;

use autograd::nn::{uniform, Linear};
use autograd::{AttentionSpec, Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use super::modulation::PriorModulation;
use super::window::{self, WindowGeom};

/// Windowed multi-head self-attention with channel-reduced, spatially
/// permuted keys and values.
///
/// Queries keep all `C` channels. Keys and values are projected to `C/k²`
/// channels and every k×k patch of a window is folded into one token of `C`
/// channels, so each window attends from `L²` queries to `(L/k)²` keys.
#[derive(Clone, Debug)]
pub struct PlMsa {
    pub modulation: PriorModulation,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// Relative position bias table `[(2L−k)², heads]`.
    pub rel_bias: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub reduction: usize,
}

impl PlMsa {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        reduction: usize,
        prior_dim: usize,
        use_prior: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let kv = channels / (reduction * reduction);
        let modulation = PriorModulation::new(store, &format!("{name}.mod"), prior_dim, channels, use_prior, rng);
        let q = Linear::new(store, &format!("{name}.q"), channels, channels, true, rng);
        let k = Linear::new(store, &format!("{name}.k"), channels, kv, true, rng);
        let v = Linear::new(store, &format!("{name}.v"), channels, kv, true, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), channels, channels, true, rng);
        let rel_bias = store.add(
            format!("{name}.rel_bias"),
            uniform(&[window::relative_bias_table_len(window, reduction), heads], 0.02, rng),
        );
        Self { modulation, q, k, v, proj, rel_bias, channels, heads, window, reduction }
    }

    /// `x + proj(attention(modulate(x)))` for `x` of shape `[B, H, W, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>, shift: usize) -> Var {
        let n = self.modulation.forward(g, x, z);
        let a = self.attention(g, n, shift);
        let p = self.proj.forward(g, a);
        g.add(x, p)
    }

    /// Multi-head attention over windows of `n`, heads merged back to
    /// `[B, H, W, C]`, before the output projection.
    pub fn attention<T: Real>(&self, g: &mut Graph<'_, T>, n: Var, shift: usize) -> Var {
        let s = g.shape(n).to_vec();
        let geom = WindowGeom { batch: s[0], height: s[1], width: s[2], window: self.window, shift };
        let (c, h, k) = (self.channels, self.heads, self.reduction);
        let d = c / h;
        let groups = geom.batch * geom.windows_per_image() * h;
        let (nq, nk) = (geom.tokens(), geom.tokens() / (k * k));

        let q = self.q.forward(g, n);
        let kk = self.k.forward(g, n);
        let v = self.v.forward(g, n);
        let q = g.gather(q, window::query_index(&geom, c, h), &[groups, nq, d]);
        let kv_index = window::reduced_index(&geom, c, k, h);
        let kk = g.gather(kk, kv_index.clone(), &[groups, nk, d]);
        let v = g.gather(v, kv_index, &[groups, nk, d]);

        let table = g.param(self.rel_bias);
        let bias = g.gather(table, window::relative_bias_index(self.window, k, h), &[h, nq, nk]);
        let spec = AttentionSpec {
            heads: h,
            scale: T::lit(1.0 / (d as f64).sqrt()),
            mask: window::shift_mask(&geom, k).map(|m| Arc::new(m.mapv(T::lit))),
        };
        let out = g.attention(q, kk, v, Some(bias), &spec);
        g.gather(out, window::merge_index(&geom, c, h), &[geom.batch, geom.height, geom.width, c])
    }

    pub fn attention_macs(&self, pixels: usize) -> u64 {
        // q·kᵀ and p·v per query: 2 · (L/k)² · C.
        let nk = (self.window / self.reduction).pow(2);
        (2 * pixels * nk * self.channels) as u64
    }
}
