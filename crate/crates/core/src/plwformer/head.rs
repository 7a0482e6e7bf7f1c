use autograd::nn::Conv2d;
use autograd::{Graph, ParamStore, Real, Var};
use ndarray::Array4;
use rand::Rng;

use super::window;

/// 3×3 conv to `head_channels·s²`, sub-pixel shuffle, LeakyReLU, 3×3 conv to
/// two channels, plus a fixed upsampled copy of the input.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub expand: Conv2d,
    pub out: Conv2d,
    pub scale: usize,
    pub head_channels: usize,
    pub slope: f64,
}

impl ReconstructionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        head_channels: usize,
        scale: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let expand = Conv2d::new(store, &format!("{name}.expand"), channels, head_channels * scale * scale, 3, 1, rng);
        // Small output weights: the untrained network starts near the
        // upsampled input.
        let out = Conv2d::scaled(store, &format!("{name}.out"), head_channels, 2, 3, 0.1, rng);
        Self { expand, out, scale, head_channels, slope }
    }

    /// `feat` is `[B, h, w, C]`, `base` the upsampled input `[B, h·s, w·s, 2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feat: Var, base: Var) -> Var {
        let s = g.shape(feat).to_vec();
        let (b, h, w) = (s[0], s[1], s[2]);
        let (hc, sc) = (self.head_channels, self.scale);
        let e = self.expand.forward(g, feat);
        let up = g.gather(e, window::pixel_shuffle_index(b, h, w, hc, sc), &[b, h * sc, w * sc, hc]);
        let up = g.leaky_relu(up, T::lit(self.slope));
        let y = self.out.forward(g, up);
        g.add(y, base)
    }
}

/// Bilinear upsampling by an integer factor with half-pixel centers and edge
/// clamping, per channel. `x` is `[B, h, w, C]`.
pub fn bilinear_upsample(x: &Array4<f32>, s: usize) -> Array4<f32> {
    let (b, h, w, c) = x.dim();
    let coord = |o: usize, n: usize| {
        let u = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        (i0, (i0 + 1).min(n - 1), u - i0 as f64)
    };
    Array4::from_shape_fn((b, h * s, w * s, c), |(bi, y, xx, ch)| {
        let (y0, y1, fy) = coord(y, h);
        let (x0, x1, fx) = coord(xx, w);
        let v = |yy: usize, xq: usize| x[(bi, yy, xq, ch)] as f64;
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_and_ramps() {
        let c = Array4::from_elem((1, 4, 4, 2), 0.25f32);
        assert!(bilinear_upsample(&c, 4).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        // A linear ramp along x is reproduced exactly away from the clamped border.
        let r = Array4::from_shape_fn((1, 1, 8, 1), |(_, _, x, _)| x as f32);
        let up = bilinear_upsample(&r, 2);
        for xx in 1..15 {
            let want = (xx as f64 + 0.5) / 2.0 - 0.5;
            assert!((up[(0, 0, xx, 0)] as f64 - want).abs() < 1e-6);
        }
        assert_eq!(up[(0, 0, 0, 0)], 0.0);
    }
}
