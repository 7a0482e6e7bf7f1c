//! Encoders that compress images into the `4Ĉ`-dimensional latent space.

use autograd::nn::{Conv2d, Linear};
use autograd::{Graph, ParamStore, Real, Var};
use ndarray::Array3;
use rand::Rng;

use crate::data::ComplexImage;
use crate::error::{Error, Result};
use crate::plwformer::window::{apply_index, pixel_shuffle_index, pixel_unshuffle_index};

/// Space-to-depth: `H×W×2` to `(H/s)×(W/s)×2s²`, channel `c·s² + dy·s + dx`.
pub fn pixel_unshuffle(img: &ComplexImage, s: usize) -> Result<Array3<f32>> {
    let (h, w) = (img.height(), img.width());
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by {s}")));
    }
    let data = apply_index(img.values().as_slice().unwrap(), &pixel_unshuffle_index(1, h, w, 2, s));
    Ok(Array3::from_shape_vec((h / s, w / s, 2 * s * s), data).unwrap())
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Array3<f32>, s: usize) -> Result<ComplexImage> {
    let (h, w, c) = x.dim();
    if c != 2 * s * s {
        return Err(Error::shape(format!("expected {} channels, got {c}", 2 * s * s)));
    }
    let x = x.as_standard_layout();
    let data = apply_index(x.as_slice().unwrap(), &pixel_shuffle_index(1, h, w, 2, s));
    ComplexImage::new(Array3::from_shape_vec((h * s, w * s, 2), data).unwrap())
}

/// Convolutional encoder: stem, residual blocks with two stride-2
/// reductions, global average pooling and two linear layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv2d,
    pub blocks: Vec<(Conv2d, Conv2d)>,
    /// Stride-2 convolutions keyed by the block index they follow.
    pub downsample: Vec<(usize, Conv2d)>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub slope: f64,
}

/// Blocks after which the encoder halves the resolution (0-based).
pub const DOWNSAMPLE_AFTER: [usize; 2] = [2, 5];

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        latent_channels: usize,
        num_blocks: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let c = latent_channels;
        let stem = Conv2d::new(store, &format!("{name}.stem"), in_channels, c, 3, 1, rng);
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut downsample = Vec::new();
        for i in 0..num_blocks {
            blocks.push((
                Conv2d::new(store, &format!("{name}.block{i}.conv1"), c, c, 3, 1, rng),
                Conv2d::new(store, &format!("{name}.block{i}.conv2"), c, c, 3, 1, rng),
            ));
            if DOWNSAMPLE_AFTER.contains(&i) && i + 1 < num_blocks {
                downsample.push((i, Conv2d::new(store, &format!("{name}.down{i}"), c, c, 3, 2, rng)));
            }
        }
        let fc1 = Linear::new(store, &format!("{name}.fc1"), c, 4 * c, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), 4 * c, 4 * c, true, rng);
        Self { stem, blocks, downsample, fc1, fc2, slope }
    }

    /// `x` is `[B, h, w, in_channels]`; returns `[B, 4Ĉ]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let slope = T::lit(self.slope);
        let h = self.stem.forward(g, x);
        let mut h = g.leaky_relu(h, slope);
        for (i, (c1, c2)) in self.blocks.iter().enumerate() {
            let r = c1.forward(g, h);
            let r = g.leaky_relu(r, slope);
            let r = c2.forward(g, r);
            h = g.add(h, r);
            if let Some((_, down)) = self.downsample.iter().find(|(j, _)| *j == i) {
                h = down.forward(g, h);
            }
        }
        let pooled = g.mean_middle(h);
        let v = self.fc1.forward(g, pooled);
        let v = g.leaky_relu(v, slope);
        self.fc2.forward(g, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshuffle_shape_inverse_and_sum() {
        let x = Array3::from_shape_fn((4, 4, 2), |(i, j, c)| (i * 8 + j * 2 + c) as f32);
        let img = ComplexImage::new(x).unwrap();
        let u = pixel_unshuffle(&img, 2).unwrap();
        assert_eq!(u.dim(), (2, 2, 8));
        assert_eq!(u.sum(), img.values().sum());
        assert_eq!(pixel_shuffle(&u, 2).unwrap(), img);
        // Channel order is (c, dy, dx): the first four channels are the real parts.
        assert_eq!(u[(0, 0, 1)], img.values()[(0, 1, 0)]);
        assert_eq!(u[(0, 0, 4)], img.values()[(0, 0, 1)]);
        let k = ComplexImage::new(Array3::from_elem((4, 4, 2), 0.5)).unwrap();
        assert!(pixel_unshuffle(&k, 2).unwrap().iter().all(|&v| v == 0.5));
        assert!(pixel_unshuffle(&img, 3).is_err());
    }
}
