//! Precomputed gather indices for window partitioning, cyclic shifts,
//! key/value space-to-depth, head splitting, padding and pixel shuffles.
//!
//! Feature maps are NHWC and flattened row-major, so every rearrangement is a
//! gather from one flat index to another.

use std::sync::Arc;

use autograd::GATHER_ZERO;
use ndarray::{Array3, Array4, ArrayD};

/// Spatial layout of one windowed attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Window side length `L`.
    pub window: usize,
    /// Cyclic shift applied before partitioning (0 for none).
    pub shift: usize,
}

impl WindowGeom {
    pub fn windows_y(&self) -> usize {
        self.height / self.window
    }

    pub fn windows_x(&self) -> usize {
        self.width / self.window
    }

    pub fn windows_per_image(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Pixel covered by local position `(ty, tx)` of window `(wy, wx)`.
    fn pixel(&self, wy: usize, wx: usize, ty: usize, tx: usize) -> (usize, usize) {
        (
            (wy * self.window + ty + self.shift) % self.height,
            (wx * self.window + tx + self.shift) % self.width,
        )
    }

    fn check(&self) {
        assert!(
            self.height % self.window == 0 && self.width % self.window == 0,
            "feature map {}x{} is not a multiple of window {}",
            self.height,
            self.width,
            self.window
        );
    }
}

/// `[B, H, W, C]` to `[B·nW·heads, L², C/heads]`, heads fastest.
pub fn query_index(g: &WindowGeom, channels: usize, heads: usize) -> Arc<[u32]> {
    reduced_index(g, channels, 1, heads)
}

/// `[B, H, W, C/k²]` to `[B·nW·heads, (L/k)², C/heads]`.
///
/// Each k×k patch of a window becomes one coarse token whose channels are the
/// patch pixels in row-major order, each contributing `C/k²` channels.
pub fn reduced_index(g: &WindowGeom, channels: usize, k: usize, heads: usize) -> Arc<[u32]> {
    g.check();
    assert!(g.window % k == 0 && channels % (k * k) == 0 && channels % heads == 0);
    let ckv = channels / (k * k);
    let d = channels / heads;
    let lc = g.window / k;
    let mut idx = Vec::with_capacity(g.batch * g.windows_per_image() * lc * lc * channels);
    for b in 0..g.batch {
        for wy in 0..g.windows_y() {
            for wx in 0..g.windows_x() {
                for head in 0..heads {
                    for ci in 0..lc {
                        for cj in 0..lc {
                            for dd in 0..d {
                                let p = head * d + dd;
                                let sub = p / ckv;
                                let (y, x) = g.pixel(wy, wx, ci * k + sub / k, cj * k + sub % k);
                                idx.push((((b * g.height + y) * g.width + x) * ckv + p % ckv) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`query_index`]: `[B·nW·heads, L², d]` back to `[B, H, W, C]`,
/// undoing the shift.
pub fn merge_index(g: &WindowGeom, channels: usize, heads: usize) -> Arc<[u32]> {
    g.check();
    let d = channels / heads;
    let (l, nwx, nw) = (g.window, g.windows_x(), g.windows_per_image());
    let mut idx = Vec::with_capacity(g.batch * g.height * g.width * channels);
    for b in 0..g.batch {
        for y in 0..g.height {
            let ys = (y + g.height - g.shift % g.height) % g.height;
            for x in 0..g.width {
                let xs = (x + g.width - g.shift % g.width) % g.width;
                let bw = b * nw + (ys / l) * nwx + xs / l;
                let t = (ys % l) * l + xs % l;
                for c in 0..channels {
                    let (head, dd) = (c / d, c % d);
                    idx.push((((bw * heads + head) * l * l + t) * d + dd) as u32);
                }
            }
        }
    }
    idx.into()
}

/// Additive attention mask `[nW, L², (L/k)²]` for shifted windows: pairs whose
/// pixels came from different regions before the roll get a large negative
/// logit. `None` when there is no shift.
pub fn shift_mask(g: &WindowGeom, k: usize) -> Option<ArrayD<f64>> {
    if g.shift == 0 {
        return None;
    }
    let region = |v: usize, n: usize| {
        if v < n - g.window {
            0
        } else if v < n - g.shift {
            1
        } else {
            2
        }
    };
    let (l, lc) = (g.window, g.window / k);
    let label = |wy: usize, wx: usize, ty: usize, tx: usize| {
        region(wy * l + ty, g.height) * 3 + region(wx * l + tx, g.width)
    };
    let nw = g.windows_per_image();
    let mut mask = ArrayD::zeros(vec![nw, l * l, lc * lc]);
    for wy in 0..g.windows_y() {
        for wx in 0..g.windows_x() {
            let w = wy * g.windows_x() + wx;
            for q in 0..l * l {
                let lq = label(wy, wx, q / l, q % l);
                for c in 0..lc * lc {
                    if label(wy, wx, (c / lc) * k, (c % lc) * k) != lq {
                        mask[[w, q, c]] = MASKED;
                    }
                }
            }
        }
    }
    Some(mask)
}

pub const MASKED: f64 = -1e4;

/// Maps the relative-bias table `[(2L−k)², heads]` to `[heads, L², (L/k)²]`.
///
/// The displacement between fine query `(qi, qj)` and coarse key `(ci, cj)` is
/// measured from the top-left pixel of the key's k×k patch.
pub fn relative_bias_index(window: usize, k: usize, heads: usize) -> Arc<[u32]> {
    let (l, lc) = (window, window / k);
    let span = 2 * l - k;
    let mut idx = Vec::with_capacity(heads * l * l * lc * lc);
    for head in 0..heads {
        for qi in 0..l {
            for qj in 0..l {
                for ci in 0..lc {
                    for cj in 0..lc {
                        let iy = qi + l - k - ci * k;
                        let ix = qj + l - k - cj * k;
                        idx.push(((iy * span + ix) * heads + head) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

pub fn relative_bias_table_len(window: usize, k: usize) -> usize {
    (2 * window - k) * (2 * window - k)
}

/// Reflect padding of `[B, H, W, C]` up to `[B, Hp, Wp, C]`.
pub fn reflect_pad_index(b: usize, h: usize, w: usize, c: usize, hp: usize, wp: usize) -> Arc<[u32]> {
    assert!(hp >= h && wp >= w && hp < 2 * h && wp < 2 * w, "padding too large for reflection");
    let refl = |v: usize, n: usize| if v < n { v } else { 2 * (n - 1) - v };
    let mut idx = Vec::with_capacity(b * hp * wp * c);
    for bi in 0..b {
        for y in 0..hp {
            for x in 0..wp {
                let base = ((bi * h + refl(y, h)) * w + refl(x, w)) * c;
                idx.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    idx.into()
}

/// Top-left crop of `[B, Hp, Wp, C]` to `[B, H, W, C]`.
pub fn crop_index(b: usize, hp: usize, wp: usize, c: usize, h: usize, w: usize) -> Arc<[u32]> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let base = ((bi * hp + y) * wp + x) * c;
                idx.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    idx.into()
}

/// Sub-pixel shuffle `[B, H, W, C·s²]` to `[B, H·s, W·s, C]`; input channel
/// `c·s² + dy·s + dx` lands at offset `(dy, dx)`.
pub fn pixel_shuffle_index(b: usize, h: usize, w: usize, c: usize, s: usize) -> Arc<[u32]> {
    let cin = c * s * s;
    let mut idx = Vec::with_capacity(b * h * w * cin);
    for bi in 0..b {
        for yy in 0..h * s {
            for xx in 0..w * s {
                let (y, dy, x, dx) = (yy / s, yy % s, xx / s, xx % s);
                let base = ((bi * h + y) * w + x) * cin;
                idx.extend((0..c).map(|ch| (base + ch * s * s + dy * s + dx) as u32));
            }
        }
    }
    idx.into()
}

/// Inverse of [`pixel_shuffle_index`].
pub fn pixel_unshuffle_index(b: usize, h: usize, w: usize, c: usize, s: usize) -> Arc<[u32]> {
    let (ho, wo) = (h / s, w / s);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    for dy in 0..s {
                        for dx in 0..s {
                            idx.push((((bi * h + y * s + dy) * w + x * s + dx) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Applies a gather index to a plain array.
pub fn apply_index<T: Copy + Default>(src: &[T], idx: &[u32]) -> Vec<T> {
    idx.iter()
        .map(|&i| if i == GATHER_ZERO { T::default() } else { src[i as usize] })
        .collect()
}

/// Splits `[B, H, W, C]` into `[B·nW, L², C]` (no shift).
pub fn window_partition<T: Copy + Default>(f: &Array4<T>, window: usize) -> Array3<T> {
    let (b, h, w, c) = f.dim();
    let g = WindowGeom { batch: b, height: h, width: w, window, shift: 0 };
    let f = f.as_standard_layout();
    let data = apply_index(f.as_slice().unwrap(), &query_index(&g, c, 1));
    Array3::from_shape_vec((b * g.windows_per_image(), window * window, c), data).unwrap()
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Copy + Default>(windows: &Array3<T>, batch: usize, height: usize, width: usize) -> Array4<T> {
    let (_, tokens, c) = windows.dim();
    let window = (tokens as f64).sqrt().round() as usize;
    let g = WindowGeom { batch, height, width, window, shift: 0 };
    let windows = windows.as_standard_layout();
    let data = apply_index(windows.as_slice().unwrap(), &merge_index(&g, c, 1));
    Array4::from_shape_vec((batch, height, width, c), data).unwrap()
}
