//! Centered orthonormal Fourier transforms, Cartesian sampling masks, the
//! data-consistency operator and the frequency-domain loss.

use std::cell::RefCell;
use std::sync::Arc;

use autograd::{Graph, Real, Var};
use ndarray::{Array2, ArrayD, Axis};
use num_complex::Complex64;
use rand::seq::index::sample;
use rustfft::{FftDirection, FftPlanner};

use crate::config::MaskPattern;
use crate::data::ComplexImage;
use crate::error::{Error, Result};
use crate::seed;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_axis(x: &mut Array2<Complex64>, axis: usize, dir: FftDirection) {
    let n = x.len_of(Axis(axis));
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(n, dir));
    let mut buf = vec![Complex64::default(); n];
    for mut lane in x.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
}

fn roll(x: &Array2<Complex64>, dy: usize, dx: usize) -> Array2<Complex64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[((i + h - dy) % h, (j + w - dx) % w)])
}

/// Moves the zero frequency from index 0 to the grid center.
pub fn fftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    roll(x, h / 2, w / 2)
}

pub fn ifftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    roll(x, h - h / 2, w - w / 2)
}

fn fft2c_dir(x: &Array2<Complex64>, dir: FftDirection) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut y = ifftshift(x);
    fft_axis(&mut y, 0, dir);
    fft_axis(&mut y, 1, dir);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    y.mapv_inplace(|v| v * scale);
    fftshift(&y)
}

/// Orthonormal 2-D DFT with the DC term at `(H/2, W/2)`.
pub fn fft2c_array(x: &Array2<Complex64>) -> Array2<Complex64> {
    fft2c_dir(x, FftDirection::Forward)
}

pub fn ifft2c_array(k: &Array2<Complex64>) -> Array2<Complex64> {
    fft2c_dir(k, FftDirection::Inverse)
}

/// A centered complex spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    pub values: Array2<Complex64>,
}

impl KSpaceData {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `H×W×2` real view (real, imaginary).
    pub fn to_channels(&self) -> ndarray::Array3<f64> {
        let (h, w) = self.dim();
        ndarray::Array3::from_shape_fn((h, w, 2), |(i, j, c)| {
            let v = self.values[(i, j)];
            if c == 0 {
                v.re
            } else {
                v.im
            }
        })
    }
}

pub fn fft2c(img: &ComplexImage) -> KSpaceData {
    KSpaceData { values: fft2c_array(&img.to_complex()) }
}

pub fn ifft2c(k: &KSpaceData) -> ComplexImage {
    ComplexImage::from_complex(&ifft2c_array(&k.values))
}

/// Row-sampling mask over a centered k-space grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMask {
    pub grid: Array2<bool>,
    pub pattern: MaskPattern,
    pub acceleration: f64,
}

impl KSpaceMask {
    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn sampled_rows(&self) -> Vec<usize> {
        (0..self.grid.nrows()).filter(|&r| self.grid[(r, 0)]).collect()
    }
}

/// Builds a sampling mask.
///
/// For the Cartesian pattern `round(H/acceleration)` rows are sampled, of which
/// `round(center_fraction·H)` form a contiguous band around the DC row and the
/// rest are drawn uniformly from the remaining rows.
pub fn make_mask(
    shape: (usize, usize),
    pattern: MaskPattern,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<KSpaceMask> {
    let (h, w) = shape;
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::config(format!("center_fraction {center_fraction} must lie in (0, 1)")));
    }
    if acceleration < 1.0 {
        return Err(Error::config(format!("acceleration {acceleration} must be at least 1")));
    }
    let grid = match pattern {
        MaskPattern::Full => Array2::from_elem((h, w), true),
        MaskPattern::Empty => Array2::from_elem((h, w), false),
        MaskPattern::CartesianLowfreqRandom => {
            let budget = (h as f64 / acceleration).round() as usize;
            let center = (center_fraction * h as f64).round() as usize;
            if center > budget {
                return Err(Error::config(format!(
                    "center band of {center} rows exceeds the budget of {budget} rows at acceleration {acceleration}"
                )));
            }
            let start = h / 2 - center / 2;
            let mut rows = vec![false; h];
            rows[start..start + center].iter_mut().for_each(|r| *r = true);
            let rest: Vec<usize> = (0..h).filter(|&r| !rows[r]).collect();
            let mut rng = seed::rng(seed, &[seed::stream::MASK]);
            for i in sample(&mut rng, rest.len(), budget - center) {
                rows[rest[i]] = true;
            }
            Array2::from_shape_fn((h, w), |(r, _)| rows[r])
        }
    };
    Ok(KSpaceMask { grid, pattern, acceleration })
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// Replaces sampled positions of `k_sr` by the measured `k_hr`.
pub fn data_consistency(k_sr: &KSpaceData, k_hr: &KSpaceData, mask: &KSpaceMask) -> Result<KSpaceData> {
    data_consistency_blend(k_sr, k_hr, mask, f64::INFINITY)
}

/// `(K_SR + n·K_HR)/(1 + n)` at sampled positions, `K_SR` elsewhere.
pub fn data_consistency_blend(k_sr: &KSpaceData, k_hr: &KSpaceData, mask: &KSpaceMask, n: f64) -> Result<KSpaceData> {
    check_dims(k_sr.dim(), k_hr.dim(), "data_consistency spectra")?;
    check_dims(k_sr.dim(), mask.dim(), "data_consistency mask")?;
    let mut out = k_sr.values.clone();
    ndarray::Zip::from(&mut out)
        .and(&k_hr.values)
        .and(&mask.grid)
        .for_each(|o, &m, &sampled| {
            if sampled {
                *o = if n.is_infinite() { m } else { (*o + m * n) / (1.0 + n) };
            }
        });
    Ok(KSpaceData { values: out })
}

/// Mean squared error over all real and imaginary entries.
pub fn dc_loss(k_dc: &KSpaceData, k_hr: &KSpaceData) -> Result<f64> {
    check_dims(k_dc.dim(), k_hr.dim(), "dc_loss")?;
    let n = 2 * k_dc.values.len();
    let s: f64 = k_dc.values.iter().zip(&k_hr.values).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(s / n as f64)
}

/// Per-position weight `w` such that `K_DC − K_HR = w·(K_SR − K_HR)`.
fn residual_weight(mask: &KSpaceMask, n: f64) -> Array2<f64> {
    let sampled = if n.is_infinite() { 0.0 } else { 1.0 / (1.0 + n) };
    mask.grid.mapv(|m| if m { sampled } else { 1.0 })
}

/// Differentiable `dc_loss(DC(fft2c(I_SR), K_HR, M), K_HR)` over a batch.
///
/// `sr` is `[B, H, W, 2]`; `k_hr[b]` is the centered spectrum of sample `b`.
pub fn dc_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    sr: Var,
    k_hr: &[Arc<Array2<Complex64>>],
    mask: &KSpaceMask,
    blend_weight: f64,
) -> Var {
    let shape = g.shape(sr).to_vec();
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(shape[3], 2, "dc_loss_graph: expects two channels");
    assert_eq!(k_hr.len(), b, "dc_loss_graph: one spectrum per batch element");
    assert_eq!(mask.dim(), (h, w), "dc_loss_graph: mask shape");
    let weight = residual_weight(mask, blend_weight);
    let total = (2 * b * h * w) as f64;
    let x = g.value(sr);
    let mut loss = 0.0;
    let mut grads_k = Vec::with_capacity(b);
    for (bi, khr) in k_hr.iter().enumerate() {
        let img = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex64::new(x[[bi, i, j, 0]].to_f64_lossy(), x[[bi, i, j, 1]].to_f64_lossy())
        });
        let k = fft2c_array(&img);
        let mut gk = Array2::zeros((h, w));
        ndarray::Zip::from(&mut gk)
            .and(&k)
            .and(&**khr)
            .and(&weight)
            .for_each(|gk, &k, &kh, &wt| {
                let r = (k - kh) * wt;
                loss += r.norm_sqr();
                *gk = r * (2.0 * wt / total);
            });
        grads_k.push(gk);
    }
    let value = ArrayD::from_elem(ndarray::IxDyn(&[]), T::lit(loss / total));
    g.record(value, &[sr], DcLossBackward { grads_k, shape })
}

struct DcLossBackward {
    grads_k: Vec<Array2<Complex64>>,
    shape: Vec<usize>,
}

impl<T: Real> autograd::Backward<T> for DcLossBackward {
    fn backward(&self, _ctx: &autograd::BackwardCtx<'_, T>, grad: &ArrayD<T>) -> Vec<Option<ArrayD<T>>> {
        let scale = grad.iter().next().unwrap().to_f64_lossy();
        let mut dx = ArrayD::zeros(self.shape.clone());
        for (bi, gk) in self.grads_k.iter().enumerate() {
            let gx = ifft2c_array(gk);
            for ((i, j), v) in gx.indexed_iter() {
                dx[[bi, i, j, 0]] = T::lit(v.re * scale);
                dx[[bi, i, j, 1]] = T::lit(v.im * scale);
            }
        }
        vec![Some(dx)]
    }
}
