//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use autograd::ParamStore;
use ndarray::{ArrayD, IxDyn};
use priorsr::plwformer::window::MASKED;
use priorsr::plwformer::PlMsa;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x·W + b` per pixel with plain loops.
pub fn dense(store: &ParamStore<f64>, lin: &autograd::nn::Linear, x: &ArrayD<f64>) -> ArrayD<f64> {
    let w = store.get(lin.weight);
    let cin = lin.in_dim;
    let rows = x.len() / cin;
    let xs = x.as_slice().unwrap();
    let mut out = Vec::with_capacity(rows * lin.out_dim);
    for r in 0..rows {
        for o in 0..lin.out_dim {
            let mut s = lin.bias.map_or(0.0, |b| store.get(b)[[o]]);
            for i in 0..cin {
                s += xs[r * cin + i] * w[[i, o]];
            }
            out.push(s);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = lin.out_dim;
    ArrayD::from_shape_vec(shape, out).unwrap()
}

/// Independent windowed attention: rolls the map, walks windows, folds each
/// k×k key patch into one token and applies bias and shift mask.
pub fn naive_attention(store: &ParamStore<f64>, m: &PlMsa, n: &ArrayD<f64>, shift: usize) -> ArrayD<f64> {
    let s = n.shape().to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let (c, heads, l, k) = (m.channels, m.heads, m.window, m.reduction);
    let (d, ckv, lc) = (c / heads, c / (k * k), l / k);
    let q = dense(store, &m.q, n);
    let kf = dense(store, &m.k, n);
    let vf = dense(store, &m.v, n);
    let table = store.get(m.rel_bias);
    let span = 2 * l - k;
    let src = |p: usize, size: usize| (p + shift) % size;
    let region = |v: usize, size: usize| {
        if v < size - l {
            0
        } else if v < size - shift {
            1
        } else {
            2
        }
    };
    let mut out = ArrayD::zeros(IxDyn(&[b, h, w, c]));
    for bi in 0..b {
        for wy in 0..h / l {
            for wx in 0..w / l {
                for head in 0..heads {
                    for ty in 0..l {
                        for tx in 0..l {
                            let (py, px) = (wy * l + ty, wx * l + tx);
                            let (qy, qx) = (src(py, h), src(px, w));
                            let mut logits = Vec::new();
                            let mut values = Vec::new();
                            for ci in 0..lc {
                                for cj in 0..lc {
                                    // Token channel p = sub·ckv + ch for patch pixel sub.
                                    let mut key = vec![0.0; d];
                                    let mut val = vec![0.0; d];
                                    for dd in 0..d {
                                        let p = head * d + dd;
                                        let (sub, ch) = (p / ckv, p % ckv);
                                        let ky = src(wy * l + ci * k + sub / k, h);
                                        let kx = src(wx * l + cj * k + sub % k, w);
                                        key[dd] = kf[[bi, ky, kx, ch]];
                                        val[dd] = vf[[bi, ky, kx, ch]];
                                    }
                                    let mut logit: f64 =
                                        (0..d).map(|dd| q[[bi, qy, qx, head * d + dd]] * key[dd]).sum::<f64>()
                                            / (d as f64).sqrt();
                                    let iy = ty + l - k - ci * k;
                                    let ix = tx + l - k - cj * k;
                                    logit += table[[iy * span + ix, head]];
                                    if shift > 0 {
                                        let lq = (region(py, h), region(px, w));
                                        let lk = (region(wy * l + ci * k, h), region(wx * l + cj * k, w));
                                        if lq != lk {
                                            logit += MASKED;
                                        }
                                    }
                                    logits.push(logit);
                                    values.push(val);
                                }
                            }
                            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                            let z: f64 = e.iter().sum();
                            for dd in 0..d {
                                out[[bi, qy, qx, head * d + dd]] =
                                    e.iter().zip(&values).map(|(p, v)| p * v[dd]).sum::<f64>() / z;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
