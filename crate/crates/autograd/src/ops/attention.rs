use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayD;

use super::{bw, slice, view2, view2_mut};
use crate::{Graph, Real, Var};

/// Layout of a batched attention call.
///
/// Groups are ordered `(batch·window, head)` with the head index fastest, so
/// group `g` uses bias slice `g % heads` and mask slice `(g / heads) % windows`.
#[derive(Clone, Debug)]
pub struct AttentionSpec<T> {
    pub heads: usize,
    /// Multiplier applied to `q·kᵀ`, usually `1/√d`.
    pub scale: T,
    /// Additive, non-trainable mask of shape `[windows, Nq, Nk]` (shifted-window
    /// masking). Large negative entries disable a query/key pair.
    pub mask: Option<Arc<ArrayD<T>>>,
}

impl<T: Real> Graph<'_, T> {
    /// `softmax(q·kᵀ·scale + bias + mask) · v` for every group.
    ///
    /// `q` is `[G, Nq, d]`, `k` is `[G, Nk, d]`, `v` is `[G, Nk, dv]`, the optional
    /// trainable `bias` is `[heads, Nq, Nk]`. Returns `[G, Nq, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, spec: &AttentionSpec<T>) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        assert!(qs.len() == 3 && ks.len() == 3 && vs.len() == 3, "attention: rank-3 inputs");
        let (groups, nq, d) = (qs[0], qs[1], qs[2]);
        let nk = ks[1];
        let dv = vs[2];
        assert_eq!(ks, vec![groups, nk, d], "attention: key shape");
        assert_eq!(vs[..2], [groups, nk], "attention: value shape");
        let heads = spec.heads;
        assert!(groups % heads == 0, "attention: groups not divisible by heads");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[heads, nq, nk], "attention: bias shape");
        }
        let windows = spec.mask.as_ref().map(|m| {
            assert_eq!(&m.shape()[1..], &[nq, nk], "attention: mask shape");
            m.shape()[0]
        });
        let scale = spec.scale;
        let mask = spec.mask.clone();

        let qv = slice(self.value(q));
        let kv = slice(self.value(k));
        let vv = slice(self.value(v));
        let bv = bias.map(|b| slice(self.value(b)).to_vec());
        let mut probs = vec![T::zero(); groups * nq * nk];
        let mut out = vec![T::zero(); groups * nq * dv];
        for gi in 0..groups {
            let p = &mut probs[gi * nq * nk..(gi + 1) * nq * nk];
            general_mat_mul(
                scale,
                &view2(&qv[gi * nq * d..(gi + 1) * nq * d], nq, d),
                &view2(&kv[gi * nk * d..(gi + 1) * nk * d], nk, d).t(),
                T::zero(),
                &mut view2_mut(p, nq, nk),
            );
            if let Some(bv) = bv.as_ref() {
                let h = gi % heads;
                p.iter_mut()
                    .zip(&bv[h * nq * nk..(h + 1) * nq * nk])
                    .for_each(|(a, &b)| *a += b);
            }
            if let (Some(m), Some(nw)) = (mask.as_ref(), windows) {
                let w = (gi / heads) % nw;
                let ms = slice(m);
                p.iter_mut()
                    .zip(&ms[w * nq * nk..(w + 1) * nq * nk])
                    .for_each(|(a, &b)| *a += b);
            }
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row);
            }
            general_mat_mul(
                T::one(),
                &view2(p, nq, nk),
                &view2(&vv[gi * nk * dv..(gi + 1) * nk * dv], nk, dv),
                T::zero(),
                &mut view2_mut(&mut out[gi * nq * dv..(gi + 1) * nq * dv], nq, dv),
            );
        }
        self.add_macs((groups * nq * nk * (d + dv)) as u64);
        let out = ArrayD::from_shape_vec(vec![groups, nq, dv], out).unwrap();
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        self.record(
            out,
            &inputs,
            bw(move |ctx, g| {
                let gs = slice(g);
                let qv = slice(ctx.inputs[0]);
                let kv = slice(ctx.inputs[1]);
                let vv = slice(ctx.inputs[2]);
                let need_q = ctx.needs_grad[0];
                let need_k = ctx.needs_grad[1];
                let need_v = ctx.needs_grad[2];
                let need_b = ctx.inputs.len() == 4 && ctx.needs_grad[3];
                let mut dq = vec![T::zero(); if need_q { qv.len() } else { 0 }];
                let mut dk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
                let mut dvv = vec![T::zero(); if need_v { vv.len() } else { 0 }];
                let mut db = vec![T::zero(); if need_b { heads * nq * nk } else { 0 }];
                let mut ds = vec![T::zero(); nq * nk];
                for gi in 0..groups {
                    let p = &probs[gi * nq * nk..(gi + 1) * nq * nk];
                    let go = view2(&gs[gi * nq * dv..(gi + 1) * nq * dv], nq, dv);
                    if need_v {
                        general_mat_mul(
                            T::one(),
                            &view2(p, nq, nk).t(),
                            &go,
                            T::zero(),
                            &mut view2_mut(&mut dvv[gi * nk * dv..(gi + 1) * nk * dv], nk, dv),
                        );
                    }
                    if !(need_q || need_k || need_b) {
                        continue;
                    }
                    // dP = dO · vᵀ, then the softmax Jacobian.
                    general_mat_mul(
                        T::one(),
                        &go,
                        &view2(&vv[gi * nk * dv..(gi + 1) * nk * dv], nk, dv).t(),
                        T::zero(),
                        &mut view2_mut(&mut ds, nq, nk),
                    );
                    for (dr, pr) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                        let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        dr.iter_mut().zip(pr).for_each(|(a, &b)| *a = b * (*a - dot));
                    }
                    if need_b {
                        let h = gi % heads;
                        db[h * nq * nk..(h + 1) * nq * nk]
                            .iter_mut()
                            .zip(&ds)
                            .for_each(|(a, &b)| *a += b);
                    }
                    if need_q {
                        general_mat_mul(
                            scale,
                            &view2(&ds, nq, nk),
                            &view2(&kv[gi * nk * d..(gi + 1) * nk * d], nk, d),
                            T::zero(),
                            &mut view2_mut(&mut dq[gi * nq * d..(gi + 1) * nq * d], nq, d),
                        );
                    }
                    if need_k {
                        general_mat_mul(
                            scale,
                            &view2(&ds, nq, nk).t(),
                            &view2(&qv[gi * nq * d..(gi + 1) * nq * d], nq, d),
                            T::zero(),
                            &mut view2_mut(&mut dk[gi * nk * d..(gi + 1) * nk * d], nk, d),
                        );
                    }
                }
                let wrap = |need: bool, data: Vec<T>, i: usize| {
                    need.then(|| ArrayD::from_shape_vec(ctx.inputs[i].raw_dim(), data).unwrap())
                };
                let mut grads = vec![wrap(need_q, dq, 0), wrap(need_k, dk, 1), wrap(need_v, dvv, 2)];
                if ctx.inputs.len() == 4 {
                    grads.push(wrap(need_b, db, 3));
                }
                grads
            }),
        )
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for a in row.iter_mut() {
        *a = (*a - m).exp();
        s += *a;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|a| *a *= inv);
}
