use ndarray::{ArrayD, Zip};

use super::{bw, slice};
use crate::{Graph, Real, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<'_, T> {
    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.record(out, &[a, b], bw(|_, g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.record(out, &[a, b], bw(|_, g| vec![Some(g.clone()), Some(g.mapv(|x: T| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.record(
            out,
            &[a, b],
            bw(|ctx, g| {
                vec![
                    ctx.needs_grad[0].then(|| g * ctx.inputs[1]),
                    ctx.needs_grad[1].then(|| g * ctx.inputs[0]),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a) * s;
        self.record(out, &[a], bw(move |_, g| vec![Some(g * s)]))
    }

    /// `Σ coeff_i · x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = ArrayD::zeros(self.value(terms[0].0).raw_dim());
        for &(v, c) in terms {
            self.assert_same_shape(terms[0].0, v, "lincomb");
            out.scaled_add(c, self.value(v));
        }
        let coeffs: Vec<T> = terms.iter().map(|t| t.1).collect();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.record(
            out,
            &inputs,
            bw(move |ctx, g| {
                coeffs
                    .iter()
                    .zip(&ctx.needs_grad)
                    .map(|(&c, &need)| need.then(|| g * c))
                    .collect()
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .mapv(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.record(
            out,
            &[a],
            bw(move |ctx, g| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(ctx.inputs[0]).for_each(|d, &x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let du = c * (T::one() + T::lit(3.0) * k * x * x);
                    *d *= half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).mapv(|x| if x > T::zero() { x } else { slope * x });
        self.record(
            out,
            &[a],
            bw(move |ctx, g| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(ctx.inputs[0]).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d *= slope;
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Adds `b` (shape `[C]`) to every row of `x` (shape `[..., C]`).
    pub fn add_last(&mut self, x: Var, b: Var) -> Var {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.shape(b), &[c], "add_last: bias shape");
        let mut out = self.value(x).clone();
        let bs = slice(self.value(b)).to_vec();
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(c) {
            row.iter_mut().zip(&bs).for_each(|(o, &bb)| *o += bb);
        }
        self.record(
            out,
            &[x, b],
            bw(move |ctx, g| {
                let db = ctx.needs_grad[1].then(|| sum_rows(slice(g), c));
                vec![Some(g.clone()), db]
            }),
        )
    }

    /// Multiplies every row of `x` (shape `[..., C]`) by `s` (shape `[C]`).
    pub fn mul_last(&mut self, x: Var, s: Var) -> Var {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.shape(s), &[c], "mul_last: scale shape");
        let mut out = self.value(x).clone();
        let ss = slice(self.value(s)).to_vec();
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(c) {
            row.iter_mut().zip(&ss).for_each(|(o, &v)| *o *= v);
        }
        self.record(
            out,
            &[x, s],
            bw(move |ctx, g| {
                let gs = slice(g);
                let dx = ctx.needs_grad[0].then(|| {
                    let sv = slice(ctx.inputs[1]);
                    let mut dx = g.clone();
                    for row in dx.as_slice_mut().unwrap().chunks_exact_mut(c) {
                        row.iter_mut().zip(sv).for_each(|(d, &v)| *d *= v);
                    }
                    dx
                });
                let ds = ctx.needs_grad[1].then(|| {
                    let xs = slice(ctx.inputs[0]);
                    let mut acc = vec![T::zero(); c];
                    for (gr, xr) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                        for i in 0..c {
                            acc[i] += gr[i] * xr[i];
                        }
                    }
                    ArrayD::from_shape_vec(vec![c], acc).unwrap()
                });
                vec![dx, ds]
            }),
        )
    }

    /// Per-sample, per-channel scaling: `x` is `[B, ..., C]`, `v` is `[B, C]`.
    pub fn bc_mul(&mut self, x: Var, v: Var) -> Var {
        let (b, c) = self.per_sample_dims(x, v, "bc_mul");
        let per = self.value(x).len() / b;
        let mut out = self.value(x).clone();
        {
            let vs = slice(self.value(v));
            for (bi, block) in out.as_slice_mut().unwrap().chunks_exact_mut(per).enumerate() {
                let vr = &vs[bi * c..(bi + 1) * c];
                for row in block.chunks_exact_mut(c) {
                    row.iter_mut().zip(vr).for_each(|(o, &s)| *o *= s);
                }
            }
        }
        self.record(
            out,
            &[x, v],
            bw(move |ctx, g| {
                let gs = slice(g);
                let vs = slice(ctx.inputs[1]);
                let dx = ctx.needs_grad[0].then(|| {
                    let mut dx = g.clone();
                    for (bi, block) in dx.as_slice_mut().unwrap().chunks_exact_mut(per).enumerate() {
                        let vr = &vs[bi * c..(bi + 1) * c];
                        for row in block.chunks_exact_mut(c) {
                            row.iter_mut().zip(vr).for_each(|(d, &s)| *d *= s);
                        }
                    }
                    dx
                });
                let dv = ctx.needs_grad[1].then(|| {
                    let xs = slice(ctx.inputs[0]);
                    let mut acc = vec![T::zero(); b * c];
                    for bi in 0..b {
                        let a = &mut acc[bi * c..(bi + 1) * c];
                        let gb = &gs[bi * per..(bi + 1) * per];
                        let xb = &xs[bi * per..(bi + 1) * per];
                        for (gr, xr) in gb.chunks_exact(c).zip(xb.chunks_exact(c)) {
                            for i in 0..c {
                                a[i] += gr[i] * xr[i];
                            }
                        }
                    }
                    ArrayD::from_shape_vec(vec![b, c], acc).unwrap()
                });
                vec![dx, dv]
            }),
        )
    }

    /// Per-sample, per-channel shift: `x` is `[B, ..., C]`, `v` is `[B, C]`.
    pub fn bc_add(&mut self, x: Var, v: Var) -> Var {
        let (b, c) = self.per_sample_dims(x, v, "bc_add");
        let per = self.value(x).len() / b;
        let mut out = self.value(x).clone();
        {
            let vs = slice(self.value(v));
            for (bi, block) in out.as_slice_mut().unwrap().chunks_exact_mut(per).enumerate() {
                let vr = &vs[bi * c..(bi + 1) * c];
                for row in block.chunks_exact_mut(c) {
                    row.iter_mut().zip(vr).for_each(|(o, &s)| *o += s);
                }
            }
        }
        self.record(
            out,
            &[x, v],
            bw(move |ctx, g| {
                let dv = ctx.needs_grad[1].then(|| {
                    let gs = slice(g);
                    let mut acc = vec![T::zero(); b * c];
                    for bi in 0..b {
                        let gb = &gs[bi * per..(bi + 1) * per];
                        let a = &mut acc[bi * c..(bi + 1) * c];
                        for gr in gb.chunks_exact(c) {
                            a.iter_mut().zip(gr).for_each(|(s, &x)| *s += x);
                        }
                    }
                    ArrayD::from_shape_vec(vec![b, c], acc).unwrap()
                });
                vec![Some(g.clone()), dv]
            }),
        )
    }

    fn per_sample_dims(&self, x: Var, v: Var, op: &str) -> (usize, usize) {
        let xs = self.shape(x);
        let vs = self.shape(v);
        assert!(xs.len() >= 2, "{op}: x must be at least [B, C]");
        assert_eq!(vs, &[xs[0], xs[xs.len() - 1]], "{op}: v must be [B, C]");
        (vs[0], vs[1])
    }
}

pub(crate) fn sum_rows<T: Real>(data: &[T], c: usize) -> ArrayD<T> {
    let mut acc = vec![T::zero(); c];
    for row in data.chunks_exact(c) {
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
    }
    ArrayD::from_shape_vec(vec![c], acc).unwrap()
}
