use ndarray::{ArrayD, IxDyn, Zip};

use super::{bw, slice};
use crate::{Graph, Real, Var};

impl<T: Real> Graph<'_, T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.record(
            out,
            &[x],
            bw(|ctx, g| {
                let gv: T = g.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), gv))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Averages `[B, d1, ..., dk, C]` over the middle axes, giving `[B, C]`.
    pub fn mean_middle(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2);
        let b = xs[0];
        let c = xs[xs.len() - 1];
        let per = self.value(x).len() / b;
        let count = per / c;
        let inv = T::one() / T::lit(count as f64);
        let xv = slice(self.value(x));
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for row in xv[bi * per..(bi + 1) * per].chunks_exact(c) {
                o.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let out = ArrayD::from_shape_vec(vec![b, c], out).unwrap();
        self.record(
            out,
            &[x],
            bw(move |ctx, g| {
                let gs = slice(g);
                let mut dx = vec![T::zero(); ctx.inputs[0].len()];
                for bi in 0..b {
                    let gr = &gs[bi * c..(bi + 1) * c];
                    for row in dx[bi * per..(bi + 1) * per].chunks_exact_mut(c) {
                        row.iter_mut().zip(gr).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dx).unwrap())]
            }),
        )
    }

    /// Mean absolute difference. The subgradient at exact ties is 0.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1_loss: shape mismatch");
        let n = self.value(a).len();
        let inv = T::one() / T::lit(n as f64);
        let s: T = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(T::zero(), |acc, &x, &y| acc + (x - y).abs());
        let out = ArrayD::from_elem(IxDyn(&[]), s * inv);
        self.record(
            out,
            &[a, b],
            bw(move |ctx, g| {
                let gv: T = g.iter().copied().next().unwrap() * inv;
                let mut d = ArrayD::zeros(ctx.inputs[0].raw_dim());
                Zip::from(&mut d)
                    .and(ctx.inputs[0])
                    .and(ctx.inputs[1])
                    .for_each(|d, &x, &y| {
                        *d = if x > y {
                            gv
                        } else if x < y {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                let db = ctx.needs_grad[1].then(|| d.mapv(|x: T| -x));
                vec![Some(d), db]
            }),
        )
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse_loss: shape mismatch");
        let n = self.value(a).len();
        let inv = T::one() / T::lit(n as f64);
        let s: T = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y));
        let out = ArrayD::from_elem(IxDyn(&[]), s * inv);
        self.record(
            out,
            &[a, b],
            bw(move |ctx, g| {
                let k = g.iter().copied().next().unwrap() * inv * T::lit(2.0);
                let d: ArrayD<T> = (ctx.inputs[0] - ctx.inputs[1]) * k;
                let db = ctx.needs_grad[1].then(|| d.mapv(|x: T| -x));
                vec![Some(d), db]
            }),
        )
    }
}
