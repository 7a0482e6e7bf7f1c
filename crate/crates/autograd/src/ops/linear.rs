use ndarray::linalg::general_mat_mul;
use ndarray::ArrayD;

use super::elementwise::sum_rows;
use super::{bw, slice, view2, view2_mut};
use crate::{Graph, Real, Var};

impl<T: Real> Graph<'_, T> {
    /// `x · w (+ b)` over the trailing axis: `x` is `[..., K]`, `w` is `[K, N]`,
    /// `b` is `[N]`. A 1×1 convolution in NHWC layout is exactly this.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().expect("linear: rank >= 1");
        let ws = self.shape(w);
        assert!(ws.len() == 2 && ws[0] == k, "linear: weight {:?} vs input {:?}", ws, xs);
        let n = ws[1];
        let m = self.value(x).len() / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;

        let mut out = vec![T::zero(); m * n];
        {
            let xv = view2(slice(self.value(x)), m, k);
            let wv = view2(slice(self.value(w)), k, n);
            let mut ov = view2_mut(&mut out, m, n);
            general_mat_mul(T::one(), &xv, &wv, T::zero(), &mut ov);
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[n], "linear: bias shape");
            let bs = slice(self.value(b));
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(bs).for_each(|(o, &bb)| *o += bb);
            }
        }
        self.add_macs((m * k * n) as u64);
        let out = ArrayD::from_shape_vec(out_shape, out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(
            out,
            &inputs,
            bw(move |ctx, g| {
                let gv = view2(slice(g), m, n);
                let dx = ctx.needs_grad[0].then(|| {
                    let wv = view2(slice(ctx.inputs[1]), k, n);
                    let mut dx = vec![T::zero(); m * k];
                    general_mat_mul(T::one(), &gv, &wv.t(), T::zero(), &mut view2_mut(&mut dx, m, k));
                    ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dx).unwrap()
                });
                let dw = ctx.needs_grad[1].then(|| {
                    let xv = view2(slice(ctx.inputs[0]), m, k);
                    let mut dw = vec![T::zero(); k * n];
                    general_mat_mul(T::one(), &xv.t(), &gv, T::zero(), &mut view2_mut(&mut dw, k, n));
                    ArrayD::from_shape_vec(vec![k, n], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs_grad[2].then(|| sum_rows(slice(g), n)));
                }
                grads
            }),
        )
    }
}
