use ndarray::ArrayD;

use super::{bw, slice};
use crate::{Graph, Real, Var};

impl<T: Real> Graph<'_, T> {
    /// Layer normalization over the trailing axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let c = *self.shape(x).last().expect("layer_norm: rank >= 1");
        let eps = T::lit(eps);
        let cn = T::lit(c as f64);
        let xs = slice(self.value(x));
        let rows = xs.len() / c;
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (xr, or)) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / cn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            or.iter_mut().zip(xr).for_each(|(o, &v)| *o = (v - mean) * is);
        }
        let out = ArrayD::from_shape_vec(self.value(x).raw_dim(), out).unwrap();
        self.record(
            out,
            &[x],
            bw(move |ctx, g| {
                let y = slice(ctx.output);
                let gs = slice(g);
                let mut dx = vec![T::zero(); gs.len()];
                for (r, ((gr, yr), dr)) in gs
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() / cn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                    for i in 0..c {
                        dr[i] = inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(g.raw_dim(), dx).unwrap())]
            }),
        )
    }
}
