use std::sync::Arc;

use ndarray::ArrayD;

use super::{bw, slice};
use crate::{Graph, Real, Var};

/// Marks an output position of [`Graph::gather`] that is filled with zero.
pub const GATHER_ZERO: u32 = u32::MAX;

impl<T: Real> Graph<'_, T> {
    /// `out[i] = x[index[i]]` over flattened storage; `GATHER_ZERO` yields 0.
    ///
    /// Any fixed rearrangement (window partition, cyclic shift, space-to-depth,
    /// padding, cropping, head splitting) is a gather with a precomputed index.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, out_shape: &[usize]) -> Var {
        let n: usize = out_shape.iter().product();
        assert_eq!(index.len(), n, "gather: index length vs output shape");
        let xs = slice(self.value(x));
        let out: Vec<T> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { xs[i as usize] })
            .collect();
        let out = ArrayD::from_shape_vec(out_shape.to_vec(), out).unwrap();
        self.record(
            out,
            &[x],
            bw(move |ctx, g| {
                let gs = slice(g);
                let mut dx = vec![T::zero(); ctx.inputs[0].len()];
                for (&i, &gv) in index.iter().zip(gs) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += gv;
                    }
                }
                vec![Some(ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dx).unwrap())]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).len(), "reshape: element count");
        let out = ArrayD::from_shape_vec(shape.to_vec(), slice(self.value(x)).to_vec()).unwrap();
        self.record(
            out,
            &[x],
            bw(|ctx, g| {
                vec![Some(
                    ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), slice(g).to_vec()).unwrap(),
                )]
            }),
        )
    }

    /// Concatenates along the trailing axis; all leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading axes differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&slice(self.value(v))[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = ArrayD::from_shape_vec(shape, out).unwrap();
        self.record(
            out,
            xs,
            bw(move |ctx, g| {
                let gs = slice(g);
                let mut parts: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (p, &w) in parts.iter_mut().zip(&widths) {
                        p.extend_from_slice(&gs[off..off + w]);
                        off += w;
                    }
                }
                parts
                    .into_iter()
                    .zip(&ctx.inputs)
                    .zip(&ctx.needs_grad)
                    .map(|((p, inp), &need)| need.then(|| ArrayD::from_shape_vec(inp.raw_dim(), p).unwrap()))
                    .collect()
            }),
        )
    }

    /// Columns `[start, start + len)` of the trailing axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        assert!(start + len <= c, "narrow_last: range out of bounds");
        let rows = self.value(x).len() / c;
        let src = slice(self.value(x));
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let out = ArrayD::from_shape_vec(shape, out).unwrap();
        self.record(
            out,
            &[x],
            bw(move |ctx, g| {
                let gs = slice(g);
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&gs[r * len..(r + 1) * len]);
                }
                vec![Some(ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dx).unwrap())]
            }),
        )
    }
}
