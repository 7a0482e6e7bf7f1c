use ndarray::linalg::general_mat_mul;
use ndarray::ArrayD;

use super::elementwise::sum_rows;
use super::{bw, slice, view2, view2_mut};
use crate::{Graph, Real, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    ksize: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.ksize / 2
    }

    /// Input offset for output pixel (oy, ox) and tap (ky, kx), or None if the tap
    /// falls into the zero padding.
    #[inline]
    fn src(&self, bi: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad() as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad() as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some(((bi * self.h + iy as usize) * self.w + ix as usize) * self.cin)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.ksize * g.ksize;
    let row_len = kk * g.cin;
    let mut cols = vec![T::zero(); g.b * g.oh * g.ow * row_len];
    let mut r = 0;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &mut cols[r * row_len..(r + 1) * row_len];
                for ky in 0..g.ksize {
                    for kx in 0..g.ksize {
                        if let Some(s) = g.src(bi, oy, ox, ky, kx) {
                            let t = (ky * g.ksize + kx) * g.cin;
                            row[t..t + g.cin].copy_from_slice(&x[s..s + g.cin]);
                        }
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.ksize * g.ksize;
    let row_len = kk * g.cin;
    let mut x = vec![T::zero(); g.b * g.h * g.w * g.cin];
    let mut r = 0;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &cols[r * row_len..(r + 1) * row_len];
                for ky in 0..g.ksize {
                    for kx in 0..g.ksize {
                        if let Some(s) = g.src(bi, oy, ox, ky, kx) {
                            let t = (ky * g.ksize + kx) * g.cin;
                            x[s..s + g.cin]
                                .iter_mut()
                                .zip(&row[t..t + g.cin])
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}

impl<T: Real> Graph<'_, T> {
    /// Dense 2-D convolution, NHWC, odd square kernel with "same" zero padding.
    ///
    /// `x` is `[B, H, W, Cin]`, `w` is `[k·k·Cin, Cout]` with rows ordered
    /// (ky, kx, cin), `b` is `[Cout]`. Output is `[B, ⌈H/stride⌉, ⌈W/stride⌉, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, ksize: usize, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be NHWC");
        assert!(ksize % 2 == 1 && stride >= 1);
        let (bn, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "conv2d: weight must be [k*k*Cin, Cout]");
        assert_eq!(ws[0], ksize * ksize * cin, "conv2d: weight rows vs input channels");
        let cout = ws[1];
        let geom = ConvGeom {
            b: bn,
            h,
            w: wd,
            cin,
            ksize,
            stride,
            oh: (h - 1) / stride + 1,
            ow: (wd - 1) / stride + 1,
        };
        let m = bn * geom.oh * geom.ow;
        let kdim = ksize * ksize * cin;

        let cols = im2col(slice(self.value(x)), &geom);
        let mut out = vec![T::zero(); m * cout];
        general_mat_mul(
            T::one(),
            &view2(&cols, m, kdim),
            &view2(slice(self.value(w)), kdim, cout),
            T::zero(),
            &mut view2_mut(&mut out, m, cout),
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[cout], "conv2d: bias shape");
            let bs = slice(self.value(b));
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(bs).for_each(|(o, &bb)| *o += bb);
            }
        }
        self.add_macs((m * kdim * cout) as u64);
        let out = ArrayD::from_shape_vec(vec![bn, geom.oh, geom.ow, cout], out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let keep_cols = self.requires_grad(w);
        let cols = if keep_cols { cols } else { Vec::new() };
        self.record(
            out,
            &inputs,
            bw(move |ctx, g| {
                let gv = view2(slice(g), m, cout);
                let dx = ctx.needs_grad[0].then(|| {
                    let mut dcols = vec![T::zero(); m * kdim];
                    let wv = view2(slice(ctx.inputs[1]), kdim, cout);
                    general_mat_mul(T::one(), &gv, &wv.t(), T::zero(), &mut view2_mut(&mut dcols, m, kdim));
                    ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), col2im(&dcols, &geom)).unwrap()
                });
                let dw = ctx.needs_grad[1].then(|| {
                    let mut dw = vec![T::zero(); kdim * cout];
                    general_mat_mul(
                        T::one(),
                        &view2(&cols, m, kdim).t(),
                        &gv,
                        T::zero(),
                        &mut view2_mut(&mut dw, kdim, cout),
                    );
                    ArrayD::from_shape_vec(vec![kdim, cout], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs_grad[2].then(|| sum_rows(slice(g), cout)));
                }
                grads
            }),
        )
    }

    /// Depthwise 2-D convolution, NHWC, stride 1, "same" zero padding.
    ///
    /// `x` is `[B, H, W, C]`, `w` is `[k·k, C]`, `b` is `[C]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, ksize: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "dwconv2d: input must be NHWC");
        let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(w), &[ksize * ksize, c], "dwconv2d: weight shape");
        let geom = ConvGeom {
            b: bn,
            h,
            w: wd,
            cin: c,
            ksize,
            stride: 1,
            oh: h,
            ow: wd,
        };
        let xv = slice(self.value(x));
        let wv = slice(self.value(w));
        let mut out = vec![T::zero(); xv.len()];
        let mut o = 0;
        for bi in 0..bn {
            for oy in 0..h {
                for ox in 0..wd {
                    let orow = &mut out[o..o + c];
                    for ky in 0..ksize {
                        for kx in 0..ksize {
                            if let Some(s) = geom.src(bi, oy, ox, ky, kx) {
                                let wr = &wv[(ky * ksize + kx) * c..(ky * ksize + kx + 1) * c];
                                let xr = &xv[s..s + c];
                                for i in 0..c {
                                    orow[i] += wr[i] * xr[i];
                                }
                            }
                        }
                    }
                    o += c;
                }
            }
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[c], "dwconv2d: bias shape");
            let bs = slice(self.value(b));
            for row in out.chunks_exact_mut(c) {
                row.iter_mut().zip(bs).for_each(|(o, &bb)| *o += bb);
            }
        }
        self.add_macs((bn * h * wd * ksize * ksize * c) as u64);
        let out = ArrayD::from_shape_vec(xs.clone(), out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(
            out,
            &inputs,
            bw(move |ctx, g| {
                let gs = slice(g);
                let xv = slice(ctx.inputs[0]);
                let wv = slice(ctx.inputs[1]);
                let mut dx = ctx.needs_grad[0].then(|| vec![T::zero(); xv.len()]);
                let mut dw = ctx.needs_grad[1].then(|| vec![T::zero(); wv.len()]);
                let mut o = 0;
                for bi in 0..bn {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let grow = &gs[o..o + c];
                            for ky in 0..ksize {
                                for kx in 0..ksize {
                                    let Some(s) = geom.src(bi, oy, ox, ky, kx) else { continue };
                                    let t = (ky * ksize + kx) * c;
                                    if let Some(dx) = dx.as_mut() {
                                        let wr = &wv[t..t + c];
                                        let dr = &mut dx[s..s + c];
                                        for i in 0..c {
                                            dr[i] += grow[i] * wr[i];
                                        }
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xr = &xv[s..s + c];
                                        let dr = &mut dw[t..t + c];
                                        for i in 0..c {
                                            dr[i] += grow[i] * xr[i];
                                        }
                                    }
                                }
                            }
                            o += c;
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), d).unwrap()),
                    dw.map(|d| ArrayD::from_shape_vec(ctx.inputs[1].raw_dim(), d).unwrap()),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs_grad[2].then(|| sum_rows(gs, c)));
                }
                grads
            }),
        )
    }
}
