pub mod attention;
mod conv;
mod elementwise;
mod linear;
mod norm;
mod reduce;
pub(crate) mod shape;

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2};

use crate::graph::{Backward, BackwardCtx};
use crate::Real;

/// Adapter so that closures can serve as backward rules.
pub(crate) struct FnBackward<F>(pub F);

impl<T, F> Backward<T> for FnBackward<F>
where
    T: Real,
    F: Fn(&BackwardCtx<'_, T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>>,
{
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &ArrayD<T>) -> Vec<Option<ArrayD<T>>> {
        (self.0)(ctx, grad)
    }
}

pub(crate) fn bw<T, F>(f: F) -> FnBackward<F>
where
    T: Real,
    F: Fn(&BackwardCtx<'_, T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>>,
{
    FnBackward(f)
}

pub(crate) fn slice<T: Real>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("tape tensors are contiguous")
}

pub(crate) fn view2<T: Real>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

pub(crate) fn view2_mut<T: Real>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

