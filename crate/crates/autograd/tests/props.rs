use std::sync::Arc;

use autograd::{Graph, GATHER_ZERO};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

proptest! {
    /// The backward of a gather is its adjoint: <gather(x), y> == <x, gatherᵀ(y)>.
    #[test]
    fn gather_backward_is_adjoint(
        n in 1usize..20,
        picks in prop::collection::vec(prop::option::of(0usize..20), 1..30),
        seed in 0u64..1000,
    ) {
        let index: Vec<u32> = picks.iter().map(|p| match p {
            Some(i) => (*i % n) as u32,
            None => GATHER_ZERO,
        }).collect();
        let m = index.len();
        let x: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
        let y: Vec<f64> = (0..m).map(|i| ((i as u64 * 7 + seed) % 13) as f64 - 6.0).collect();
        let mut g = Graph::<f64>::detached();
        let xv = g.variable(ArrayD::from_shape_vec(IxDyn(&[n]), x.clone()).unwrap());
        let out = g.gather(xv, Arc::from(index), &[m]);
        let yv = g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), y.clone()).unwrap());
        let p = g.mul(out, yv);
        let s = g.sum_all(p);
        let lhs = g.item(s);
        let grads = g.backward(s);
        let rhs: f64 = grads.wrt(xv).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    /// Softmax rows of attention sum to one, so attending to a constant value
    /// tensor reproduces the constant.
    #[test]
    fn attention_of_constant_values_is_constant(c in -5.0f64..5.0, scale in 0.01f64..3.0) {
        let mut g = Graph::<f64>::detached();
        let q = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[1] + i[2]) as f64 * 0.3));
        let k = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 5, 4]), |i| (i[1] * i[2]) as f64 * 0.2));
        let v = g.constant(ArrayD::from_elem(IxDyn(&[2, 5, 2]), c));
        let spec = autograd::AttentionSpec { heads: 1, scale, mask: None };
        let y = g.attention(q, k, v, None, &spec);
        prop_assert!(g.value(y).iter().all(|&o| (o - c).abs() < 1e-9));
    }
}
