use autograd::optim::Adam;
use autograd::{Graph, ParamStore};
use ndarray::{arr1, ArrayD};

fn quadratic_grads(store: &ParamStore<f64>) -> autograd::Grads<f64> {
    let mut g = Graph::new(store);
    let p = g.param(store.id("p").unwrap());
    let q = g.mul(p, p);
    let loss = g.sum_all(q);
    g.backward(loss)
}

#[test]
fn adam_matches_hand_computed_updates() {
    let mut store = ParamStore::new();
    store.add("p", arr1(&[1.0f64, -2.0]).into_dyn());
    let mut opt = Adam::new(store.len());
    let lr = 0.1;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut p = [1.0f64, -2.0];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for t in 1..=3 {
        let grads = quadratic_grads(&store);
        opt.step(&mut store, &grads, lr);
        for i in 0..2 {
            let g = 2.0 * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let got = store.by_name("p").unwrap();
        for i in 0..2 {
            assert!((got[i] - p[i]).abs() < 1e-12, "step {t}: {} vs {}", got[i], p[i]);
        }
    }
    // First step moves every coordinate by lr regardless of gradient scale.
    assert_eq!(opt.steps(), 3);
}

#[test]
fn adam_skips_parameters_without_gradient() {
    let mut store = ParamStore::new();
    store.add("p", arr1(&[1.0f64]).into_dyn());
    let frozen = store.add("frozen", arr1(&[5.0f64]).into_dyn());
    let mut opt = Adam::new(store.len());
    let grads = quadratic_grads(&store);
    opt.step(&mut store, &grads, 0.1);
    assert_eq!(store.get(frozen), &ArrayD::from_elem(ndarray::IxDyn(&[1]), 5.0));
    assert!(opt.moments(frozen).is_none());
    assert!(opt.moments(store.id("p").unwrap()).is_some());
}
