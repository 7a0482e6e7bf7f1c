//! Central finite-difference checks for tape gradients (f64 only).

use ndarray::ArrayD;
use rand::Rng;

use crate::{Graph, ParamStore, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self { checked: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps exact-zero gradients from
/// amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const STEP: f64 = 1e-5;

fn pick_coords(len: usize, coords: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= coords {
        (0..len).collect()
    } else {
        (0..coords).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Checks gradients with respect to free inputs. `f` must rebuild the whole
/// computation from the supplied input nodes and return a scalar.
pub fn check_inputs(
    inputs: &[ArrayD<f64>],
    coords: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |xs: &[ArrayD<f64>]| {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        (g.item(out), g, vars, out)
    };
    let (_, g, vars, out) = eval(inputs);
    let grads = g.backward(out);
    let mut report = GradCheck::new();
    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        for c in pick_coords(x.len(), coords, rng) {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[c] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[c] -= STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
            report.record(analytic.as_slice().unwrap()[c], numeric, || format!("input {i}[{c}]"));
        }
    }
    report
}

/// Checks gradients with respect to every parameter in `store` accepted by
/// `select`.
pub fn check_params(
    store: &ParamStore<f64>,
    coords: usize,
    rng: &mut impl Rng,
    select: impl Fn(&str) -> bool,
    f: impl Fn(&mut Graph<'_, f64>) -> Var,
) -> GradCheck {
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.item(out)
    };
    let mut g = Graph::new(store);
    let out = f(&mut g);
    let grads = g.backward(out);
    let mut report = GradCheck::new();
    for (id, name, value) in store.iter() {
        if !select(name) {
            continue;
        }
        let analytic = grads.param(id).cloned().unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
        for c in pick_coords(value.len(), coords, rng) {
            let mut plus = store.clone();
            plus.get_mut(id).as_slice_mut().unwrap()[c] += STEP;
            let mut minus = store.clone();
            minus.get_mut(id).as_slice_mut().unwrap()[c] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            report.record(analytic.as_slice().unwrap()[c], numeric, || format!("{name}[{c}]"));
        }
    }
    report
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so that
/// every output element contributes to the checked gradient.
pub fn random_projection(g: &mut Graph<'_, f64>, y: Var, rng: &mut impl Rng) -> Var {
    let shape = g.shape(y).to_vec();
    let w = crate::nn::uniform::<f64>(&shape, 1.0, rng);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}
