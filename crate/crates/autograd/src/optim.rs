//! Adam with externally supplied learning rate.

use ndarray::{ArrayD, Zip};

use crate::{Grads, ParamId, ParamStore, Real};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<ArrayD<T>>>,
    second: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize) -> Self {
        Self::with_betas(num_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_steps(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, id: ParamId) -> Option<(&ArrayD<T>, &ArrayD<T>)> {
        match (&self.first[id.index()], &self.second[id.index()]) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, id: ParamId, m: ArrayD<T>, v: ArrayD<T>) {
        self.first[id.index()] = Some(m);
        self.second[id.index()] = Some(v);
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient (frozen or unused) are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1);
        let c2 = T::lit(1.0 - self.beta2);
        let bias1 = T::lit(1.0 - self.beta1.powi(t));
        let bias2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        let mut ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            let g = grads.param(id).unwrap();
            let m = self.first[id.index()].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.second[id.index()].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.get_mut(id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let mh = *m / bias1;
                let vh = *v / bias2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}
