//! Compact-latent DDPM: schedule, forward corruption, conditional noise
//! predictor and the reverse sampler.

use autograd::nn::Linear;
use autograd::{Graph, ParamStore, Real, Var};
use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::config(format!("diffusion step {t} outside 1..={}", self.steps())))
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Largest `√ᾱ_T` accepted: the last latent has to be dominated by noise.
pub const MAX_SIGNAL_AT_T: f64 = 0.1;

/// Linear β from `beta_start` to `beta_end` over `steps` (a single step uses
/// `beta_end`).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::config("diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_end]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let last = *alpha_bar.last().unwrap();
    if last.sqrt() > MAX_SIGNAL_AT_T + 1e-9 {
        return Err(Error::config(format!(
            "schedule leaves too much signal at the last step: sqrt(alpha_bar_T) = {:.4} > {MAX_SIGNAL_AT_T}",
            last.sqrt()
        )));
    }
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

/// `√ᾱ·z + √(1−ᾱ)·ε`.
pub fn q_sample_with(alpha_bar: f64, z: &[f64], eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

pub fn q_sample(z: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if z.len() != eps.len() {
        return Err(Error::shape(format!("latent length {} vs noise length {}", z.len(), eps.len())));
    }
    Ok(q_sample_with(schedule.alpha_bar(t), z, eps))
}

/// Coefficients of `Z_{t−1} = a·Z_t − b·ε̂ + σ·η`.
fn step_coefficients(schedule: &DiffusionSchedule, t: usize) -> (f64, f64, f64) {
    let (alpha, alpha_bar) = (schedule.alpha(t), schedule.alpha_bar(t));
    let a = 1.0 / alpha.sqrt();
    let b = a * (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let sigma = if t == 1 { 0.0 } else { (1.0 - alpha).sqrt() };
    (a, b, sigma)
}

/// One reverse step on plain vectors with a given noise estimate.
pub fn denoise_update(z_t: &[f64], eps_hat: &[f64], t: usize, schedule: &DiffusionSchedule, eta: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let (a, b, sigma) = step_coefficients(schedule, t);
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .zip(eta)
        .map(|((z, e), n)| a * z - b * e + sigma * n)
        .collect())
}

/// Sinusoidal embedding of the step index: `[sin(t·f_i), cos(t·f_i)]` with
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * f).sin());
        out.push((t as f64 * f).cos());
    }
    out
}

/// Fully connected noise predictor `ε_θ(Z_t, C, t)` with an identity skip from `Z_t`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub layers: Vec<Linear>,
    pub prior_dim: usize,
    pub time_dim: usize,
    pub slope: f64,
}

impl Denoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        prior_dim: usize,
        time_dim: usize,
        hidden: usize,
        num_layers: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![2 * prior_dim + time_dim];
        dims.extend(std::iter::repeat_n(hidden, num_layers - 1));
        dims.push(prior_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, prior_dim, time_dim, slope }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z_t: Var, cond: Var, t: usize) -> Var {
        let batch = g.shape(z_t)[0];
        let emb = time_embedding(t, self.time_dim);
        let emb = ArrayD::from_shape_fn(vec![batch, self.time_dim], |i| T::lit(emb[i[1]]));
        let emb = g.constant(emb);
        let mut h = g.concat_last(&[z_t, cond, emb]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = g.leaky_relu(h, T::lit(self.slope));
            }
        }
        // Z_t is mostly noise at large t, so the identity is the natural
        // starting guess; without it an untrained rollout grows by 1/√ᾱ_T.
        g.add(h, z_t)
    }
}

/// One reverse step on the graph. `eta` is ignored at `t = 1`.
pub fn denoise_step<T: Real>(
    g: &mut Graph<'_, T>,
    denoiser: &Denoiser,
    z_t: Var,
    cond: Var,
    t: usize,
    schedule: &DiffusionSchedule,
    eta: Option<&Array2<f64>>,
) -> Var {
    let eps = denoiser.forward(g, z_t, cond, t);
    let (a, b, sigma) = step_coefficients(schedule, t);
    let mut terms = vec![(z_t, T::lit(a)), (eps, T::lit(-b))];
    if let (Some(eta), true) = (eta, sigma > 0.0) {
        let n = g.constant(eta.mapv(T::lit).into_dyn());
        terms.push((n, T::lit(sigma)));
    }
    g.lincomb(&terms)
}

/// Starting latent and per-step noise of one reverse trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerNoise {
    /// `Z_T`, `[B, 4Ĉ]`.
    pub start: Array2<f64>,
    /// `eta[t − 1]` is added at step `t`; `eta[0]` is unused.
    pub eta: Vec<Array2<f64>>,
}

impl SamplerNoise {
    pub fn draw(rng: &mut impl Rng, batch: usize, dim: usize, steps: usize) -> Self {
        let mut normal = |_| rng.sample::<f64, _>(StandardNormal);
        let start = Array2::from_shape_fn((batch, dim), &mut normal);
        let eta = (0..steps).map(|_| Array2::from_shape_fn((batch, dim), &mut normal)).collect();
        Self { start, eta }
    }
}

/// Full reverse rollout `t = T … 1` from `noise.start`.
pub fn sample_prior<T: Real>(
    g: &mut Graph<'_, T>,
    denoiser: &Denoiser,
    cond: Var,
    schedule: &DiffusionSchedule,
    noise: &SamplerNoise,
) -> Var {
    let mut z = g.constant(noise.start.mapv(T::lit).into_dyn());
    for t in (1..=schedule.steps()).rev() {
        z = denoise_step(g, denoiser, z, cond, t, schedule, Some(&noise.eta[t - 1]));
    }
    z
}

/// Mean absolute error between sampled and extracted priors.
pub fn diff_loss<T: Real>(g: &mut Graph<'_, T>, z_hat: Var, z: Var) -> Var {
    g.l1_loss(z_hat, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = make_schedule(1, 0.99, 0.99).unwrap();
        assert!((s.alpha_bar[0] - 0.01).abs() < 1e-15);
        let s = make_schedule(4, 0.1, 0.99).unwrap();
        assert_eq!(s.beta.len(), 4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[3] < 0.01);
        assert!(s.alpha.iter().zip(&s.beta).all(|(a, b)| (a + b - 1.0).abs() < 1e-15));
        assert!(make_schedule(4, 0.0, 0.99).unwrap_err().is_config());
        assert!(make_schedule(4, 0.5, 1.0).unwrap_err().is_config());
        assert!(make_schedule(4, 0.01, 0.02).unwrap_err().is_config());
        assert!(make_schedule(0, 0.1, 0.99).unwrap_err().is_config());
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(4, 0.1, 0.99).unwrap();
        let z = [0.5, -1.0, 2.0];
        let out = q_sample(&z, 2, &[0.0; 3], &s).unwrap();
        for (o, z) in out.iter().zip(&z) {
            assert!((o - s.alpha_bar(2).sqrt() * z).abs() < 1e-15);
        }
        assert_eq!(q_sample_with(1.0, &z, &[3.0, 3.0, 3.0]), z.to_vec());
        assert!(q_sample(&z, 0, &[0.0; 3], &s).is_err());
        assert!(q_sample(&z, 5, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn zero_noise_estimate_rescales() {
        let s = make_schedule(4, 0.1, 0.99).unwrap();
        let z = [0.3, -0.7];
        let out = denoise_update(&z, &[0.0, 0.0], 3, &s, &[0.0, 0.0]).unwrap();
        for (o, z) in out.iter().zip(&z) {
            assert!((o - z / s.alpha(3).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn time_embedding_shape() {
        let e = time_embedding(3, 16);
        assert_eq!(e.len(), 16);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15 && (e[1] - 3f64.cos()).abs() < 1e-15);
        assert_ne!(time_embedding(1, 16), time_embedding(2, 16));
    }
}
