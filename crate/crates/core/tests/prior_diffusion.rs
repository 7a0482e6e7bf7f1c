use autograd::gradcheck::{check_params, random_projection, relative_error};
use autograd::{Graph, ParamStore, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use priorsr::diffusion::{
    denoise_step, denoise_update, diff_loss, make_schedule, q_sample, sample_prior, Denoiser, SamplerNoise,
};
use priorsr::prior::Encoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(lo..hi))
}

fn normal(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn encoder(cin: usize, latent: usize, seed: u64) -> (ParamStore<f64>, Encoder) {
    let mut store = ParamStore::new();
    let e = Encoder::new(&mut store, "pe", cin, latent, 9, 0.2, &mut rng(seed));
    (store, e)
}

fn encode(store: &ParamStore<f64>, e: &Encoder, x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let z = e.forward(&mut g, xv);
    g.value(z).clone()
}

#[test]
fn encoder_output_length_is_four_latent_channels() {
    let (store, e) = encoder(34, 64, 1);
    let z = encode(&store, &e, &uniform(&[1, 16, 16, 34], 0.0, 1.0, 2));
    assert_eq!(z.shape(), &[1, 256]);
    let (store, e) = encoder(2, 16, 3);
    let z = encode(&store, &e, &uniform(&[2, 16, 16, 2], 0.0, 1.0, 4));
    assert_eq!(z.shape(), &[2, 64]);
}

#[test]
fn zero_final_layer_gives_zero_prior() {
    let (mut store, e) = encoder(34, 8, 5);
    store.get_mut(e.fc2.weight).fill(0.0);
    store.get_mut(e.fc2.bias.unwrap()).fill(0.0);
    let z = encode(&store, &e, &uniform(&[1, 16, 16, 34], 0.0, 1.0, 6));
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn prior_sees_the_hr_image_beyond_its_lr_version() {
    let (store, e) = encoder(34, 8, 7);
    let lr = uniform(&[1, 16, 16, 2], 0.0, 1.0, 8);
    for pair in 0..10 {
        let hr_a = uniform(&[1, 16, 16, 32], 0.0, 1.0, 100 + pair);
        let hr_b = uniform(&[1, 16, 16, 32], 0.0, 1.0, 200 + pair);
        let cat = |hr: &ArrayD<f64>| {
            ndarray::concatenate(ndarray::Axis(3), &[hr.view(), lr.view()]).unwrap()
        };
        let za = encode(&store, &e, &cat(&hr_a));
        let zb = encode(&store, &e, &cat(&hr_b));
        let d = za.iter().zip(&zb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d > 0.0, "pair {pair}");
    }
}

#[test]
fn encoder_is_deterministic_and_finite_on_many_inputs() {
    let (store, e) = encoder(2, 16, 9);
    for chunk in 0..10 {
        let x = uniform(&[100, 16, 16, 2], 0.0, 1.0, 300 + chunk);
        let z = encode(&store, &e, &x);
        assert!(z.iter().all(|v| v.is_finite() && v.abs() < 1e6));
        if chunk == 0 {
            assert_eq!(z, encode(&store, &e, &x));
        }
    }
}

#[test]
fn encoder_gradients() {
    let (store, e) = encoder(6, 2, 10);
    let x = uniform(&[1, 8, 8, 6], 0.0, 1.0, 11);
    let rep = check_params(&store, 4, &mut rng(12), |_| true, |g| {
        let xv = g.constant(x.clone());
        let z = e.forward(g, xv);
        random_projection(g, z, &mut rng(13))
    });
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
}

/// Closed-form posterior mean of `Z_{t−1}` given `Z_t` and `Z_0`.
fn posterior_mean(ab_prev: f64, alpha: f64, ab: f64, z0: f64, zt: f64) -> f64 {
    let beta = 1.0 - alpha;
    ab_prev.sqrt() * beta / (1.0 - ab) * z0 + alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * zt
}

#[test]
fn one_step_with_true_noise_is_the_posterior_mean() {
    let s = make_schedule(4, 0.1, 0.99).unwrap();
    let mut r = rng(14);
    let z = normal(16, &mut r);
    let eps = normal(16, &mut r);
    for t in 1..=4 {
        let zt = q_sample(&z, t, &eps, &s).unwrap();
        let prev = denoise_update(&zt, &eps, t, &s, &[0.0; 16]).unwrap();
        let ab_prev = if t == 1 { 1.0 } else { s.alpha_bar[t - 2] };
        for i in 0..16 {
            let want = posterior_mean(ab_prev, s.alpha[t - 1], s.alpha_bar[t - 1], z[i], zt[i]);
            assert!((prev[i] - want).abs() < 1e-12, "t={t}");
        }
    }
}

#[test]
fn rollout_with_oracle_noise_recovers_the_prior() {
    for steps in [1, 4, 16] {
        let s = make_schedule(steps, 0.1, 0.99).unwrap();
        let mut r = rng(15 + steps as u64);
        let z = normal(32, &mut r);
        let mut zt = q_sample(&z, steps, &normal(32, &mut r), &s).unwrap();
        for t in (1..=steps).rev() {
            // The noise that explains the current state given the true prior.
            let ab = s.alpha_bar[t - 1];
            let eps: Vec<f64> = zt.iter().zip(&z).map(|(x, z0)| (x - ab.sqrt() * z0) / (1.0 - ab).sqrt()).collect();
            zt = denoise_update(&zt, &eps, t, &s, &[0.0; 32]).unwrap();
        }
        let err = zt.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "T={steps}: {err}");
    }
}

#[test]
fn forward_marginal_statistics() {
    let s = make_schedule(4, 0.1, 0.99).unwrap();
    let z = [0.7, -1.3, 2.0];
    let n = 100_000;
    let mut r = rng(16);
    for t in [1, 2, 4] {
        let ab = s.alpha_bar[t - 1];
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let x = q_sample(&z, t, &normal(3, &mut r), &s).unwrap();
            for i in 0..3 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let sigma = (1.0 - ab).sqrt();
            assert!((mean - ab.sqrt() * z[i]).abs() < 3.0 * sigma / (n as f64).sqrt(), "t={t} mean {mean}");
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "t={t} var {var}");
        }
    }
}

fn denoiser(seed: u64) -> (ParamStore<f64>, Denoiser) {
    let mut store = ParamStore::new();
    let d = Denoiser::new(&mut store, "denoiser", 8, 16, 32, 5, 0.2, &mut rng(seed));
    (store, d)
}

#[test]
fn graph_step_matches_plain_update() {
    let (store, den) = denoiser(17);
    let s = make_schedule(4, 0.1, 0.99).unwrap();
    let zt = uniform(&[2, 8], -1.0, 1.0, 18);
    let c = uniform(&[2, 8], -1.0, 1.0, 19);
    let eta = Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 / 10.0);
    for t in 1..=4 {
        let mut g = Graph::inference(&store);
        let (zv, cv) = (g.constant(zt.clone()), g.constant(c.clone()));
        let eps = den.forward(&mut g, zv, cv, t);
        let eps = g.value(eps).clone();
        let next = denoise_step(&mut g, &den, zv, cv, t, &s, Some(&eta));
        for b in 0..2 {
            let row = |a: &ArrayD<f64>| a.index_axis(ndarray::Axis(0), b).iter().copied().collect::<Vec<_>>();
            let want = denoise_update(&row(&zt), &row(&eps), t, &s, eta.row(b).as_slice().unwrap()).unwrap();
            let got = row(g.value(next));
            for (a, w) in got.iter().zip(&want) {
                assert!((a - w).abs() < 1e-12, "t={t}");
            }
        }
    }
    assert_eq!(den.layers.len(), 5);
}

#[test]
fn zeroed_denoiser_predicts_its_input_and_contracts() {
    let (mut store, den) = denoiser(21);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).fill(0.0);
    }
    let s = make_schedule(8, 0.1, 0.99).unwrap();
    let zt = uniform(&[2, 8], -3.0, 3.0, 22);
    let c = uniform(&[2, 8], -1.0, 1.0, 23);
    let mut g = Graph::inference(&store);
    let (zv, cv) = (g.constant(zt.clone()), g.constant(c));
    let eps = den.forward(&mut g, zv, cv, 5);
    assert_eq!(g.value(eps), &zt);

    let noise = SamplerNoise { start: Array2::from_elem((2, 8), 2.0), eta: vec![Array2::zeros((2, 8)); 8] };
    let cv = g.constant(ArrayD::zeros(IxDyn(&[2, 8])));
    let z = sample_prior(&mut g, &den, cv, &s, &noise);
    // With ε̂ = Z_t each step scales by (1 − (1−α_t)/√(1−ᾱ_t))/√α_t < 1.
    let gains: Vec<f64> =
        (1..=8).map(|t| (1.0 - (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt()) / s.alpha(t).sqrt()).collect();
    assert!(gains.iter().all(|k| (0.0..1.0).contains(k)), "{gains:?}");
    let want = 2.0 * gains.iter().product::<f64>();
    assert!(g.value(z).iter().all(|v| (v - want).abs() < 1e-12), "{:?}", g.value(z));
}

#[test]
fn sampler_is_reproducible_per_seed() {
    let (store, den) = denoiser(20);
    let s = make_schedule(4, 0.1, 0.99).unwrap();
    let c = uniform(&[3, 8], -1.0, 1.0, 21);
    let run = |seed: u64| {
        let noise = SamplerNoise::draw(&mut rng(seed), 3, 8, 4);
        let mut g = Graph::inference(&store);
        let cv = g.constant(c.clone());
        let z = sample_prior(&mut g, &den, cv, &s, &noise);
        g.value(z).clone()
    };
    let a = run(1);
    assert_eq!(a.shape(), &[3, 8]);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
}

#[test]
fn diff_loss_values_and_subgradient() {
    let z = uniform(&[1, 8], -1.0, 1.0, 22);
    let loss = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
        let mut g = Graph::detached();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = diff_loss(&mut g, av, bv);
        g.item(l)
    };
    assert_eq!(loss(&z, &z), 0.0);
    assert!((loss(&(&z + 1.0), &z) - 1.0).abs() < 1e-12);
    let w = uniform(&[1, 8], -1.0, 1.0, 23);
    for a in [-2.0, 0.5, 3.0] {
        assert!((loss(&(&w * a), &(&z * a)) - a.abs() * loss(&w, &z)).abs() < 1e-12);
    }
    let mut g = Graph::detached();
    let wv = g.variable(w.clone());
    let zv = g.constant(z.clone());
    let l = diff_loss(&mut g, wv, zv);
    let grads = g.backward(l);
    for (gv, (a, b)) in grads.wrt(wv).unwrap().iter().zip(w.iter().zip(&z)) {
        assert!((gv - (a - b).signum() / 8.0).abs() < 1e-15);
    }
    let mut g = Graph::detached();
    let zv1 = g.variable(z.clone());
    let zv2 = g.constant(z.clone());
    let l = diff_loss(&mut g, zv1, zv2);
    assert!(g.backward(l).wrt(zv1).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn denoise_step_gradients() {
    let (store, den) = denoiser(24);
    let s = make_schedule(4, 0.1, 0.99).unwrap();
    let zt = uniform(&[2, 8], -1.0, 1.0, 25);
    let c = uniform(&[2, 8], -1.0, 1.0, 26);
    let eta = Array2::from_elem((2, 8), 0.3);
    let rep = check_params(&store, 5, &mut rng(27), |_| true, |g| {
        let (zv, cv) = (g.constant(zt.clone()), g.constant(c.clone()));
        let z = denoise_step(g, &den, zv, cv, 3, &s, Some(&eta));
        random_projection(g, z, &mut rng(28))
    });
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    // Input gradients through a whole rollout.
    let f = |g: &mut Graph<'_, f64>, c: Var| {
        let noise = SamplerNoise::draw(&mut rng(29), 2, 8, 4);
        let z = sample_prior(g, &den, c, &s, &noise);
        random_projection(g, z, &mut rng(30))
    };
    let mut g = Graph::new(&store);
    let cv = g.variable(c.clone());
    let out = f(&mut g, cv);
    let analytic = g.backward(out).wrt(cv).unwrap().clone();
    for i in [0, 5, 11] {
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut c2 = c.clone();
            c2.as_slice_mut().unwrap()[i] += delta;
            let mut g = Graph::new(&store);
            let cv = g.variable(c2);
            let out = f(&mut g, cv);
            g.item(out)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(relative_error(analytic.as_slice().unwrap()[i], numeric) < 1e-5);
    }
}
