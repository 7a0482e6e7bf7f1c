use autograd::nn::{full, uniform, zeros, Linear};
use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over channels followed by a per-channel scale and shift that
/// are linear functions of the prior vector `Z`.
///
/// Without a prior the maps are absent and the block reduces to a plain
/// (affine-free) layer norm.
#[derive(Clone, Debug)]
pub struct PriorModulation {
    pub scale: Option<Linear>,
    pub shift: Option<Linear>,
}

impl PriorModulation {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        prior_dim: usize,
        channels: usize,
        use_prior: bool,
        rng: &mut impl Rng,
    ) -> Self {
        if !use_prior {
            return Self { scale: None, shift: None };
        }
        // Small weights so the initial modulation is close to the identity.
        let bound = 0.1 / (prior_dim as f64).sqrt();
        let scale = Linear::with_values(
            store,
            &format!("{name}.scale"),
            uniform(&[prior_dim, channels], bound, rng),
            Some(full(&[channels], 1.0)),
        );
        let shift = Linear::with_values(
            store,
            &format!("{name}.shift"),
            uniform(&[prior_dim, channels], bound, rng),
            Some(zeros(&[channels])),
        );
        Self { scale: Some(scale), shift: Some(shift) }
    }

    /// `x` is `[B, …, C]`, `z` is `[B, 4Ĉ]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        match (&self.scale, &self.shift, z) {
            (Some(sc), Some(sh), Some(z)) => {
                let gamma = sc.forward(g, z);
                let delta = sh.forward(g, z);
                let y = g.bc_mul(n, gamma);
                g.bc_add(y, delta)
            }
            (None, None, _) => n,
            _ => panic!("prior modulation needs a prior vector"),
        }
    }
}
