use autograd::nn::{DwConv2d, Linear};
use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;

use super::modulation::PriorModulation;

/// Gated convolutional feed-forward block.
///
/// Two paths of (1×1 conv, 3×3 depthwise conv) on the modulated input; the
/// GELU of the first gates the second, a 1×1 conv maps back to `C`, and the
/// unmodulated input is added.
#[derive(Clone, Debug)]
pub struct PgFfn {
    pub modulation: PriorModulation,
    pub in1: Linear,
    pub dw1: DwConv2d,
    pub in2: Linear,
    pub dw2: DwConv2d,
    pub out: Linear,
}

impl PgFfn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        expansion: usize,
        prior_dim: usize,
        use_prior: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = channels * expansion;
        Self {
            modulation: PriorModulation::new(store, &format!("{name}.mod"), prior_dim, channels, use_prior, rng),
            in1: Linear::new(store, &format!("{name}.in1"), channels, hidden, true, rng),
            dw1: DwConv2d::new(store, &format!("{name}.dw1"), hidden, 3, rng),
            in2: Linear::new(store, &format!("{name}.in2"), channels, hidden, true, rng),
            dw2: DwConv2d::new(store, &format!("{name}.dw2"), hidden, 3, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, channels, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>) -> Var {
        let n = self.modulation.forward(g, x, z);
        let p1 = self.in1.forward(g, n);
        let p1 = self.dw1.forward(g, p1);
        let p2 = self.in2.forward(g, n);
        let p2 = self.dw2.forward(g, p2);
        let a = g.gelu(p1);
        let gated = g.mul(a, p2);
        let y = self.out.forward(g, gated);
        g.add(x, y)
    }
}
