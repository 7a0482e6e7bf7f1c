use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::params::{ParamId, ParamStore};
use crate::Real;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward rule gets to look at.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a ArrayD<T>>,
    pub output: &'a ArrayD<T>,
    /// `needs_grad[i]` is false when input `i` does not lead to anything
    /// trainable; rules may return `None` for it.
    pub needs_grad: Vec<bool>,
}

/// The local derivative of one recorded operation.
pub trait Backward<T: Real> {
    /// Maps the gradient of the output to gradients of each input (same order as
    /// the inputs the node was recorded with).
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &ArrayD<T>) -> Vec<Option<ArrayD<T>>>;
}

struct Node<T: Real> {
    value: ArrayD<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

type Trainable<'s> = Box<dyn Fn(&str) -> bool + 's>;

/// A single forward pass recorded for differentiation.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    trainable: Trainable<'s>,
    grad_enabled: bool,
    macs: u64,
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph where every parameter of `store` is trainable.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// A graph where only parameters whose name satisfies `trainable` receive
    /// gradients. Frozen parameters act as constants.
    pub fn with_trainable(store: &'s ParamStore<T>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            trainable: Box::new(trainable),
            grad_enabled: true,
            macs: 0,
        }
    }

    /// A graph without any parameter store (pure functions of inputs).
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            trainable: Box::new(|_| true),
            grad_enabled: true,
            macs: 0,
        }
    }

    /// A graph that records no backward information at all; for inference.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store.expect("graph has no parameter store")
    }

    /// Multiply-accumulate operations executed by matrix-style ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// An input whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, true, None)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// The node for a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store();
        let trainable = (self.trainable)(store.name(id));
        let value = store.get(id).clone();
        let v = self.leaf(value, trainable, Some(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 0-d (or single element) node.
    pub fn item(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "item() on a tensor with {} elements", a.len());
        a.iter().copied().next().unwrap()
    }

    /// Records the result of an operation. This is also the extension point for
    /// operations defined outside this crate.
    pub fn record(&mut self, value: ArrayD<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Var {
        debug_assert!(value.is_standard_layout());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        let mut params = HashMap::new();
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                if let (Some(id), Some(g)) = (node.param, grads[i].as_ref()) {
                    params.insert(id, g.clone());
                }
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs_grad: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = op.backward(&ctx, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape());
                match &mut grads[inp.0] {
                    Some(acc) => *acc += &ig,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Grads { nodes: grads, params }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<ArrayD<T>>>,
    params: HashMap<ParamId, ArrayD<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a parameter, `None` when it did not influence the loss or was
    /// frozen.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::variable`] or a trainable
    /// parameter node.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}
