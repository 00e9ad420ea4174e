//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to [`Var`]s. Each recorded node keeps
//! its forward value and, when any input requires a gradient, a closure that
//! maps the output gradient to input gradients. [`Tape::backward`] replays the
//! closures in reverse creation order.
//!
//! All tensors here are single images (`C×H×W`); batching is done by the
//! caller by accumulating per-sample gradients.

mod basic;
mod conv;
mod sample;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use basic::{sigmoid, sum_all, SoftmaxAxis};
pub use conv::ConvGeometry;
pub use sample::{RoiBox, SampleMode};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

type ParamFilter = Box<dyn Fn(&str) -> bool>;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    record: bool,
    trainable: Option<ParamFilter>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape: parameters and leaves require gradients.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
            trainable: None,
        }
    }

    /// A tape that only evaluates forward values.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Recording tape where only parameters accepted by `filter` get gradients.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            trainable: Some(Box::new(filter)),
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.record,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false)
    }

    /// A leaf that requires a gradient (on a recording tape).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Bind a named parameter. Repeated calls return the same node.
    pub fn param<'t>(&'t self, store: &ParamStore, name: &str) -> Var<'t> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let trainable = self.trainable.as_ref().map_or(true, |f| f(name));
        let var = self.push_leaf(Arc::clone(store.expect(name)), trainable);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    pub(crate) fn push<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value with no gradient link back to this node.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_leaf(self.value(), false)
    }
}

/// Result of [`Tape::backward`]. Only leaves keep their gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    /// Gradients of every bound parameter that received one.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in self.params {
            if let Some(g) = self.grads[id].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

pub mod gradcheck {
    //! Central finite differences against the tape's reverse pass.
    //!
    //! Errors are `|a − n| / max(|a|, |n|, FLOOR)`, taken at randomly chosen
    //! coordinates (fixed seed) of each input.

    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub const FLOOR: f64 = 1e-4;

    fn coordinates(n: usize, coords: usize, salt: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ salt);
        if coords >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords).into_vec()
        }
    }

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
    }

    /// Max relative error over `coords` coordinates of each input. `f` builds
    /// a scalar from leaves.
    pub fn check<F>(inputs: &[Tensor], coords: usize, h: f64, f: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for i in coordinates(input.len(), coords, k as u64) {
                let eval = |delta: f64| {
                    let tape = Tape::inference();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            tape.constant(t)
                        })
                        .collect();
                    f(&tape, &vars).value().item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel(analytic.data()[i], numeric));
            }
        }
        worst
    }

    /// Same check for named parameters bound through [`Tape::param`].
    pub fn check_params<F>(store: &ParamStore, names: &[&str], coords: usize, h: f64, f: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
    {
        let tape = Tape::new();
        let out = f(&tape, store);
        let grads = tape.backward(out);
        let mut worst: f64 = 0.0;
        for (k, name) in names.iter().enumerate() {
            let value = store.expect(name);
            let analytic = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
            for i in coordinates(value.len(), coords, k as u64) {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(name).expect("param").data_mut()[i] += delta;
                    let tape = Tape::inference();
                    f(&tape, &s).value().item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel(analytic.data()[i], numeric));
            }
        }
        worst
    }

    #[derive(Clone, Copy, Debug, Default, PartialEq)]
    pub struct PiecewiseCheck {
        pub worst: f64,
        pub checked: usize,
        /// Coordinates whose one-sided differences disagree: a ReLU or
        /// bilinear cell boundary lies inside the stencil.
        pub kinks: usize,
    }

    /// [`check_params`] for piecewise-smooth functions. A coordinate is only
    /// compared when forward and backward differences agree to `kink_tol`.
    pub fn check_params_piecewise<F>(store: &ParamStore, names: &[&str], coords: usize, h: f64, kink_tol: f64, f: F) -> PiecewiseCheck
    where
        F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
    {
        let tape = Tape::new();
        let out = f(&tape, store);
        let f0 = out.value().item();
        let grads = tape.backward(out);
        let mut res = PiecewiseCheck::default();
        for (k, name) in names.iter().enumerate() {
            let value = store.expect(name);
            let analytic = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
            for i in coordinates(value.len(), coords, k as u64) {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(name).expect("param").data_mut()[i] += delta;
                    let tape = Tape::inference();
                    f(&tape, &s).value().item()
                };
                let (up, down) = (eval(h), eval(-h));
                if rel((up - f0) / h, (f0 - down) / h) > kink_tol {
                    res.kinks += 1;
                    continue;
                }
                res.checked += 1;
                res.worst = res.worst.max(rel(analytic.data()[i], (up - down) / (2.0 * h)));
            }
        }
        res
    }
}
