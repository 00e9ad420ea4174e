//! Parameterized layer descriptors. A layer only knows its parameter names
//! and geometry; values live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{ConvGeometry, Tape, Var};
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, geom: ConvGeometry, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            geom,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) {
        let k = self.geom.kernel;
        let fan_in = self.in_ch * k * k;
        store.insert(self.weight_name(), init.sample(&[self.out_ch, self.in_ch, k, k], fan_in, rng));
        if self.bias {
            store.insert(self.bias_name(), crate::Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, &self.weight_name());
        let b = self.bias.then(|| tape.param(store, &self.bias_name()));
        x.conv2d(w, b, self.geom)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.geom.kernel * self.geom.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

/// Fully connected layer on a `[1, in]` row vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) {
        store.insert(format!("{}.w", self.name), init.sample(&[self.in_dim, self.out_dim], self.in_dim, rng));
        store.insert(format!("{}.b", self.name), crate::Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, &format!("{}.w", self.name));
        let b = tape.param(store, &format!("{}.b", self.name));
        x.reshape(&[1, self.in_dim]).matmul(w).add_row_bias(b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}
