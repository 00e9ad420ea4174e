//! Named parameter storage and initialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted path, e.g. `backbone.stage2.conv1.w`.
///
/// Values are reference counted so a tape can borrow them as leaves without
/// copying; updates go through [`ParamStore::get_mut`] which clones on write.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.get(name)
    }

    pub fn expect(&self, name: &str) -> &Arc<Tensor> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Overwrite a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { gain: f64 },
    Zeros,
    Constant(f64),
}

impl Init {
    pub fn he() -> Self {
        Init::FanIn {
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn sample(&self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::FanIn { gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
        }
    }
}
