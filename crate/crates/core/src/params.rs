//! Named parameter tensors and their binding into a graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Named, shaped parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a leaf. Trainable leaves receive
    /// gradients; frozen ones are constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters of one [`ParamStore`] as graph leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs parameter names with existing graph leaves.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients per parameter name; parameters the loss does not
    /// reach get zeros of their own shape.
    pub fn gradients<T: Real>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, var) in &self.vars {
            let grad = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
            out.insert(name.clone(), grad);
        }
        out
    }
}

/// Adds a He-initialised `cout x cin x k x k` kernel as `{name}.w`, and a
/// zero bias `{name}.b` when `bias` is set.
pub fn init_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

/// Multiplies `{name}.w` by `gain` and fills `{name}.b` (if any) with `bias`.
pub fn rescale_conv<T: Real>(store: &mut ParamStore<T>, name: &str, gain: f64, bias: f64) {
    if let Some(w) = store.get_mut(&format!("{name}.w")) {
        *w = w.map(|v| v * T::lit(gain));
    }
    if let Some(b) = store.get_mut(&format!("{name}.b")) {
        *b = Tensor::full(b.shape(), T::lit(bias));
    }
}

/// Applies the convolution registered under `name` (bias used if present).
pub fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.try_var(&format!("{name}.b"));
    g.conv2d(x, w, b, geom)
}
