use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Flat, ordered parameter storage. Layers refer to entries by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `graph`, as trainable leaves or as constants.
    pub fn bind<'g, E: Element>(&self, graph: &'g Graph<E>, trainable: bool) -> Vec<Var<'g, E>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.value.cast::<E>();
                if trainable {
                    graph.param(t)
                } else {
                    graph.constant(t)
                }
            })
            .collect()
    }

    /// Replaces values with same-shaped tensors, e.g. restored from a checkpoint.
    pub fn assign(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Seeded parameter initializers.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub params: &'a mut ParamSet,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f32, decay: bool) -> usize {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.params.push(name, t, decay)
    }

    pub fn normal(&mut self, name: String, shape: Vec<usize>, std: f32, decay: bool) -> usize {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.params.push(name, t, decay)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f32, decay: bool) -> usize {
        self.params.push(name, Tensor::full(shape, value), decay)
    }
}

/// Affine map `x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        Self {
            w: init.uniform(format!("{name}.weight"), vec![output, input], bound, true),
            b: init.constant(format!("{name}.bias"), vec![output], 0.0, false),
        }
    }

    pub fn zeros(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: init.constant(format!("{name}.weight"), vec![output, input], 0.0, true),
            b: init.constant(format!("{name}.bias"), vec![output], 0.0, false),
        }
    }

    /// `x: [L, in]` to `[L, out]`.
    pub fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        x.matmul_t(&p[self.w])?.add(&p[self.b])
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Norm {
    pub gain: usize,
    pub shift: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gain: init.constant(format!("{name}.gain"), vec![dim], 1.0, false),
            shift: init.constant(format!("{name}.shift"), vec![dim], 0.0, false),
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        x.layer_norm(E::from_f64_lossy(NORM_EPS))?
            .mul(&p[self.gain])?
            .add(&p[self.shift])
    }
}
