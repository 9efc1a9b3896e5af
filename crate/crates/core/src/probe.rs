//! Linear probe on top of a fused feature, optionally with one hidden ReLU layer.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, Var};
use crate::error::{Error, Result};
use crate::fusion::{Init, Linear, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub(crate) hidden: Option<Linear>,
    pub(crate) out: Linear,
    pub input_dim: usize,
    pub classes: usize,
}

impl Probe {
    pub fn build(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        classes: usize,
        relu_variant: bool,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 {
            return Err(Error::Config("probe needs a positive input dim and class count".into()));
        }
        let mut init = Init { rng, params };
        Ok(Self {
            hidden: relu_variant.then(|| Linear::new(&mut init, "probe.hidden", input_dim, input_dim)),
            out: Linear::new(&mut init, "probe.out", input_dim, classes),
            input_dim,
            classes,
        })
    }

    pub fn relu_variant(&self) -> bool {
        self.hidden.is_some()
    }

    /// `feature: [D]` to logits `[C]`.
    pub fn logits<'g, E: Element>(&self, p: &[Var<'g, E>], feature: Var<'g, E>) -> Result<Var<'g, E>> {
        let shape = feature.shape();
        if shape != [self.input_dim] {
            return Err(Error::shape(
                "probe",
                format!("feature is {shape:?}, probe expects [{}]", self.input_dim),
            ));
        }
        let mut x = feature.reshape([1, self.input_dim])?;
        if let Some(hidden) = &self.hidden {
            x = hidden.forward(p, x)?.relu()?;
        }
        self.out.forward(p, x)?.reshape([self.classes])
    }
}
