//! A fusion head and its probe, sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{frame_descriptors, FusionHead, FusionHeadConfig, ParamSet};
use crate::probe::Probe;
use crate::store::{ClipSampling, TokenClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: FusionHeadConfig,
    pub classes: usize,
    /// Inputs are already clip embeddings; the fusion head is skipped.
    #[serde(default)]
    pub clip_level: bool,
    /// Clip length and evaluation clip count the model was trained for.
    #[serde(default)]
    pub sampling: ClipSampling,
}

impl ModelConfig {
    pub fn new(head: FusionHeadConfig, classes: usize) -> Self {
        Self {
            head,
            classes,
            clip_level: false,
            sampling: ClipSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head: FusionHead,
    pub probe: Probe,
    pub params: ParamSet,
}

/// Feature and logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'g, E: Element> {
    pub feature: Var<'g, E>,
    pub logits: Var<'g, E>,
    pub attention: Option<Var<'g, E>>,
}

impl Model {
    /// Initializes every parameter from `config.head.seed`; head first, then probe.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.head.seed);
        let head = FusionHead::build(&config.head, &mut params, &mut rng)?;
        let input_dim = if config.clip_level {
            config.head.model_dim
        } else {
            head.output_dim()
        };
        let probe = Probe::build(
            &mut params,
            &mut rng,
            input_dim,
            config.classes,
            config.head.kind.probe_relu(),
        )?;
        Ok(Self {
            config,
            head,
            probe,
            params,
        })
    }

    pub fn forward<'g, E: Element>(
        &self,
        p: &[Var<'g, E>],
        tokens: Var<'g, E>,
        cls: Option<usize>,
    ) -> Result<Forward<'g, E>> {
        let (feature, attention) = if self.config.clip_level {
            let shape = tokens.shape();
            if shape.first() != Some(&1) {
                return Err(Error::shape(
                    "fuse",
                    format!("clip-level input must hold exactly one entry, got {shape:?}"),
                ));
            }
            let d = shape[2];
            (frame_descriptors(tokens, cls)?.reshape([d])?, None)
        } else {
            let fused = self.head.forward(p, tokens, cls)?;
            (fused.feature, fused.attention)
        };
        Ok(Forward {
            feature,
            logits: self.probe.logits(p, feature)?,
            attention,
        })
    }

    /// Fused feature and logits of one clip, without gradients.
    pub fn infer(&self, clip: &TokenClip) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(clip.tokens.clone()), clip.cls_index)?;
        Ok((out.feature.value(), out.logits.value()))
    }

    pub fn logits(&self, clip: &TokenClip) -> Result<Tensor<f32>> {
        Ok(self.infer(clip)?.1)
    }
}
