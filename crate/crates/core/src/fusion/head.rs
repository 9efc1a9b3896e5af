use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{CrossAttention, SelfAttention};
use super::config::{FusionHeadConfig, FusionKind, Pool, TokenReduce};
use super::lstm::Lstm;
use super::params::{Init, ParamSet};
use super::tcn::Tcn;
use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One vector per frame: the CLS token when present, otherwise the mean over the frame's tokens.
///
/// `tokens: [T, N, D]` to `[T, D]`.
pub fn frame_descriptors<'g, E: Element>(tokens: Var<'g, E>, cls: Option<usize>) -> Result<Var<'g, E>> {
    let shape = tokens.shape();
    if shape.len() != 3 {
        return Err(Error::shape("frame_descriptors", format!("expected [T, N, D], got {shape:?}")));
    }
    match cls {
        Some(c) => tokens.narrow(1, c, 1)?.reshape([shape[0], shape[2]]),
        None => tokens.mean(1),
    }
}

fn pool<'g, E: Element>(x: Var<'g, E>, pool: Pool) -> Result<Var<'g, E>> {
    match pool {
        Pool::Avg => x.mean(0),
        Pool::Max => x.max(0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layout {
    Pool,
    SelfAttention(SelfAttention),
    Weighted(SelfAttention),
    Cross(CrossAttention),
    Lstm(Lstm),
    Tcn(Tcn),
}

/// Output of a fusion forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Fused<'g, E: Element> {
    /// `[D_fused]`
    pub feature: Var<'g, E>,
    /// `[H, Lq, Lk]` for attention kinds.
    pub attention: Option<Var<'g, E>>,
}

/// A temporal fusion head. Its parameters live in a [`ParamSet`] owned by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub config: FusionHeadConfig,
    pub(crate) layout: Layout,
}

impl FusionHead {
    /// Registers the head's parameters in `params`, drawing initial values from `rng`.
    pub fn build(config: &FusionHeadConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng, params };
        let d = config.model_dim;
        let positions = config.use_positions.then_some(config.max_frames);
        let (heads, mult) = (config.num_heads, config.ffn_mult);
        let layout = match config.kind {
            FusionKind::AvgPool | FusionKind::MaxPool | FusionKind::AvgPoolRelu | FusionKind::MaxPoolRelu => {
                Layout::Pool
            }
            FusionKind::SelfAttnAllAvg
            | FusionKind::SelfAttnAllMax
            | FusionKind::SelfAttnClsAvg
            | FusionKind::SelfAttnClsMax => {
                Layout::SelfAttention(SelfAttention::new(&mut init, "fusion", d, heads, mult, positions))
            }
            FusionKind::WeightedSelfAttn => {
                Layout::Weighted(SelfAttention::new(&mut init, "fusion", d, heads, mult, positions))
            }
            FusionKind::CrossAttnAll | FusionKind::CrossAttnCls => {
                Layout::Cross(CrossAttention::new(&mut init, "fusion", d, heads, mult, positions))
            }
            FusionKind::Lstm => Layout::Lstm(Lstm::new(&mut init, "fusion.lstm", d, config.hidden())),
            FusionKind::Tcn => Layout::Tcn(Tcn::new(
                &mut init,
                "fusion.tcn",
                d,
                config.hidden(),
                config.tcn_levels,
                config.tcn_kernel,
            )),
        };
        Ok(Self {
            config: config.clone(),
            layout,
        })
    }

    /// Fresh head with its own parameter set, seeded from `config.seed`.
    pub fn new(config: &FusionHeadConfig) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head = Self::build(config, &mut params, &mut rng)?;
        Ok((head, params))
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Fuses `tokens: [T, N, D]` into one feature vector.
    pub fn forward<'g, E: Element>(
        &self,
        p: &[Var<'g, E>],
        tokens: Var<'g, E>,
        cls: Option<usize>,
    ) -> Result<Fused<'g, E>> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.config.model_dim {
            return Err(Error::shape(
                "fuse",
                format!("expected [T, N, {}], got {shape:?}", self.config.model_dim),
            ));
        }
        let (frames, per_frame, dim) = (shape[0], shape[1], shape[2]);
        if frames == 0 {
            return Err(Error::shape("fuse", "clip has no frames"));
        }
        let kind = self.config.kind;
        let plain = |feature| Fused {
            feature,
            attention: None,
        };
        match &self.layout {
            Layout::Pool => {
                let pool_kind = kind.pool().expect("pool kinds have a pool");
                Ok(plain(pool(frame_descriptors(tokens, cls)?, pool_kind)?))
            }
            Layout::SelfAttention(block) => {
                let pool_kind = kind.pool().expect("self-attention kinds have a pool");
                let all = matches!(kind, FusionKind::SelfAttnAllAvg | FusionKind::SelfAttnAllMax);
                let (out, weights) = if all {
                    let (y, w) = block.forward(p, tokens.reshape([frames * per_frame, dim])?, per_frame)?;
                    let y = match self.config.token_reduce {
                        TokenReduce::FrameDescriptor => {
                            frame_descriptors(y.reshape([frames, per_frame, dim])?, cls)?
                        }
                        TokenReduce::AllTokens => y,
                    };
                    (y, w)
                } else {
                    block.forward(p, frame_descriptors(tokens, cls)?, 1)?
                };
                Ok(Fused {
                    feature: pool(out, pool_kind)?,
                    attention: Some(weights),
                })
            }
            Layout::Weighted(block) => {
                let (y, weights) = block.forward(p, frame_descriptors(tokens, cls)?, 1)?;
                // attention received by each token, averaged over heads and queries
                let importance = weights.mean(0)?.mean(0)?.reshape([1, frames])?;
                Ok(Fused {
                    feature: importance.matmul(&y)?.reshape([dim])?,
                    attention: Some(weights),
                })
            }
            Layout::Cross(block) => {
                let (x, per) = match kind {
                    FusionKind::CrossAttnAll => (tokens.reshape([frames * per_frame, dim])?, per_frame),
                    _ => (frame_descriptors(tokens, cls)?, 1),
                };
                let (y, weights) = block.forward(p, x, per)?;
                Ok(Fused {
                    feature: y.reshape([dim])?,
                    attention: Some(weights),
                })
            }
            Layout::Lstm(lstm) => {
                let h = lstm.forward(p, frame_descriptors(tokens, cls)?)?;
                Ok(plain(h.reshape([lstm.hidden])?))
            }
            Layout::Tcn(tcn) => {
                let h = tcn.forward(p, frame_descriptors(tokens, cls)?)?;
                Ok(plain(h.reshape([self.config.hidden()])?))
            }
        }
    }

    /// Evaluates the head on one clip without recording gradients.
    pub fn fuse(&self, params: &ParamSet, tokens: &Tensor<f32>, cls: Option<usize>) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::new();
        let p = params.bind(&g, false);
        let x = g.constant(tokens.clone());
        Ok(self.forward(&p, x, cls)?.feature.value())
    }
}
