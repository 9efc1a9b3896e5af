use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The thirteen temporal fusion mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    AvgPool,
    MaxPool,
    AvgPoolRelu,
    MaxPoolRelu,
    SelfAttnAllAvg,
    SelfAttnAllMax,
    SelfAttnClsAvg,
    SelfAttnClsMax,
    WeightedSelfAttn,
    CrossAttnAll,
    CrossAttnCls,
    Lstm,
    Tcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Avg,
    Max,
}

impl FusionKind {
    pub const ALL: [FusionKind; 13] = [
        FusionKind::AvgPool,
        FusionKind::MaxPool,
        FusionKind::AvgPoolRelu,
        FusionKind::MaxPoolRelu,
        FusionKind::SelfAttnAllAvg,
        FusionKind::SelfAttnAllMax,
        FusionKind::SelfAttnClsAvg,
        FusionKind::SelfAttnClsMax,
        FusionKind::WeightedSelfAttn,
        FusionKind::CrossAttnAll,
        FusionKind::CrossAttnCls,
        FusionKind::Lstm,
        FusionKind::Tcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::AvgPool => "avg_pool",
            FusionKind::MaxPool => "max_pool",
            FusionKind::AvgPoolRelu => "avg_pool_relu",
            FusionKind::MaxPoolRelu => "max_pool_relu",
            FusionKind::SelfAttnAllAvg => "self_attn_all_avg",
            FusionKind::SelfAttnAllMax => "self_attn_all_max",
            FusionKind::SelfAttnClsAvg => "self_attn_cls_avg",
            FusionKind::SelfAttnClsMax => "self_attn_cls_max",
            FusionKind::WeightedSelfAttn => "weighted_self_attn",
            FusionKind::CrossAttnAll => "cross_attn_all",
            FusionKind::CrossAttnCls => "cross_attn_cls",
            FusionKind::Lstm => "lstm",
            FusionKind::Tcn => "tcn",
        }
    }

    /// The `*_relu` kinds share their fusion with the plain pools and add a hidden ReLU layer to the probe.
    pub fn probe_relu(self) -> bool {
        matches!(self, FusionKind::AvgPoolRelu | FusionKind::MaxPoolRelu)
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            FusionKind::SelfAttnAllAvg
                | FusionKind::SelfAttnAllMax
                | FusionKind::SelfAttnClsAvg
                | FusionKind::SelfAttnClsMax
                | FusionKind::WeightedSelfAttn
                | FusionKind::CrossAttnAll
                | FusionKind::CrossAttnCls
        )
    }

    /// Frame-order aware kinds; everything else is permutation invariant without positions.
    pub fn is_sequential(self) -> bool {
        matches!(self, FusionKind::Lstm | FusionKind::Tcn)
    }

    pub fn pool(self) -> Option<Pool> {
        match self {
            FusionKind::AvgPool
            | FusionKind::AvgPoolRelu
            | FusionKind::SelfAttnAllAvg
            | FusionKind::SelfAttnClsAvg => Some(Pool::Avg),
            FusionKind::MaxPool
            | FusionKind::MaxPoolRelu
            | FusionKind::SelfAttnAllMax
            | FusionKind::SelfAttnClsMax => Some(Pool::Max),
            _ => None,
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = FusionKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown head `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// How self-attention over all tokens reduces its `T·N` outputs before pooling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduce {
    /// Collapse each frame to its descriptor (CLS output, else token mean), then pool over frames.
    #[default]
    FrameDescriptor,
    /// Pool directly over all `T·N` token outputs.
    AllTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionHeadConfig {
    pub kind: FusionKind,
    pub num_heads: usize,
    pub model_dim: usize,
    /// LSTM / TCN width; `0` means "same as `model_dim`".
    pub hidden_dim: usize,
    pub tcn_levels: usize,
    pub tcn_kernel: usize,
    pub use_positions: bool,
    pub token_reduce: TokenReduce,
    pub ffn_mult: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for FusionHeadConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::AvgPool,
            num_heads: 8,
            model_dim: 0,
            hidden_dim: 0,
            tcn_levels: 3,
            tcn_kernel: 3,
            use_positions: true,
            token_reduce: TokenReduce::FrameDescriptor,
            ffn_mult: 4,
            max_frames: 16,
            seed: 0,
        }
    }
}

impl FusionHeadConfig {
    pub fn new(kind: FusionKind, model_dim: usize) -> Self {
        Self {
            kind,
            model_dim,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        if self.hidden_dim == 0 {
            self.model_dim
        } else {
            self.hidden_dim
        }
    }

    /// Width of the fused feature handed to the probe.
    pub fn output_dim(&self) -> usize {
        if self.kind.is_sequential() {
            self.hidden()
        } else {
            self.model_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 {
            return Err(Error::Config("model_dim must be positive".into()));
        }
        if self.kind.uses_attention() {
            if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "model_dim {} is not divisible by num_heads {}",
                    self.model_dim, self.num_heads
                )));
            }
            if self.ffn_mult == 0 {
                return Err(Error::Config("ffn_mult must be positive".into()));
            }
            if self.use_positions && self.max_frames == 0 {
                return Err(Error::Config("max_frames must be positive".into()));
            }
        }
        if self.kind == FusionKind::Tcn && (self.tcn_levels == 0 || self.tcn_kernel == 0) {
            return Err(Error::Config("tcn_levels and tcn_kernel must be positive".into()));
        }
        Ok(())
    }
}
