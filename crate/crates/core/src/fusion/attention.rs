//! Pre-norm transformer block used by every attention-based head.
//!
//! ```text
//! h  = LN1(x) (+ P)            positions enter the attention branch only
//! x1 = x + Wo · MHA(h, h, h)
//! y  = x1 + W2 · relu(W1 · LN2(x1))
//! ```
//!
//! `Wo` and `W2` start at zero, so a fresh block maps `x` to itself exactly.

use super::params::{Init, Linear, Norm};
use crate::autodiff::{Element, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new(init: &mut Init, name: &str, dim: usize, mult: usize) -> Self {
        Self {
            norm: Norm::new(init, &format!("{name}.ln2"), dim),
            up: Linear::new(init, &format!("{name}.ffn.up"), dim, dim * mult),
            down: Linear::zeros(init, &format!("{name}.ffn.down"), dim * mult, dim),
        }
    }

    /// `x + down(relu(up(LN(x))))`
    fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        let h = self.norm.forward(p, x)?;
        let h = self.up.forward(p, h)?.relu()?;
        x.add(&self.down.forward(p, h)?)
    }
}

/// Learned per-frame position table `[max_frames, D]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Positions {
    pub table: usize,
    pub max_frames: usize,
}

impl Positions {
    fn new(init: &mut Init, name: &str, max_frames: usize, dim: usize) -> Self {
        Self {
            table: init.normal(format!("{name}.positions"), vec![max_frames, dim], 1.0, false),
            max_frames,
        }
    }

    /// Position rows for a sequence of `frames · per_frame` tokens, frame-major.
    fn expand<'g, E: Element>(
        &self,
        p: &[Var<'g, E>],
        frames: usize,
        per_frame: usize,
    ) -> Result<Var<'g, E>> {
        if frames > self.max_frames {
            return Err(Error::shape(
                "positions",
                format!("{frames} frames exceed max_frames {}", self.max_frames),
            ));
        }
        let table = p[self.table];
        if per_frame == 1 && frames == self.max_frames {
            return Ok(table);
        }
        let rows = frames * per_frame;
        let select = Tensor::from_fn(vec![rows, self.max_frames], |i| {
            let (row, col) = (i / self.max_frames, i % self.max_frames);
            if row / per_frame == col {
                E::one()
            } else {
                E::zero()
            }
        });
        table.graph().constant(select).matmul(&table)
    }
}

/// Splits `[L, D]` into `[H, L, D/H]`.
fn split_heads<'g, E: Element>(x: Var<'g, E>, heads: usize) -> Result<Var<'g, E>> {
    let shape = x.shape();
    let (len, dim) = (shape[0], shape[1]);
    x.reshape([len, heads, dim / heads])?.permute(&[1, 0, 2])
}

fn merge_heads<'g, E: Element>(x: Var<'g, E>) -> Result<Var<'g, E>> {
    let shape = x.shape();
    let (heads, len, dh) = (shape[0], shape[1], shape[2]);
    x.permute(&[1, 0, 2])?.reshape([len, heads * dh])
}

/// Scaled dot-product attention per head. Returns the merged values `[Lq, D]`
/// and the attention weights `[H, Lq, Lk]`.
fn attend<'g, E: Element>(
    q: Var<'g, E>,
    k: Var<'g, E>,
    v: Var<'g, E>,
    heads: usize,
) -> Result<(Var<'g, E>, Var<'g, E>)> {
    let dh = q.shape()[1] / heads;
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let scale = E::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let weights = q.matmul_t(&k)?.scale(scale)?.softmax(2)?;
    Ok((merge_heads(weights.matmul(&v)?)?, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Projections {
    fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.attn.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.attn.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.attn.v"), dim, dim),
            out: Linear::zeros(init, &format!("{name}.attn.out"), dim, dim),
        }
    }
}

/// Self-attention block over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SelfAttention {
    pub norm: Norm,
    pub proj: Projections,
    pub ffn: FeedForward,
    pub positions: Option<Positions>,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        max_frames: Option<usize>,
    ) -> Self {
        Self {
            norm: Norm::new(init, &format!("{name}.ln1"), dim),
            proj: Projections::new(init, name, dim),
            ffn: FeedForward::new(init, name, dim, ffn_mult),
            positions: max_frames.map(|t| Positions::new(init, name, t, dim)),
            heads,
        }
    }

    /// `x: [frames · per_frame, D]`, frame-major. Returns the block output and attention weights.
    pub fn forward<'g, E: Element>(
        &self,
        p: &[Var<'g, E>],
        x: Var<'g, E>,
        per_frame: usize,
    ) -> Result<(Var<'g, E>, Var<'g, E>)> {
        let mut h = self.norm.forward(p, x)?;
        if let Some(pos) = &self.positions {
            h = h.add(&pos.expand(p, x.shape()[0] / per_frame, per_frame)?)?;
        }
        let (q, k, v) = (
            self.proj.q.forward(p, h)?,
            self.proj.k.forward(p, h)?,
            self.proj.v.forward(p, h)?,
        );
        let (mixed, weights) = attend(q, k, v, self.heads)?;
        let x1 = x.add(&self.proj.out.forward(p, mixed)?)?;
        Ok((self.ffn.forward(p, x1)?, weights))
    }
}

/// Attentive pooling: one learned query attends over all tokens.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CrossAttention {
    pub query: usize,
    pub norm: Norm,
    pub proj: Projections,
    pub ffn: FeedForward,
    pub positions: Option<Positions>,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        max_frames: Option<usize>,
    ) -> Self {
        Self {
            query: init.normal(format!("{name}.query"), vec![1, dim], 0.02, true),
            norm: Norm::new(init, &format!("{name}.ln1"), dim),
            proj: Projections::new(init, name, dim),
            ffn: FeedForward::new(init, name, dim, ffn_mult),
            positions: max_frames.map(|t| Positions::new(init, name, t, dim)),
            heads,
        }
    }

    /// Returns the pooled vector `[1, D]` and attention weights `[H, 1, L]`.
    pub fn forward<'g, E: Element>(
        &self,
        p: &[Var<'g, E>],
        x: Var<'g, E>,
        per_frame: usize,
    ) -> Result<(Var<'g, E>, Var<'g, E>)> {
        let mut h = self.norm.forward(p, x)?;
        if let Some(pos) = &self.positions {
            h = h.add(&pos.expand(p, x.shape()[0] / per_frame, per_frame)?)?;
        }
        let query = p[self.query];
        let q = self.proj.q.forward(p, query)?;
        let (k, v) = (self.proj.k.forward(p, h)?, self.proj.v.forward(p, h)?);
        let (mixed, weights) = attend(q, k, v, self.heads)?;
        let x1 = query.add(&self.proj.out.forward(p, mixed)?)?;
        Ok((self.ffn.forward(p, x1)?, weights))
    }
}
