use super::params::Init;
use crate::autodiff::{Element, Tensor, Var};
use crate::error::Result;

/// Single-layer LSTM, gate order `i, f, g, o`; returns `h_T`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Lstm {
    /// `[D, 4H]`
    pub w_ih: usize,
    /// `[H, 4H]`
    pub w_hh: usize,
    /// `[4H]`
    pub bias: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        Self {
            w_ih: init.uniform(format!("{name}.w_ih"), vec![input, 4 * hidden], bound, true),
            w_hh: init.uniform(format!("{name}.w_hh"), vec![hidden, 4 * hidden], bound, true),
            bias: init.constant(format!("{name}.bias"), vec![4 * hidden], 0.0, false),
            hidden,
        }
    }

    /// `x: [T, D]` to `h_T: [1, H]`.
    pub fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        let g = x.graph();
        let hd = self.hidden;
        let steps = x.shape()[0];
        let input_gates = x.matmul(&p[self.w_ih])?.add(&p[self.bias])?;
        let mut h = g.constant(Tensor::zeros(vec![1, hd]));
        let mut c = g.constant(Tensor::zeros(vec![1, hd]));
        for t in 0..steps {
            let gates = input_gates.narrow(0, t, 1)?.add(&h.matmul(&p[self.w_hh])?)?;
            let i = gates.narrow(1, 0, hd)?.sigmoid()?;
            let f = gates.narrow(1, hd, hd)?.sigmoid()?;
            let cell = gates.narrow(1, 2 * hd, hd)?.tanh()?;
            let o = gates.narrow(1, 3 * hd, hd)?.sigmoid()?;
            c = f.mul(&c)?.add(&i.mul(&cell)?)?;
            h = o.mul(&c.tanh()?)?;
        }
        Ok(h)
    }
}
