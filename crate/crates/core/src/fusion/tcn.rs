use super::params::{Init, Linear};
use crate::autodiff::{Element, Var};
use crate::error::Result;

/// Dilated causal convolution: `y[t] = b + Σ_j W_j x[t - j·dilation]`, zero before the start.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CausalConv {
    /// One `[out, in]` matrix per tap; tap `j` looks `j · dilation` steps back.
    pub taps: Vec<usize>,
    pub bias: usize,
    pub dilation: usize,
}

impl CausalConv {
    fn new(init: &mut Init, name: &str, input: usize, output: usize, kernel: usize, dilation: usize) -> Self {
        let bound = 1.0 / ((input * kernel) as f32).sqrt();
        Self {
            taps: (0..kernel)
                .map(|j| init.uniform(format!("{name}.tap{j}"), vec![output, input], bound, true))
                .collect(),
            bias: init.constant(format!("{name}.bias"), vec![output], 0.0, false),
            dilation,
        }
    }

    fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        let steps = x.shape()[0];
        let mut acc = x.matmul_t(&p[self.taps[0]])?;
        for (j, &w) in self.taps.iter().enumerate().skip(1) {
            let lag = j * self.dilation;
            if lag >= steps {
                break;
            }
            acc = acc.add(&x.delay(lag)?.matmul_t(&p[w])?)?;
        }
        acc.add(&p[self.bias])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TcnBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    /// 1×1 projection on the residual path.
    pub skip: Option<Linear>,
}

/// Stack of residual blocks with dilations `1, 2, 4, …`; the output is the last time step.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tcn {
    pub blocks: Vec<TcnBlock>,
}

impl Tcn {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize, levels: usize, kernel: usize) -> Self {
        let blocks = (0..levels)
            .map(|level| {
                let dilation = 1 << level;
                let width_in = if level == 0 { input } else { hidden };
                let prefix = format!("{name}.level{level}");
                TcnBlock {
                    conv1: CausalConv::new(init, &format!("{prefix}.conv1"), width_in, hidden, kernel, dilation),
                    conv2: CausalConv::new(init, &format!("{prefix}.conv2"), hidden, hidden, kernel, dilation),
                    skip: (level == 0).then(|| Linear::new(init, &format!("{prefix}.skip"), width_in, hidden)),
                }
            })
            .collect();
        Self { blocks }
    }

    /// `x: [T, D]` to `[1, H]`.
    pub fn forward<'g, E: Element>(&self, p: &[Var<'g, E>], x: Var<'g, E>) -> Result<Var<'g, E>> {
        let mut h = x;
        for block in &self.blocks {
            let z = block.conv1.forward(p, h)?.relu()?;
            let z = block.conv2.forward(p, z)?.relu()?;
            let residual = match &block.skip {
                Some(skip) => skip.forward(p, h)?,
                None => h,
            };
            h = residual.add(&z)?;
        }
        h.narrow(0, h.shape()[0] - 1, 1)
    }
}

/// Frames that can influence the last output of `levels` blocks with kernel size `kernel`.
pub fn receptive_field(levels: usize, kernel: usize) -> usize {
    1 + 2 * (kernel - 1) * ((1 << levels) - 1)
}
