//! Finite-difference checks of every head composed with the probe and cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::error::Result;
use crate::fusion::{FusionHeadConfig, FusionKind};
use crate::model::{Model, ModelConfig};

/// Shape and tolerance of the standard suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            tokens: 5,
            dim: 8,
            heads: 2,
            classes: 3,
            eps: 1e-5,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheck {
    pub kind: FusionKind,
    pub seed: u64,
    pub report: GradCheckReport,
    pub passed: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Checks one head at a random parameter point (zero-initialized projections are
/// perturbed too, so every path carries gradient) on a random clip with a CLS token.
pub fn check_head(kind: FusionKind, seed: u64, suite: &SuiteConfig) -> Result<HeadCheck> {
    let mut head = FusionHeadConfig::new(kind, suite.dim);
    head.num_heads = suite.heads;
    head.seed = seed;
    let model = Model::new(ModelConfig::new(head, suite.classes))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut inputs: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|p| {
            let base = p.value.cast::<f64>();
            let noise = random_tensor(&mut rng, base.shape().to_vec(), 0.3);
            Tensor::from_fn(base.shape().to_vec(), |i| base.data()[i] + noise.data()[i])
                .with_requires_grad(true)
        })
        .collect();
    inputs.push(
        random_tensor(&mut rng, vec![suite.frames, suite.tokens, suite.dim], 1.0).with_requires_grad(true),
    );
    let class = rng.random_range(0..suite.classes);
    let n_params = model.params.len();

    let report = grad_check(
        |_, v| {
            model
                .forward(&v[..n_params], v[n_params], Some(0))?
                .logits
                .cross_entropy(class)
        },
        &inputs,
        suite.eps,
    )?;
    let passed = report.passed(suite.tolerance);
    Ok(HeadCheck {
        kind,
        seed,
        report,
        passed,
    })
}

/// Every head at seeds `0..seeds`.
pub fn check_all_heads(seeds: u64, suite: &SuiteConfig) -> Result<Vec<HeadCheck>> {
    let mut out = Vec::new();
    for kind in FusionKind::ALL {
        for seed in 0..seeds {
            out.push(check_head(kind, seed, suite)?);
        }
    }
    Ok(out)
}

/// The linear probe alone on a random feature.
pub fn check_probe(seed: u64, dim: usize, classes: usize) -> Result<GradCheckReport> {
    let head = FusionHeadConfig {
        seed,
        ..FusionHeadConfig::new(FusionKind::AvgPool, dim)
    };
    let model = Model::new(ModelConfig::new(head, classes))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|p| p.value.cast::<f64>().with_requires_grad(true))
        .collect();
    inputs.push(random_tensor(&mut rng, vec![dim], 1.0).with_requires_grad(true));
    let n = model.params.len();
    let class = rng.random_range(0..classes);
    grad_check(
        |_, v| model.probe.logits(&v[..n], v[n])?.cross_entropy(class),
        &inputs,
        1e-4,
    )
}
