use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error so that vanishing gradients compare absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Checks the reverse-mode gradient of a scalar function against central differences.
///
/// `f` receives one leaf per entry of `inputs` (same order, same `requires_grad`
/// flags) and must return a scalar. Every element of every input with
/// `requires_grad` is perturbed by `±eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Option<Tensor<f64>>> = {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &leaves)?;
        let grads = g.backward(out)?;
        leaves
            .iter()
            .zip(inputs)
            .map(|(leaf, input)| {
                input.requires_grad().then(|| {
                    grads
                        .wrt(*leaf)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()))
                })
            })
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let value = f(&g, &leaves)?.value().data()[0];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                op: "grad_check".into(),
            })
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input_idx, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for elem in 0..grad.numel() {
            let original = work[input_idx].data()[elem];
            work[input_idx].data_mut()[elem] = original + eps;
            let plus = eval(&work)?;
            work[input_idx].data_mut()[elem] = original - eps;
            let minus = eval(&work)?;
            work[input_idx].data_mut()[elem] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[elem];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((input_idx, elem));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let report = grad_check(|_, v| v[0].mul(&v[0])?.sum(), &[x], 1e-4).unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu is not differentiable at 0; perturbing across the kink exposes the one-sided gradient
        let x = Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad(true);
        let report = grad_check(|_, v| v[0].relu()?.sum(), &[x], 1e-4).unwrap();
        assert!(report.max_relative_error > 0.1);
    }

    #[test]
    fn skips_frozen_inputs() {
        let w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true);
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |_, v| v[0].mul(&v[1])?.tanh()?.sum(),
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.passed(1e-6));
    }
}
