use super::{softmax_cross_entropy_batch, Sequential, Tensor};
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so exactly-zero gradients
/// compare against round-off rather than against zero.
const REL_FLOOR: f64 = 1e-6;

/// A scalar loss over an indexed list of 64-bit parameter tensors.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn param_mut(&mut self, index: usize) -> &mut Tensor<f64>;
    /// Loss and analytic gradients aligned with the parameter indices.
    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor<f64>>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradViolation {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub violations: Vec<GradViolation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compare analytic gradients with central differences (step 1e-5).
/// Parameters listed in `frozen` are skipped entirely. Violations are
/// reported, not raised.
pub fn grad_check<O: Objective>(
    objective: &mut O,
    frozen: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.loss_and_grads()?;
    if analytic.len() != objective.num_params() {
        return Err(Error::shape(
            "grad_check gradient list",
            objective.num_params(),
            analytic.len(),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        violations: Vec::new(),
    };
    for (p, grad) in analytic.iter().enumerate() {
        if frozen.contains(&p) {
            continue;
        }
        for e in 0..grad.len() {
            let original = objective.param_mut(p).data()[e];
            objective.param_mut(p).data_mut()[e] = original + STEP;
            let (plus, _) = objective.loss_and_grads()?;
            objective.param_mut(p).data_mut()[e] = original - STEP;
            let (minus, _) = objective.loss_and_grads()?;
            objective.param_mut(p).data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tolerance || !rel.is_finite() {
                report.violations.push(GradViolation {
                    param: p,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Mean softmax cross-entropy of a layer stack's `[N, K]` output. The input
/// batch is exposed as the last parameter so its gradient is checked too.
#[derive(Debug, Clone)]
pub struct SequentialObjective {
    pub net: Sequential<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Objective for SequentialObjective {
    fn num_params(&self) -> usize {
        self.net.params().len() + 1
    }

    fn param_mut(&mut self, index: usize) -> &mut Tensor<f64> {
        let n = self.net.params().len();
        if index == n {
            &mut self.input
        } else {
            self.net.params_mut().swap_remove(index)
        }
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor<f64>>)> {
        let (out, cache) = self.net.forward_train(&self.input)?;
        let (loss, _, g) = softmax_cross_entropy_batch(&out, &self.labels)?;
        let (dx, mut grads) = self.net.backward(Some(&cache), &g)?;
        grads.push(dx);
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(specs: &[LayerSpec], input_shape: &[usize], classes: usize) -> SequentialObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Sequential::from_specs(specs, &mut rng);
        let input = Tensor::from_fn(input_shape, |_| rng.random_range(-1.0..1.0));
        let labels = (0..input_shape[0])
            .map(|_| rng.random_range(0..classes))
            .collect();
        SequentialObjective { net, input, labels }
    }

    #[test]
    fn linear_relu_stack_passes() {
        let mut obj = objective(
            &[
                LayerSpec::Linear {
                    in_features: 5,
                    out_features: 7,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 7,
                    out_features: 3,
                },
            ],
            &[4, 5],
            3,
        );
        let report = grad_check(&mut obj, &[], 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.checked > 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut obj = objective(
            &[LayerSpec::Linear {
                in_features: 3,
                out_features: 2,
            }],
            &[2, 3],
            2,
        );
        let all: Vec<usize> = (0..obj.num_params()).collect();
        let report = grad_check(&mut obj, &all, 1e-4).unwrap();
        assert!(report.violations.is_empty());
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        struct Broken(Tensor<f64>);
        impl Objective for Broken {
            fn num_params(&self) -> usize {
                1
            }
            fn param_mut(&mut self, _: usize) -> &mut Tensor<f64> {
                &mut self.0
            }
            fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor<f64>>)> {
                let x = self.0.data()[0];
                // true derivative of x^2 is 2x; report 3x
                Ok((x * x, vec![Tensor::new(vec![1], vec![3.0 * x])?]))
            }
        }
        let mut b = Broken(Tensor::new(vec![1], vec![1.5]).unwrap());
        let report = grad_check(&mut b, &[], 1e-4).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert!((report.violations[0].numeric - 3.0).abs() < 1e-6);
    }
}
