use super::{Real, Tensor};
use crate::error::{Error, Result};

/// One SGD-with-momentum update: `v <- momentum * v + grad`,
/// `param <- param - lr * v`.
pub fn sgd_momentum_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd step",
            param.len(),
            (grad.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + *g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum SGD over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: T) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd parameter list", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd velocity list",
                self.velocity.len(),
                params.len(),
            ));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_momentum_step(p.data_mut(), g.data(), v, lr, self.momentum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, 0.25], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, [0.5, -2.25]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [3.0f32, 4.0];
        let mut v = [0.0; 2];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, [3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps_follow_recurrence() {
        let g = 2.0f64;
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[g], &mut v, 0.1, 0.9).unwrap();
        sgd_momentum_step(&mut p, &[g], &mut v, 0.1, 0.9).unwrap();
        let expected = -0.1 * g - 0.1 * 1.9 * g;
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_fail() {
        let mut p = [0.0f32; 2];
        let mut v = [0.0; 2];
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).is_err());
    }
}
