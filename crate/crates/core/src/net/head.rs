use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Linear, Real, Tensor};

/// Spatial size each exit pools its feature map to before mixing.
pub const HEAD_POOL: usize = 4;

fn bins(extent: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * extent) / out, ((i + 1) * extent).div_ceil(out)))
        .collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Internal classifier: adaptive mixed max/average pooling followed by a
/// linear layer. The mix is `s * max + (1 - s) * avg` with
/// `s = sigmoid(mixing_logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead<T> {
    pub channels: usize,
    /// Pooled spatial size (`min(HEAD_POOL, H)` of the attach point).
    pub pool: usize,
    pub mixing_logit: Tensor<T>,
    pub linear: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
    max_vals: Vec<T>,
    avg_vals: Vec<T>,
    features: Tensor<T>,
}

impl<T: Real> ExitHead<T> {
    pub fn new(feature_shape: [usize; 3], num_classes: usize, rng: &mut impl Rng) -> Self {
        let [c, h, w] = feature_shape;
        let pool = HEAD_POOL.min(h).min(w);
        Self {
            channels: c,
            pool,
            mixing_logit: Tensor::zeros(&[1]),
            linear: Linear::new(c * pool * pool, num_classes, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * self.pool * self.pool
    }

    pub fn mixing(&self) -> T {
        sigmoid(self.mixing_logit.data()[0])
    }

    pub fn macs(&self) -> u64 {
        (self.linear.in_features * self.linear.out_features) as u64
    }

    fn pool(&self, x: &Tensor<T>) -> Result<(HeadCache<T>, [usize; 4])> {
        let [n, c, h, w] = match x.shape() {
            [n, c, h, w] if *c == self.channels => [*n, *c, *h, *w],
            s => {
                return Err(Error::shape(
                    "exit head",
                    format!("[N, {}, H, W]", self.channels),
                    s,
                ))
            }
        };
        let p = self.pool;
        let (hb, wb) = (bins(h, p), bins(w, p));
        let data = x.data();
        let total = n * c * p * p;
        let mut argmax = vec![0; total];
        let mut max_vals = vec![T::zero(); total];
        let mut avg_vals = vec![T::zero(); total];
        for plane in 0..n * c {
            for (i, &(y0, y1)) in hb.iter().enumerate() {
                for (j, &(x0, x1)) in wb.iter().enumerate() {
                    let o = (plane * p + i) * p + j;
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    let mut sum = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let idx = plane * h * w + y * w + xx;
                            let v = data[idx];
                            sum = sum + v;
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    argmax[o] = best_idx;
                    max_vals[o] = best;
                    avg_vals[o] = sum / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        let s = self.mixing();
        let mixed: Vec<T> = max_vals
            .iter()
            .zip(&avg_vals)
            .map(|(m, a)| s * *m + (T::one() - s) * *a)
            .collect();
        let features = Tensor::new(vec![n, c * p * p], mixed)?;
        Ok((
            HeadCache {
                input_shape: [n, c, h, w],
                argmax,
                max_vals,
                avg_vals,
                features,
            },
            [n, c, h, w],
        ))
    }

    /// Returns `(logits, pooled features)`, plus the cache for backward.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, HeadCache<T>)> {
        let (cache, _) = self.pool(x)?;
        let logits = self.linear.forward_eval(&cache.features)?;
        Ok((logits, cache.features.clone(), cache))
    }

    /// Gradients: `(input grad, [mixing_logit, weight, bias])`.
    pub fn backward(
        &self,
        cache: &HeadCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (g_feat, lin) = self.linear.backward_with_input(&cache.features, grad_logits)?;
        let s = self.mixing();
        let [n, c, h, w] = cache.input_shape;
        let p = self.pool;
        let (hb, wb) = (bins(h, p), bins(w, p));
        let mut dx = vec![T::zero(); n * c * h * w];
        let mut dmix = T::zero();
        let g = g_feat.data();
        for plane in 0..n * c {
            for (i, &(y0, y1)) in hb.iter().enumerate() {
                for (j, &(x0, x1)) in wb.iter().enumerate() {
                    let o = (plane * p + i) * p + j;
                    dmix = dmix + g[o] * (cache.max_vals[o] - cache.avg_vals[o]);
                    let gm = g[o] * s;
                    dx[cache.argmax[o]] = dx[cache.argmax[o]] + gm;
                    let ga = g[o] * (T::one() - s)
                        / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let idx = plane * h * w + y * w + xx;
                            dx[idx] = dx[idx] + ga;
                        }
                    }
                }
            }
        }
        let dlogit = dmix * s * (T::one() - s);
        let mut grads = vec![Tensor::new(vec![1], vec![dlogit])?];
        grads.extend(lin);
        Ok((Tensor::new(vec![n, c, h, w], dx)?, grads))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.mixing_logit, &self.linear.weight, &self.linear.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.mixing_logit,
            &mut self.linear.weight,
            &mut self.linear.bias,
        ]
    }

    pub fn cast<U: Real>(&self) -> ExitHead<U> {
        ExitHead {
            channels: self.channels,
            pool: self.pool,
            mixing_logit: self.mixing_logit.cast(),
            linear: Linear {
                in_features: self.linear.in_features,
                out_features: self.linear.out_features,
                weight: self.linear.weight.cast(),
                bias: self.linear.bias.cast(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, softmax_cross_entropy_batch, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logit_mixes_max_and_average_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ExitHead::<f64>::new([1, 4, 4], 2, &mut rng);
        // 4×4 input pooled to 4×4: max == avg == input
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (_, feats, _) = head.forward(&x).unwrap();
        assert_eq!(feats.data(), x.data());

        let mut head = ExitHead::<f64>::new([1, 8, 8], 2, &mut rng);
        head.mixing_logit = Tensor::zeros(&[1]);
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 37) % 11) as f64);
        let (_, feats, cache) = head.forward(&x).unwrap();
        for (o, f) in feats.data().iter().enumerate() {
            let expected = 0.5 * cache.max_vals[o] + 0.5 * cache.avg_vals[o];
            assert_eq!(*f, expected);
        }
    }

    struct HeadObjective {
        head: ExitHead<f64>,
        input: Tensor<f64>,
        labels: Vec<usize>,
    }

    impl Objective for HeadObjective {
        fn num_params(&self) -> usize {
            4
        }
        fn param_mut(&mut self, index: usize) -> &mut Tensor<f64> {
            if index == 3 {
                &mut self.input
            } else {
                self.head.params_mut().swap_remove(index)
            }
        }
        fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor<f64>>)> {
            let (logits, _, cache) = self.head.forward(&self.input)?;
            let (loss, _, g) = softmax_cross_entropy_batch(&logits, &self.labels)?;
            let (dx, mut grads) = self.head.backward(&cache, &g)?;
            grads.push(dx);
            Ok((loss, grads))
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = ExitHead::<f64>::new([2, 6, 6], 3, &mut rng);
        head.mixing_logit = Tensor::new(vec![1], vec![0.4]).unwrap();
        let input = Tensor::from_fn(&[3, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
        let mut obj = HeadObjective {
            head,
            input,
            labels: vec![0, 2, 1],
        };
        let report = grad_check(&mut obj, &[], 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
