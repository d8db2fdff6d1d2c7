use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{matmul, Mode, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) const BN_EPSILON: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Architecture description of one layer. Shapes are per-sample
/// (`[C, H, W]` for feature maps, `[F]` for vectors).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    AvgPool2d {
        window: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
    /// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3×3 convolutions and an
    /// identity shortcut.
    ResidualBlock {
        channels: usize,
    },
}

fn pooled_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || input < window {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ResidualBlock { .. } => "residual_block",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: String| Err(Error::shape(self.name(), expected, input));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return bad(format!("[{in_channels}, H, W]"));
                };
                if *c != in_channels || stride == 0 || kernel == 0 {
                    return bad(format!("[{in_channels}, H, W]"));
                }
                let ho = pooled_extent(h + 2 * padding, kernel, stride);
                let wo = pooled_extent(w + 2 * padding, kernel, stride);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok(vec![out_channels, ho, wo]),
                    _ => bad(format!("spatial extent >= kernel {kernel}")),
                }
            }
            LayerSpec::BatchNorm2d { channels } | LayerSpec::ResidualBlock { channels } => {
                match input {
                    [c, _, _] if *c == channels => Ok(input.to_vec()),
                    _ => bad(format!("[{channels}, H, W]")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => {
                let [c, h, w] = input else {
                    return bad("[C, H, W]".into());
                };
                match (
                    pooled_extent(*h, window, stride),
                    pooled_extent(*w, window, stride),
                ) {
                    (Some(ho), Some(wo)) => Ok(vec![*c, ho, wo]),
                    _ => bad(format!("spatial extent >= window {window}")),
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => bad(format!("[{in_features}]")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Multiply-accumulate count for one sample. Pooling, activations and
    /// normalisation count as zero.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * out_channels * kernel * kernel * out[1] * out[2]) as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            LayerSpec::ResidualBlock { channels } => {
                2 * (channels * channels * 9 * input[1] * input[2]) as u64
            }
            _ => 0,
        })
    }
}

/// Convolution weights `[out, in, k, k]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

/// A layer with its parameters and buffers.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu,
    MaxPool2d { window: usize, stride: usize },
    AvgPool2d { window: usize, stride: usize },
    Linear(Linear<T>),
    Flatten,
    Residual(Box<ResidualBlock<T>>),
}

/// Intermediates recorded by a train-mode forward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<T>,
    },
    BatchNorm {
        shape: Vec<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Biased batch mean/variance per channel.
        mean: Vec<T>,
        var: Vec<T>,
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Linear {
        input: Tensor<T>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Residual(Box<ResidualCache<T>>),
    Sequence(Vec<Cache<T>>),
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    conv1: Cache<T>,
    bn1: Cache<T>,
    relu1: Cache<T>,
    conv2: Cache<T>,
    bn2: Cache<T>,
    out_mask: Vec<bool>,
}

fn missing(layer: &str) -> Error {
    Error::MissingCache {
        layer: layer.to_string(),
    }
}

fn dims4(x: &Tensor<impl Real>, ctx: &str) -> Result<[usize; 4]> {
    match x.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(Error::shape(ctx, "[N, C, H, W]", s)),
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::from_f64_lossy(normal.sample(rng))
        });
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<([usize; 4], usize, usize)> {
        let [n, c, h, w] = dims4(x, "conv2d")?;
        let out = self.spec().output_shape(&[c, h, w])?;
        Ok(([n, c, h, w], out[1], out[2]))
    }

    fn im2col(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let [n, c, h, w] = dims4(x, "conv2d").expect("checked");
        let k = self.kernel;
        let cols_per_row = n * ho * wo;
        let mut cols = vec![T::zero(); c * k * k * cols_per_row];
        let data = x.data();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_buf = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                    for ni in 0..n {
                        let plane = &data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                            let dst = &mut row_buf[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                                if iw >= 0 && iw < w as isize {
                                    *d = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: [usize; 4], ho: usize, wo: usize) -> Vec<T> {
        let [n, c, h, w] = shape;
        let k = self.kernel;
        let cols_per_row = n * ho * wo;
        let mut dx = vec![T::zero(); n * c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_buf = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &row_buf[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                            for (ow, s) in src.iter().enumerate() {
                                let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                                if iw >= 0 && iw < w as isize {
                                    let idx = base + ih as usize * w + iw as usize;
                                    dx[idx] = dx[idx] + *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward_impl(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let ([n, c, _, _], ho, wo) = self.geometry(x)?;
        let cols = self.im2col(x, ho, wo);
        let ckk = c * self.kernel * self.kernel;
        let spatial = ho * wo;
        let ncols = n * spatial;
        let mut out_mat = vec![T::zero(); self.out_channels * ncols];
        matmul(
            self.weight.data(),
            false,
            &cols,
            false,
            &mut out_mat,
            self.out_channels,
            ckk,
            ncols,
            false,
        );
        let mut out = vec![T::zero(); n * self.out_channels * spatial];
        let bias = self.bias.data();
        for co in 0..self.out_channels {
            for ni in 0..n {
                let src = &out_mat[co * ncols + ni * spatial..co * ncols + (ni + 1) * spatial];
                let dst = &mut out[(ni * self.out_channels + co) * spatial..][..spatial];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[co];
                }
            }
        }
        Ok((
            Tensor::new(vec![n, self.out_channels, ho, wo], out)?,
            cols,
        ))
    }

    fn backward_impl(
        &self,
        input_shape: &[usize],
        cols: &[T],
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let [n, c, h, w] = match input_shape {
            [n, c, h, w] => [*n, *c, *h, *w],
            s => return Err(Error::shape("conv2d backward", "[N, C, H, W]", s)),
        };
        let out = self.spec().output_shape(&[c, h, w])?;
        let (ho, wo) = (out[1], out[2]);
        if grad.shape() != [n, self.out_channels, ho, wo] {
            return Err(Error::shape(
                "conv2d backward",
                [n, self.out_channels, ho, wo],
                grad.shape(),
            ));
        }
        let spatial = ho * wo;
        let ncols = n * spatial;
        let ckk = c * self.kernel * self.kernel;
        let mut gmat = vec![T::zero(); self.out_channels * ncols];
        let mut gbias = vec![T::zero(); self.out_channels];
        let g = grad.data();
        for ni in 0..n {
            for co in 0..self.out_channels {
                let src = &g[(ni * self.out_channels + co) * spatial..][..spatial];
                gmat[co * ncols + ni * spatial..co * ncols + (ni + 1) * spatial]
                    .copy_from_slice(src);
            }
        }
        for co in 0..self.out_channels {
            gbias[co] = gmat[co * ncols..(co + 1) * ncols].iter().copied().sum();
        }
        let mut gweight = vec![T::zero(); self.out_channels * ckk];
        matmul(
            &gmat,
            false,
            cols,
            true,
            &mut gweight,
            self.out_channels,
            ncols,
            ckk,
            false,
        );
        let mut gcols = vec![T::zero(); ckk * ncols];
        matmul(
            self.weight.data(),
            true,
            &gmat,
            false,
            &mut gcols,
            ckk,
            self.out_channels,
            ncols,
            false,
        );
        let dx = self.col2im(&gcols, [n, c, h, w], ho, wo);
        Ok((
            Tensor::new(input_shape.to_vec(), dx)?,
            vec![
                Tensor::new(self.weight.shape().to_vec(), gweight)?,
                Tensor::new(vec![self.out_channels], gbias)?,
            ],
        ))
    }
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            scale: Tensor::filled(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        let d = dims4(x, "batchnorm2d")?;
        if d[1] != self.channels {
            return Err(Error::shape(
                "batchnorm2d",
                format!("[N, {}, H, W]", self.channels),
                x.shape(),
            ));
        }
        Ok(d)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.check(x)?;
        let hw = h * w;
        let mut out = x.data().to_vec();
        for ci in 0..c {
            let inv = (self.running_var[ci] + self.epsilon).sqrt().recip();
            let a = self.scale.data()[ci] * inv;
            let b = self.shift.data()[ci] - self.running_mean[ci] * a;
            for ni in 0..n {
                for v in &mut out[(ni * c + ci) * hw..][..hw] {
                    *v = *v * a + b;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Batch-statistics forward. Does not touch the running statistics.
    fn forward_batch_stats(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let [n, c, h, w] = self.check(x)?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return Err(Error::invalid(
                "batchnorm2d in train mode needs at least two values per channel",
            ));
        }
        let mf = T::from_usize(m).expect("count fits");
        let data = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s = s + data[(ni * c + ci) * hw..][..hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut sq = T::zero();
            for ni in 0..n {
                for v in &data[(ni * c + ci) * hw..][..hw] {
                    let d = *v - mu;
                    sq = sq + d * d;
                }
            }
            let v = sq / mf;
            let inv = (v + self.epsilon).sqrt().recip();
            let (g, b) = (self.scale.data()[ci], self.shift.data()[ci]);
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (data[i] - mu) * inv;
                    xhat[i] = xh;
                    out[i] = xh * g + b;
                }
            }
            mean[ci] = mu;
            var[ci] = v;
            inv_std[ci] = inv;
        }
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            Cache::BatchNorm {
                shape: x.shape().to_vec(),
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let (out, cache) = self.forward_batch_stats(x)?;
        if let Cache::BatchNorm {
            shape, mean, var, ..
        } = &cache
        {
            let m = shape[0] * shape[2] * shape[3];
            let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
            let keep = T::one() - self.momentum;
            for ci in 0..self.channels {
                self.running_mean[ci] = keep * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] =
                    keep * self.running_var[ci] + self.momentum * var[ci] * unbias;
            }
        }
        Ok((out, cache))
    }

    fn backward(&self, cache: &Cache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let Cache::BatchNorm {
            shape,
            xhat,
            inv_std,
            ..
        } = cache
        else {
            return Err(missing("batchnorm2d"));
        };
        if grad.shape() != shape.as_slice() {
            return Err(Error::shape("batchnorm2d backward", shape, grad.shape()));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let hw = h * w;
        let mf = T::from_usize(n * hw).unwrap();
        let g = grad.data();
        let mut dx = vec![T::zero(); g.len()];
        let mut dscale = vec![T::zero(); c];
        let mut dshift = vec![T::zero(); c];
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    sum_dy = sum_dy + g[i];
                    sum_dy_xhat = sum_dy_xhat + g[i] * xhat[i];
                }
            }
            dscale[ci] = sum_dy_xhat;
            dshift[ci] = sum_dy;
            let gamma = self.scale.data()[ci];
            let k = gamma * inv_std[ci] / mf;
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    dx[i] = k * (mf * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
        Ok((
            Tensor::new(shape.clone(), dx)?,
            vec![
                Tensor::new(vec![c], dscale)?,
                Tensor::new(vec![c], dshift)?,
            ],
        ))
    }
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Self {
            in_features,
            out_features,
            weight: Tensor::from_fn(&[out_features, in_features], |_| {
                T::from_f64_lossy(dist.sample(rng))
            }),
            bias: Tensor::from_fn(&[out_features], |_| T::from_f64_lossy(dist.sample(rng))),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = match x.shape() {
            [n, f] if *f == self.in_features => *n,
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("[N, {}]", self.in_features),
                    s,
                ))
            }
        };
        let mut out = vec![T::zero(); n * self.out_features];
        for row in out.chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.data());
        }
        matmul(
            x.data(),
            false,
            self.weight.data(),
            true,
            &mut out,
            n,
            self.in_features,
            self.out_features,
            true,
        );
        Tensor::new(vec![n, self.out_features], out)
    }

    pub fn backward_with_input(
        &self,
        input: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let n = input.batch();
        if grad.shape() != [n, self.out_features] {
            return Err(Error::shape(
                "linear backward",
                [n, self.out_features],
                grad.shape(),
            ));
        }
        let mut gw = vec![T::zero(); self.out_features * self.in_features];
        matmul(
            grad.data(),
            true,
            input.data(),
            false,
            &mut gw,
            self.out_features,
            n,
            self.in_features,
            false,
        );
        let mut gb = vec![T::zero(); self.out_features];
        for row in grad.data().chunks(self.out_features) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b = *b + *g;
            }
        }
        let mut dx = vec![T::zero(); n * self.in_features];
        matmul(
            grad.data(),
            false,
            self.weight.data(),
            false,
            &mut dx,
            n,
            self.out_features,
            self.in_features,
            false,
        );
        Ok((
            Tensor::new(vec![n, self.in_features], dx)?,
            vec![
                Tensor::new(vec![self.out_features, self.in_features], gw)?,
                Tensor::new(vec![self.out_features], gb)?,
            ],
        ))
    }
}

fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|v| *v > T::zero()).collect();
    let out = x
        .data()
        .iter()
        .map(|v| if *v > T::zero() { *v } else { T::zero() })
        .collect();
    (
        Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        mask,
    )
}

fn relu_backward<T: Real>(mask: &[bool], grad: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad.len() {
        return Err(Error::shape("relu backward", mask.len(), grad.len()));
    }
    let out = grad
        .data()
        .iter()
        .zip(mask)
        .map(|(g, m)| if *m { *g } else { T::zero() })
        .collect();
    Tensor::new(grad.shape().to_vec(), out)
}

fn pool_forward<T: Real>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    max: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(x, if max { "maxpool2d" } else { "avgpool2d" })?;
    let spec = if max {
        LayerSpec::MaxPool2d { window, stride }
    } else {
        LayerSpec::AvgPool2d { window, stride }
    };
    let o = spec.output_shape(&[c, h, w])?;
    let (ho, wo) = (o[1], o[2]);
    let data = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = if max { vec![0; out.len()] } else { Vec::new() };
    let area = T::from_usize(window * window).unwrap();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let oi = (plane * ho + oh) * wo + ow;
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                let mut sum = T::zero();
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = base + (oh * stride + ki) * w + ow * stride + kj;
                        let v = data[idx];
                        if max {
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        } else {
                            sum = sum + v;
                        }
                    }
                }
                if max {
                    out[oi] = best;
                    argmax[oi] = best_idx;
                } else {
                    out[oi] = sum / area;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

fn avgpool_backward<T: Real>(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let o = LayerSpec::AvgPool2d { window, stride }.output_shape(&[c, h, w])?;
    let (ho, wo) = (o[1], o[2]);
    if grad.shape() != [n, c, ho, wo] {
        return Err(Error::shape("avgpool2d backward", [n, c, ho, wo], grad.shape()));
    }
    let area = T::from_usize(window * window).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    let g = grad.data();
    for plane in 0..n * c {
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = g[(plane * ho + oh) * wo + ow] / area;
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = plane * h * w + (oh * stride + ki) * w + ow * stride + kj;
                        dx[idx] = dx[idx] + gv;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(channels),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(channels),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let channels = self.conv1.in_channels;
        LayerSpec::ResidualBlock { channels }.output_shape(&x.shape()[1..])?;
        Ok(())
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let a = self.conv1.forward_impl(x)?.0;
        let a = self.bn1.forward_eval(&a)?;
        let a = relu_forward(&a).0;
        let b = self.conv2.forward_impl(&a)?.0;
        let mut b = self.bn2.forward_eval(&b)?;
        b.add_assign(x)?;
        Ok(relu_forward(&b).0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        self.check(x)?;
        let (a, cols1) = self.conv1.forward_impl(x)?;
        let (a, bn1) = self.bn1.forward_train(&a)?;
        let (a, mask1) = relu_forward(&a);
        let (b, cols2) = self.conv2.forward_impl(&a)?;
        let (mut b, bn2) = self.bn2.forward_train(&b)?;
        b.add_assign(x)?;
        let (out, out_mask) = relu_forward(&b);
        Ok((
            out,
            Cache::Residual(Box::new(ResidualCache {
                conv1: Cache::Conv {
                    input_shape: x.shape().to_vec(),
                    cols: cols1,
                },
                bn1,
                relu1: Cache::Relu { mask: mask1 },
                conv2: Cache::Conv {
                    input_shape: a.shape().to_vec(),
                    cols: cols2,
                },
                bn2,
                out_mask,
            })),
        ))
    }

    fn backward(
        &self,
        cache: &ResidualCache<T>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let g_sum = relu_backward(&cache.out_mask, grad)?;
        let (g, bn2) = self.bn2.backward(&cache.bn2, &g_sum)?;
        let Cache::Conv { input_shape, cols } = &cache.conv2 else {
            return Err(missing("residual_block.conv2"));
        };
        let (g, conv2) = self.conv2.backward_impl(input_shape, cols, &g)?;
        let Cache::Relu { mask } = &cache.relu1 else {
            return Err(missing("residual_block.relu"));
        };
        let g = relu_backward(mask, &g)?;
        let (g, bn1) = self.bn1.backward(&cache.bn1, &g)?;
        let Cache::Conv { input_shape, cols } = &cache.conv1 else {
            return Err(missing("residual_block.conv1"));
        };
        let (mut dx, conv1) = self.conv1.backward_impl(input_shape, cols, &g)?;
        dx.add_assign(&g_sum)?;
        let mut grads = conv1;
        grads.extend(bn1);
        grads.extend(conv2);
        grads.extend(bn2);
        Ok((dx, grads))
    }
}

impl<T: Real> Layer<T> {
    /// Fresh layer with randomly initialised parameters.
    pub fn from_spec(spec: &LayerSpec, rng: &mut impl Rng) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                rng,
            )),
            LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d(BatchNorm2d::new(channels)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d { window, stride },
            LayerSpec::AvgPool2d { window, stride } => Layer::AvgPool2d { window, stride },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(in_features, out_features, rng)),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::ResidualBlock { channels } => {
                Layer::Residual(Box::new(ResidualBlock::new(channels, rng)))
            }
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => c.spec(),
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d {
                channels: b.channels,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2d { window, stride } => LayerSpec::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::AvgPool2d { window, stride } => LayerSpec::AvgPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Residual(r) => LayerSpec::ResidualBlock {
                channels: r.conv1.in_channels,
            },
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(x)?, None)),
            Mode::Train => {
                let (y, c) = self.forward_train(x)?;
                Ok((y, Some(c)))
            }
        }
    }

    /// Eval-mode forward: running statistics, no caches, no mutation.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(c) => Ok(c.forward_impl(x)?.0),
            Layer::BatchNorm2d(b) => b.forward_eval(x),
            Layer::Relu => Ok(relu_forward(x).0),
            Layer::MaxPool2d { window, stride } => Ok(pool_forward(x, *window, *stride, true)?.0),
            Layer::AvgPool2d { window, stride } => Ok(pool_forward(x, *window, *stride, false)?.0),
            Layer::Linear(l) => l.forward_eval(x),
            Layer::Flatten => flatten(x),
            Layer::Residual(r) => r.forward_eval(x),
        }
    }

    /// Train-mode forward: batch statistics (running statistics updated)
    /// and a cache for [`Layer::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv2d(c) => {
                let (y, cols) = c.forward_impl(x)?;
                Ok((
                    y,
                    Cache::Conv {
                        input_shape: x.shape().to_vec(),
                        cols,
                    },
                ))
            }
            Layer::BatchNorm2d(b) => b.forward_train(x),
            Layer::Relu => {
                let (y, mask) = relu_forward(x);
                Ok((y, Cache::Relu { mask }))
            }
            Layer::MaxPool2d { window, stride } => {
                let (y, argmax) = pool_forward(x, *window, *stride, true)?;
                Ok((
                    y,
                    Cache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::AvgPool2d { window, stride } => {
                let (y, _) = pool_forward(x, *window, *stride, false)?;
                Ok((
                    y,
                    Cache::AvgPool {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::Linear(l) => Ok((l.forward_eval(x)?, Cache::Linear { input: x.clone() })),
            Layer::Flatten => Ok((
                flatten(x)?,
                Cache::Flatten {
                    input_shape: x.shape().to_vec(),
                },
            )),
            Layer::Residual(r) => r.forward_train(x),
        }
    }

    /// Backward pass. Returns the input gradient and parameter gradients
    /// aligned with [`Layer::params`].
    pub fn backward(
        &self,
        cache: Option<&Cache<T>>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let name = self.spec().name();
        let cache = cache.ok_or_else(|| missing(name))?;
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Conv { input_shape, cols }) => {
                c.backward_impl(input_shape, cols, grad)
            }
            (Layer::BatchNorm2d(b), c @ Cache::BatchNorm { .. }) => b.backward(c, grad),
            (Layer::Relu, Cache::Relu { mask }) => Ok((relu_backward(mask, grad)?, vec![])),
            (
                Layer::MaxPool2d { .. },
                Cache::MaxPool {
                    input_shape,
                    argmax,
                },
            ) => {
                if argmax.len() != grad.len() {
                    return Err(Error::shape("maxpool2d backward", argmax.len(), grad.len()));
                }
                let mut dx = Tensor::zeros(input_shape);
                let d = dx.data_mut();
                for (g, idx) in grad.data().iter().zip(argmax) {
                    d[*idx] = d[*idx] + *g;
                }
                Ok((dx, vec![]))
            }
            (Layer::AvgPool2d { window, stride }, Cache::AvgPool { input_shape }) => Ok((
                avgpool_backward(input_shape, *window, *stride, grad)?,
                vec![],
            )),
            (Layer::Linear(l), Cache::Linear { input }) => l.backward_with_input(input, grad),
            (Layer::Flatten, Cache::Flatten { input_shape }) => {
                Ok((grad.clone().reshape(input_shape.clone())?, vec![]))
            }
            (Layer::Residual(r), Cache::Residual(c)) => r.backward(c, grad),
            _ => Err(missing(name)),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm2d(b) => vec![&b.scale, &b.shift],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(r) => vec![
                &r.conv1.weight,
                &r.conv1.bias,
                &r.bn1.scale,
                &r.bn1.shift,
                &r.conv2.weight,
                &r.conv2.bias,
                &r.bn2.scale,
                &r.bn2.shift,
            ],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.scale, &mut b.shift],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(r) => {
                let ResidualBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                } = &mut **r;
                vec![
                    &mut conv1.weight,
                    &mut conv1.bias,
                    &mut bn1.scale,
                    &mut bn1.shift,
                    &mut conv2.weight,
                    &mut conv2.bias,
                    &mut bn2.scale,
                    &mut bn2.shift,
                ]
            }
            _ => vec![],
        }
    }

    /// Batch-norm layers in forward order (including those nested in
    /// residual blocks).
    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        match self {
            Layer::BatchNorm2d(b) => vec![b],
            Layer::Residual(r) => {
                let ResidualBlock { bn1, bn2, .. } = &mut **r;
                vec![bn1, bn2]
            }
            _ => vec![],
        }
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<T>> {
        match self {
            Layer::BatchNorm2d(b) => vec![b],
            Layer::Residual(r) => vec![&r.bn1, &r.bn2],
            _ => vec![],
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        fn conv<T: Real, U: Real>(c: &Conv2d<T>) -> Conv2d<U> {
            Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
            }
        }
        fn bn<T: Real, U: Real>(b: &BatchNorm2d<T>) -> BatchNorm2d<U> {
            let cv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
            BatchNorm2d {
                channels: b.channels,
                scale: b.scale.cast(),
                shift: b.shift.cast(),
                running_mean: cv(&b.running_mean),
                running_var: cv(&b.running_var),
                momentum: U::from_f64_lossy(b.momentum.to_f64_lossy()),
                epsilon: U::from_f64_lossy(b.epsilon.to_f64_lossy()),
            }
        }
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(conv(c)),
            Layer::BatchNorm2d(b) => Layer::BatchNorm2d(bn(b)),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d { window, stride } => Layer::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::AvgPool2d { window, stride } => Layer::AvgPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Linear(l) => Layer::Linear(Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Flatten => Layer::Flatten,
            Layer::Residual(r) => Layer::Residual(Box::new(ResidualBlock {
                conv1: conv(&r.conv1),
                bn1: bn(&r.bn1),
                conv2: conv(&r.conv2),
                bn2: bn(&r.bn2),
            })),
        }
    }
}

fn flatten<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.batch();
    let f = x.shape()[1..].iter().product();
    x.clone().reshape(vec![n, f])
}

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

fn at_layer(index: usize, layer: &str, err: Error) -> Error {
    match err {
        Error::Shape {
            context,
            expected,
            actual,
        } => Error::Shape {
            context: format!("layer {index} ({layer}): {context}"),
            expected,
            actual,
        },
        other => other,
    }
}

impl<T: Real> Sequential<T> {
    pub fn from_specs(specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        Self {
            layers: specs.iter().map(|s| Layer::from_spec(s, rng)).collect(),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .forward_eval(&cur)
                .map_err(|e| at_layer(i, layer.spec().name(), e))?;
        }
        Ok(cur)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = layer.spec().name();
            let (y, c) = layer.forward_train(&cur).map_err(|e| at_layer(i, name, e))?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, Cache::Sequence(caches)))
    }

    pub fn backward(
        &self,
        cache: Option<&Cache<T>>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let Some(Cache::Sequence(caches)) = cache else {
            return Err(missing("sequential"));
        };
        if caches.len() != self.layers.len() {
            return Err(missing("sequential"));
        }
        let mut g = grad.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (i, (layer, c)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (dx, pg) = layer
                .backward(Some(c), &g)
                .map_err(|e| at_layer(i, layer.spec().name(), e))?;
            per_layer.push(pg);
            g = dx;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor<f64>, c: &Conv2d<f64>) -> Vec<f64> {
        let [n, ci, h, w] = dims4(x, "naive").unwrap();
        let k = c.kernel;
        let ho = (h + 2 * c.padding - k) / c.stride + 1;
        let wo = (w + 2 * c.padding - k) / c.stride + 1;
        let mut out = vec![0.0; n * c.out_channels * ho * wo];
        for b in 0..n {
            for co in 0..c.out_channels {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = c.bias.data()[co];
                        for cin in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * c.stride + ki) as isize - c.padding as isize;
                                    let iw = (ow * c.stride + kj) as isize - c.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * ci + cin) * h + ih as usize) * w
                                        + iw as usize]
                                        * c.weight.data()[((co * ci + cin) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * c.out_channels + co) * ho + oh) * wo + ow] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut r = rng();
        let mut conv = Conv2d::<f32>::new(3, 3, 1, 1, 0, &mut r);
        conv.weight = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f32 * 0.37).sin());
        let y = Layer::Conv2d(conv).forward_eval(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negative_input() {
        let x = Tensor::<f32>::new(vec![1, 4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        let y = Layer::Relu.forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_backward_masks_gradient() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let mut relu = Layer::Relu;
        let (_, cache) = relu.forward_train(&x).unwrap();
        let g = Tensor::filled(&[1, 2], 1.0);
        let (dx, _) = relu.backward(Some(&cache), &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let x = random_tensor(&[2, 3, 8, 8], &mut r);
            let mut conv = Conv2d::<f64>::new(3, 4, 3, stride, padding, &mut r);
            conv.bias = random_tensor(&[4], &mut r);
            let expected = naive_conv(&x, &conv);
            let got = Layer::Conv2d(conv).forward_eval(&x).unwrap();
            for (a, b) in got.data().iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_f32_matches_f64_naive_oracle() {
        let mut r = rng();
        let x = random_tensor(&[1, 3, 8, 8], &mut r);
        let conv = Conv2d::<f64>::new(3, 4, 3, 1, 0, &mut r);
        let expected = naive_conv(&x, &conv);
        let layer32 = Layer::Conv2d(conv).cast::<f32>();
        let got = layer32.forward_eval(&x.cast()).unwrap();
        for (a, b) in got.data().iter().zip(&expected) {
            assert!(((*a as f64) - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut r = rng();
        let net = Sequential::<f32>::from_specs(
            &[
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 4,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ],
            &mut r,
        );
        let err = net.forward_eval(&Tensor::zeros(&[1, 3, 8, 8])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1 (conv2d)"), "{msg}");
        assert!(msg.contains("[4, H, W]"), "{msg}");
    }

    #[test]
    fn backward_without_cache_fails() {
        let mut r = rng();
        let lin = Layer::<f32>::from_spec(
            &LayerSpec::Linear {
                in_features: 3,
                out_features: 2,
            },
            &mut r,
        );
        let err = lin.backward(None, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::MissingCache { .. }));
        let wrong = Cache::Relu { mask: vec![true; 2] };
        assert!(lin.backward(Some(&wrong), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn batchnorm_train_then_eval_uses_running_stats() {
        let mut bn = Layer::BatchNorm2d(BatchNorm2d::<f64>::new(2));
        let x = Tensor::from_fn(&[4, 2, 2, 2], |i| i as f64);
        let (y, _) = bn.forward_train(&x).unwrap();
        // batch-normalised output has zero mean per channel
        let ch0: f64 = (0..4)
            .flat_map(|n| (0..4).map(move |p| n * 8 + p))
            .map(|i| y.data()[i])
            .sum();
        assert!(ch0.abs() < 1e-9);
        let Layer::BatchNorm2d(b) = &bn else { unreachable!() };
        assert!(b.running_var.iter().all(|v| *v > 0.0));
        // eval twice: bit-identical
        let e1 = bn.forward_eval(&x).unwrap();
        let e2 = bn.forward_eval(&x).unwrap();
        assert_eq!(e1, e2);
        assert_ne!(e1, y);
    }

    #[test]
    fn macs_follow_definitions() {
        let lin = LayerSpec::Linear {
            in_features: 64,
            out_features: 10,
        };
        assert_eq!(lin.macs(&[64]).unwrap(), 640);
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(conv.macs(&[3, 32, 32]).unwrap(), 442_368);
        assert_eq!(LayerSpec::Relu.macs(&[3, 32, 32]).unwrap(), 0);
        assert_eq!(
            LayerSpec::MaxPool2d {
                window: 2,
                stride: 2
            }
            .macs(&[3, 32, 32])
            .unwrap(),
            0
        );
        assert!(conv.macs(&[4, 32, 32]).is_err());
    }
}

impl<T: Real> Cache<T> {
    /// Batch statistics `(mean, biased variance, count per channel)` of every
    /// batch-norm layer recorded in this cache, in forward order.
    pub fn batchnorm_stats(&self) -> Vec<(&[T], &[T], usize)> {
        let mut out = Vec::new();
        self.collect_bn(&mut out);
        out
    }

    fn collect_bn<'a>(&'a self, out: &mut Vec<(&'a [T], &'a [T], usize)>) {
        match self {
            Cache::BatchNorm {
                shape, mean, var, ..
            } => out.push((mean, var, shape[0] * shape[2] * shape[3])),
            Cache::Residual(r) => {
                r.bn1.collect_bn(out);
                r.bn2.collect_bn(out);
            }
            Cache::Sequence(v) => v.iter().for_each(|c| c.collect_bn(out)),
            _ => {}
        }
    }
}
