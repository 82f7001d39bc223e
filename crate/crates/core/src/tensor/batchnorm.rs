use super::{GradFn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization over `(N, C, H, W)` inputs.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate; evaluation mode uses the
/// running estimates only. Running statistics are buffers, not parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar = f32> {
    num_channels: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    gamma: Option<Tensor<T>>,
    beta: Option<Tensor<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(num_channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(Tensor::parameter(&[num_channels], vec![T::one(); num_channels]).expect("shape")),
                Some(Tensor::parameter(&[num_channels], vec![T::zero(); num_channels]).expect("shape")),
            )
        } else {
            (None, None)
        };
        Self {
            num_channels,
            running_mean: vec![T::zero(); num_channels],
            running_var: vec![T::one(); num_channels],
            momentum: T::from_f64(Self::DEFAULT_MOMENTUM),
            eps: T::from_f64(Self::DEFAULT_EPS),
            gamma,
            beta,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn affine(&self) -> bool {
        self.gamma.is_some()
    }

    pub fn gamma(&self) -> Option<&Tensor<T>> {
        self.gamma.as_ref()
    }

    pub fn beta(&self) -> Option<&Tensor<T>> {
        self.beta.as_ref()
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.num_channels {
            return Err(Error::shape(
                "batchnorm2d",
                format!("expected (N, {}, H, W), got {s:?}", self.num_channels),
            ));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if n == 0 {
            return Err(Error::invalid("batchnorm2d", "batch of size 0"));
        }
        let count = n * plane;
        let xd = x.data();

        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let denom = T::from_f64(count as f64);
                for ch in 0..c {
                    let slices = (0..n).map(|s| &xd[(s * c + ch) * plane..][..plane]);
                    let m = slices.clone().flatten().copied().sum::<T>() / denom;
                    let v = slices.flatten().map(|v| (*v - m) * (*v - m)).sum::<T>() / denom;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbias = if count > 1 {
                    T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let keep = T::one() - self.momentum;
                for ch in 0..c {
                    self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] = keep * self.running_var[ch] + self.momentum * var[ch] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + self.eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var
                    .iter()
                    .map(|v| T::one() / (*v + self.eps).sqrt())
                    .collect(),
            ),
        };

        let gamma = self.gamma.as_ref().map(|g| g.to_vec());
        let beta = self.beta.as_ref().map(|b| b.to_vec());
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let (g, b) = (
                    gamma.as_ref().map_or(T::one(), |g| g[ch]),
                    beta.as_ref().map_or(T::zero(), |b| b[ch]),
                );
                for (o, v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                    *o = (*v - mean[ch]) * inv_std[ch] * g + b;
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            BatchNormBackward {
                input: x.clone(),
                gamma: self.gamma.clone(),
                beta: self.beta.clone(),
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }
}

struct BatchNormBackward<T: Scalar> {
    input: Tensor<T>,
    gamma: Option<Tensor<T>>,
    beta: Option<Tensor<T>>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> GradFn<T> for BatchNormBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.input];
        v.extend(self.gamma.iter());
        v.extend(self.beta.iter());
        v
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let s = self.input.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = T::from_f64((n * plane) as f64);
        let x = self.input.data();
        let xhat = |i: usize, ch: usize| (x[i] - self.mean[ch]) * self.inv_std[ch];

        // Σ g and Σ g·x̂ per channel
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * plane;
                for i in off..off + plane {
                    sum_g[ch] = sum_g[ch] + grad[i];
                    sum_gx[ch] = sum_gx[ch] + grad[i] * xhat(i, ch);
                }
            }
        }

        if self.input.requires_grad() {
            let gamma = self.gamma.as_ref().map(|g| g.to_vec());
            let mut gx = vec![T::zero(); x.len()];
            for smp in 0..n {
                for ch in 0..c {
                    let g = gamma.as_ref().map_or(T::one(), |g| g[ch]);
                    let off = (smp * c + ch) * plane;
                    for i in off..off + plane {
                        gx[i] = if self.batch_stats {
                            g * self.inv_std[ch] / count * (count * grad[i] - sum_g[ch] - xhat(i, ch) * sum_gx[ch])
                        } else {
                            g * self.inv_std[ch] * grad[i]
                        };
                    }
                }
            }
            drop(x);
            self.input.accumulate_grad(&gx);
        }
        if let Some(gamma) = &self.gamma {
            gamma.accumulate_grad(&sum_gx);
        }
        if let Some(beta) = &self.beta {
            beta.accumulate_grad(&sum_g);
        }
    }
}
