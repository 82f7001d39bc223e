use super::{GradFn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which slices of the trailing `(height, width)` plane a softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each row (fixed height index) sums to one.
    Rows,
    /// Each column (fixed width index) sums to one.
    Cols,
}

/// Visits every slice of a `(…, H, W)` buffer as (start, stride, len).
fn for_each_slice(len: usize, h: usize, w: usize, axis: SoftmaxAxis, mut f: impl FnMut(usize, usize, usize)) {
    let planes = len / (h * w);
    for p in 0..planes {
        let base = p * h * w;
        match axis {
            SoftmaxAxis::Rows => (0..h).for_each(|r| f(base + r * w, 1, w)),
            SoftmaxAxis::Cols => (0..w).for_each(|c| f(base + c, w, h)),
        }
    }
}

/// Softmax of one (h, w) plane. Columns are swept row by row so memory is
/// read contiguously; each slice still sees its elements in index order.
fn softmax_plane<T: Scalar>(x: &[T], y: &mut [T], w: usize, axis: SoftmaxAxis) {
    match axis {
        SoftmaxAxis::Rows => {
            for (xr, yr) in x.chunks_exact(w).zip(y.chunks_exact_mut(w)) {
                let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (yv, &xv) in yr.iter_mut().zip(xr) {
                    let e = (xv - max).exp();
                    *yv = e;
                    total = total + e;
                }
                yr.iter_mut().for_each(|v| *v = *v / total);
            }
        }
        SoftmaxAxis::Cols => {
            let mut max = vec![T::neg_infinity(); w];
            for xr in x.chunks_exact(w) {
                for (m, &xv) in max.iter_mut().zip(xr) {
                    *m = T::max(*m, xv);
                }
            }
            let mut total = vec![T::zero(); w];
            for (xr, yr) in x.chunks_exact(w).zip(y.chunks_exact_mut(w)) {
                for (((yv, &xv), &m), t) in yr.iter_mut().zip(xr).zip(&max).zip(total.iter_mut()) {
                    let e = (xv - m).exp();
                    *yv = e;
                    *t = *t + e;
                }
            }
            for yr in y.chunks_exact_mut(w) {
                for (yv, &t) in yr.iter_mut().zip(&total) {
                    *yv = *yv / t;
                }
            }
        }
    }
}

fn check_finite<T: Scalar>(what: &str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: format!("{what} input at flat index {i}"),
        }),
        None => Ok(()),
    }
}

struct SoftmaxBackward<T: Scalar> {
    input: Tensor<T>,
    axis: SoftmaxAxis,
}

impl<T: Scalar> GradFn<T> for SoftmaxBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, y: &[T], grad: &[T]) {
        let s = self.input.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut gx = vec![T::zero(); y.len()];
        for_each_slice(y.len(), h, w, self.axis, |start, stride, n| {
            let dot: T = (0..n).map(|k| grad[start + k * stride] * y[start + k * stride]).sum();
            for k in 0..n {
                let i = start + k * stride;
                gx[i] = y[i] * (grad[i] - dot);
            }
        });
        self.input.accumulate_grad(&gx);
    }
}

struct LogSoftmaxBackward<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for LogSoftmaxBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &[T], grad: &[T]) {
        let k = self.input.shape()[1];
        let mut gx = vec![T::zero(); out.len()];
        for ((gx, g), o) in gx.chunks_mut(k).zip(grad.chunks(k)).zip(out.chunks(k)) {
            let total: T = g.iter().copied().sum();
            for j in 0..k {
                gx[j] = g[j] - o[j].exp() * total;
            }
        }
        self.input.accumulate_grad(&gx);
    }
}

struct NllBackward<T: Scalar> {
    input: Tensor<T>,
    targets: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for NllBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _out: &[T], grad: &[T]) {
        let k = self.input.shape()[1];
        let scale = -grad[0] / T::from_f64(self.targets.len() as f64);
        self.input.with_grad_mut(|gx| {
            for (n, &t) in self.targets.iter().enumerate() {
                gx[n * k + t] = gx[n * k + t] + scale;
            }
        });
    }
}

impl<T: Scalar> Tensor<T> {
    /// Softmax over the rows or columns of the trailing two axes.
    ///
    /// Each slice is shifted by its maximum before exponentiation.
    pub fn softmax_axis(&self, axis: SoftmaxAxis) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(Error::shape(
                "softmax_axis",
                format!("need at least (height, width) axes, got {:?}", self.shape()),
            ));
        }
        let s = self.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let x = self.data();
        check_finite("softmax_axis", &x)?;
        let mut y = vec![T::zero(); x.len()];
        if h > 0 && w > 0 {
            for (xp, yp) in x.chunks_exact(h * w).zip(y.chunks_exact_mut(h * w)) {
                softmax_plane(xp, yp, w, axis);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            SoftmaxBackward {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Row-wise log-softmax of an `(N, K)` tensor.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::shape(
                "log_softmax",
                format!("expected (N, K), got {:?}", self.shape()),
            ));
        }
        let k = self.shape()[1];
        let x = self.data();
        check_finite("log_softmax", &x)?;
        let mut out = vec![T::zero(); x.len()];
        if k > 0 {
            for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
                for (o, v) in o.iter_mut().zip(row) {
                    *o = *v - lse;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            LogSoftmaxBackward { input: self.clone() },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `(N, K)` log-probabilities.
    pub fn nll_loss(&self, targets: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::shape(
                "nll_loss",
                format!("log-probabilities {:?} vs {} targets", self.shape(), targets.len()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::invalid("nll_loss", "empty batch"));
        }
        let k = self.shape()[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid("nll_loss", format!("target {bad} outside [0, {k})")));
        }
        let x = self.data();
        // accumulated in f64 so large batches do not drift in f32
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(n, &t)| Scalar::to_f64(x[n * k + t]))
            .sum();
        let loss = T::from_f64(-total / targets.len() as f64);
        drop(x);
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            NllBackward {
                input: self.clone(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Cross-entropy of raw `(N, K)` logits: `nll_loss(log_softmax(logits))`.
    pub fn log_softmax_nll(&self, targets: &[usize]) -> Result<Tensor<T>> {
        self.log_softmax()?.nll_loss(targets)
    }
}
