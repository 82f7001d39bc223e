use super::{sample_len, GradFn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Mul,
    Add,
}

/// How `b` lines up with `a` in an element-wise op.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` is one sample, repeated across `a`'s leading batch axis.
    PerSample,
}

fn broadcast_rule<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.ndim() >= 1 && &a.shape()[1..] == b.shape() {
        return Ok(Broadcast::PerSample);
    }
    Err(Error::shape(
        op,
        format!(
            "cannot combine {:?} with {:?}; b must match a or one sample of a",
            a.shape(),
            b.shape()
        ),
    ))
}

struct EwiseBackward<T: Scalar> {
    a: Tensor<T>,
    b: Tensor<T>,
    op: EwiseOp,
    broadcast: Broadcast,
}

impl<T: Scalar> GradFn<T> for EwiseBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let inner = self.b.len().max(1);
        match self.op {
            EwiseOp::Add => {
                self.a.accumulate_grad(grad);
                self.b.with_grad_mut(|gb| {
                    for chunk in grad.chunks(inner) {
                        for (g, d) in gb.iter_mut().zip(chunk) {
                            *g = *g + *d;
                        }
                    }
                });
            }
            EwiseOp::Mul => {
                if self.a.requires_grad() {
                    let b = self.b.data();
                    let ga: Vec<T> = match self.broadcast {
                        Broadcast::Same => grad.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect(),
                        Broadcast::PerSample => grad
                            .chunks(inner)
                            .flat_map(|chunk| chunk.iter().zip(b.iter()).map(|(g, b)| *g * *b))
                            .collect(),
                    };
                    drop(b);
                    self.a.accumulate_grad(&ga);
                }
                if self.b.requires_grad() {
                    let a = self.a.data();
                    self.b.with_grad_mut(|gb| {
                        for (g_chunk, a_chunk) in grad.chunks(inner).zip(a.chunks(inner)) {
                            for ((gb, g), a) in gb.iter_mut().zip(g_chunk).zip(a_chunk) {
                                *gb = *gb + *g * *a;
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Element-wise `a op b`.
///
/// `b` either has `a`'s shape or the shape of one sample of `a`, in which
/// case it is applied to every sample along the leading axis.
pub fn ewise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: EwiseOp) -> Result<Tensor<T>> {
    let broadcast = broadcast_rule("ewise", a, b)?;
    let out: Vec<T> = {
        let ad = a.data();
        let bd = b.data();
        let f = |x: T, y: T| match op {
            EwiseOp::Mul => x * y,
            EwiseOp::Add => x + y,
        };
        match broadcast {
            Broadcast::Same => ad.iter().zip(bd.iter()).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::PerSample => {
                let inner = bd.len().max(1);
                let mut out = Vec::with_capacity(ad.len());
                for chunk in ad.chunks(inner) {
                    out.extend(chunk.iter().zip(bd.iter()).map(|(x, y)| f(*x, *y)));
                }
                out
            }
        }
    };
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        EwiseBackward {
            a: a.clone(),
            b: b.clone(),
            op,
            broadcast,
        },
    ))
}

struct SumBackward<T: Scalar> {
    input: Tensor<T>,
    scale: T,
}

impl<T: Scalar> GradFn<T> for SumBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let g = grad[0] * self.scale;
        self.input.with_grad_mut(|gi| gi.iter_mut().for_each(|v| *v = *v + g));
    }
}

struct ScaleBackward<T: Scalar> {
    input: Tensor<T>,
    factor: T,
}

impl<T: Scalar> GradFn<T> for ScaleBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let f = self.factor;
        self.input
            .with_grad_mut(|gi| gi.iter_mut().zip(grad).for_each(|(v, g)| *v = *v + *g * f));
    }
}

struct ReluBackward<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for ReluBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, output: &[T], grad: &[T]) {
        // out > 0 exactly where x > 0; the subgradient at 0 is 0
        self.input.with_grad_mut(|gi| {
            for ((v, g), o) in gi.iter_mut().zip(grad).zip(output) {
                if *o > T::zero() {
                    *v = *v + *g;
                }
            }
        });
    }
}

struct ReshapeBackward<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for ReshapeBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        self.input.accumulate_grad(grad);
    }
}

struct ConcatBackward<T: Scalar> {
    parts: Vec<Tensor<T>>,
}

impl<T: Scalar> GradFn<T> for ConcatBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        self.parts.iter().collect()
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let batch = self.parts[0].shape()[0];
        let out_per_sample: usize = self.parts.iter().map(|p| sample_len(p.shape())).sum();
        let mut offset = 0;
        for part in &self.parts {
            let per = sample_len(part.shape());
            part.with_grad_mut(|gp| {
                for n in 0..batch {
                    let src = &grad[n * out_per_sample + offset..n * out_per_sample + offset + per];
                    for (v, g) in gp[n * per..(n + 1) * per].iter_mut().zip(src) {
                        *v = *v + *g;
                    }
                }
            });
            offset += per;
        }
    }
}

/// Concatenates `(N, Cᵢ, H, W)` tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
    if first.ndim() != 4 {
        return Err(Error::shape(
            "concat_channels",
            format!("expected 4-d input, got {:?}", first.shape()),
        ));
    }
    let (n, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} does not match {:?} outside the channel axis", s, first.shape()),
            ));
        }
    }
    let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * channels * h * w);
    let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for s in 0..n {
        for (p, d) in parts.iter().zip(&datas) {
            let per = sample_len(p.shape());
            out.extend_from_slice(&d[s * per..(s + 1) * per]);
        }
    }
    drop(datas);
    Ok(Tensor::from_op(
        vec![n, channels, h, w],
        out,
        ConcatBackward { parts: parts.to_vec() },
    ))
}

impl<T: Scalar> Tensor<T> {
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ewise(self, other, EwiseOp::Mul)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ewise(self, other, EwiseOp::Add)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op(
            Vec::new(),
            vec![total],
            SumBackward {
                input: self.clone(),
                scale: T::one(),
            },
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64(self.len().max(1) as f64);
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op(
            Vec::new(),
            vec![total / n],
            SumBackward {
                input: self.clone(),
                scale: T::one() / n,
            },
        )
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            ScaleBackward {
                input: self.clone(),
                factor,
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, ReluBackward { input: self.clone() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            ReshapeBackward { input: self.clone() },
        ))
    }

    /// `(N, ...)` → `(N, product(...))`.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let n = *self
            .shape()
            .first()
            .ok_or_else(|| Error::shape("flatten", "cannot flatten a scalar"))?;
        self.reshape(&[n, sample_len(self.shape())])
    }
}
