//! Element-wise attention: heads and the multi-head layer.
//!
//! A head owns two learnable arrays shaped like one input sample. The
//! input is multiplied element-wise by each array; the first product is
//! softmax-normalized along rows, the second along columns. Their
//! element-wise product is a relevance map in `(0, 1)` which, after an
//! affine-free batch normalization, modulates the input.
//!
//! ```text
//!   Px = I ⊙ Wx      Ox = softmax_rows(Px)
//!   Py = I ⊙ Wy      Oy = softmax_cols(Py)
//!   R  = Ox ⊙ Oy     out = BN(R) ⊙ I
//! ```
//!
//! A layer concatenates its heads on the channel axis, folds them back to
//! the input channel count with a 3×3 convolution, adds the layer input
//! (skip connection), optionally batch-normalizes, and applies ReLU.

use crate::error::{Error, Result};
use crate::params::{NamedBuffer, NamedParam, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, BatchNorm, Mode, SoftmaxAxis, Tensor};

/// `(channels, height, width)` of one sample.
pub type SampleShape = [usize; 3];

fn check_input<T: Scalar>(op: &'static str, input: &Tensor<T>, shape: SampleShape) -> Result<()> {
    let s = input.shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(Error::shape(
            op,
            format!("expected (N, {}, {}, {}), got {s:?}", shape[0], shape[1], shape[2]),
        ));
    }
    Ok(())
}

/// One attention head.
#[derive(Debug, Clone)]
pub struct AttnHead<T: Scalar = f32> {
    /// Row-path weights, broadcast over the batch.
    pub wx: Tensor<T>,
    /// Column-path weights, broadcast over the batch.
    pub wy: Tensor<T>,
    /// Affine-free normalizer of the relevance map.
    pub inner_norm: BatchNorm<T>,
    shape: SampleShape,
}

/// Every intermediate of one head's forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub x_product: Tensor<T>,
    pub row_softmax: Tensor<T>,
    pub y_product: Tensor<T>,
    pub col_softmax: Tensor<T>,
    /// `row_softmax ⊙ col_softmax`, before normalization.
    pub relevance: Tensor<T>,
    pub normalized_relevance: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> AttnHead<T> {
    /// A head with all-zero weights.
    pub fn new(shape: SampleShape) -> Self {
        let n: usize = shape.iter().product();
        Self {
            wx: Tensor::parameter(&shape, vec![T::zero(); n]).expect("shape"),
            wy: Tensor::parameter(&shape, vec![T::zero(); n]).expect("shape"),
            inner_norm: BatchNorm::new(shape[0], false),
            shape,
        }
    }

    pub fn sample_shape(&self) -> SampleShape {
        self.shape
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_traced(input, mode)?.output)
    }

    pub fn forward_traced(&mut self, input: &Tensor<T>, mode: Mode) -> Result<HeadTrace<T>> {
        check_input("head_forward", input, self.shape)?;
        let x_product = input.mul(&self.wx)?;
        let row_softmax = x_product.softmax_axis(SoftmaxAxis::Rows)?;
        let y_product = input.mul(&self.wy)?;
        let col_softmax = y_product.softmax_axis(SoftmaxAxis::Cols)?;
        let relevance = row_softmax.mul(&col_softmax)?;
        let normalized_relevance = self.inner_norm.forward(&relevance, mode)?;
        let output = normalized_relevance.mul(input)?;
        Ok(HeadTrace {
            input: input.clone(),
            x_product,
            row_softmax,
            y_product,
            col_softmax,
            relevance,
            normalized_relevance,
            output,
        })
    }

    pub fn parameters(&self) -> Vec<NamedParam<T>> {
        vec![
            NamedParam::new("wx", ParamRole::AttentionWeight, &self.wx),
            NamedParam::new("wy", ParamRole::AttentionWeight, &self.wy),
        ]
    }
}

/// Multi-head element-wise attention layer. Output shape equals input shape.
#[derive(Debug, Clone)]
pub struct AttnWiseLayer<T: Scalar = f32> {
    pub heads: Vec<AttnHead<T>>,
    /// `(C, n_heads·C, 3, 3)` recomposition kernel.
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub post_norm: Option<BatchNorm<T>>,
    pub use_skip: bool,
    shape: SampleShape,
}

/// Stage outputs of one layer, in the order they are computed.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Scalar = f32> {
    /// Concatenated head outputs, `n_heads·C` channels.
    pub before_conv: Tensor<T>,
    pub after_conv: Tensor<T>,
    /// Convolution output plus skip connection.
    pub before_norm: Tensor<T>,
    /// `None` when the layer has no post-convolution normalizer.
    pub after_norm: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

pub const RECOMPOSE_KERNEL: usize = 3;

impl<T: Scalar> AttnWiseLayer<T> {
    pub fn new(shape: SampleShape, n_heads: usize, post_norm: bool, use_skip: bool) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::invalid("AttnWiseLayer::new", "a layer needs at least one head"));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(
                "AttnWiseLayer::new",
                format!("empty sample shape {shape:?}"),
            ));
        }
        let c = shape[0];
        let k = RECOMPOSE_KERNEL;
        let wshape = [c, n_heads * c, k, k];
        Ok(Self {
            heads: (0..n_heads).map(|_| AttnHead::new(shape)).collect(),
            conv_weight: Tensor::parameter(&wshape, vec![T::zero(); wshape.iter().product()])?,
            conv_bias: Tensor::parameter(&[c], vec![T::zero(); c])?,
            post_norm: post_norm.then(|| BatchNorm::new(c, true)),
            use_skip,
            shape,
        })
    }

    pub fn sample_shape(&self) -> SampleShape {
        self.shape
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_traced(input, mode)?.output)
    }

    pub fn forward_traced(&mut self, input: &Tensor<T>, mode: Mode) -> Result<LayerTrace<T>> {
        check_input("layer_forward", input, self.shape)?;
        let head_outputs = self
            .heads
            .iter_mut()
            .map(|h| h.forward(input, mode))
            .collect::<Result<Vec<_>>>()?;
        let before_conv = concat_channels(&head_outputs)?;
        drop(head_outputs);
        let pad = RECOMPOSE_KERNEL / 2;
        let after_conv = before_conv.conv2d(&self.conv_weight, Some(&self.conv_bias), 1, pad)?;
        let before_norm = if self.use_skip {
            after_conv.add(input)?
        } else {
            after_conv.clone()
        };
        let after_norm = match &mut self.post_norm {
            Some(norm) => Some(norm.forward(&before_norm, mode)?),
            None => None,
        };
        let output = after_norm.as_ref().unwrap_or(&before_norm).relu();
        Ok(LayerTrace {
            before_conv,
            after_conv,
            before_norm,
            after_norm,
            output,
        })
    }

    pub fn parameters(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        for (i, head) in self.heads.iter().enumerate() {
            out.extend(head.parameters().into_iter().map(|p| p.prefixed(&format!("heads.{i}"))));
        }
        out.push(NamedParam::new("conv.weight", ParamRole::Weight, &self.conv_weight));
        out.push(NamedParam::new("conv.bias", ParamRole::Bias, &self.conv_bias));
        if let Some(norm) = &self.post_norm {
            out.push(NamedParam::new(
                "norm.gamma",
                ParamRole::NormScale,
                norm.gamma().expect("affine"),
            ));
            out.push(NamedParam::new(
                "norm.beta",
                ParamRole::NormShift,
                norm.beta().expect("affine"),
            ));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<NamedBuffer<'_, T>> {
        let mut out = Vec::new();
        for (i, head) in self.heads.iter_mut().enumerate() {
            let norm = &mut head.inner_norm;
            out.push(NamedBuffer {
                name: format!("heads.{i}.norm.running_mean"),
                values: &mut norm.running_mean,
            });
            out.push(NamedBuffer {
                name: format!("heads.{i}.norm.running_var"),
                values: &mut norm.running_var,
            });
        }
        if let Some(norm) = &mut self.post_norm {
            out.push(NamedBuffer {
                name: "norm.running_mean".into(),
                values: &mut norm.running_mean,
            });
            out.push(NamedBuffer {
                name: "norm.running_var".into(),
                values: &mut norm.running_var,
            });
        }
        out
    }
}

/// Learnable values of one layer: two arrays per head, the recomposition
/// convolution with its bias, and an affine normalizer when present.
pub fn attn_layer_param_count(channels: usize, height: usize, width: usize, n_heads: usize, post_norm: bool) -> usize {
    let arrays = channels * height * width * 2 * n_heads;
    let conv = (n_heads * channels) * channels * RECOMPOSE_KERNEL * RECOMPOSE_KERNEL + channels;
    let norm = if post_norm { 2 * channels } else { 0 };
    arrays + conv + norm
}
