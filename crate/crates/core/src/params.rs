use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a learnable tensor does, which decides its initialization and
/// optimizer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// `Wx`/`Wy` arrays of an attention head.
    AttentionWeight,
    /// Convolution kernels and classifier matrices.
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct NamedParam<T: Scalar = f32> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> NamedParam<T> {
    pub fn new(name: impl Into<String>, role: ParamRole, tensor: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            role,
            tensor: tensor.clone(),
        }
    }

    pub(crate) fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

/// A non-learnable state vector (running statistics), by name.
pub struct NamedBuffer<'a, T: Scalar = f32> {
    pub name: String,
    pub values: &'a mut Vec<T>,
}
