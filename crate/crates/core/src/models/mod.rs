//! Control and attention model builders with a named parameter registry.

mod checkpoint;
mod spec;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, Record, RecordKind,
};
pub(crate) use spec::{parse_bool, parse_num};
pub use spec::{parse_kv, Architecture, ModelSpec, CIFAR10_SHAPE, FASHION_MNIST_SHAPE, NUM_CLASSES, PRESET_IDS};

use crate::attention::{AttnWiseLayer, HeadTrace, LayerTrace};
use crate::error::{Error, Result};
use crate::params::{NamedBuffer, NamedParam, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tensor};

/// One convolution of the control network, always followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub enum Body<T: Scalar = f32> {
    Control(Vec<ConvBlock<T>>),
    Attention(Vec<AttnWiseLayer<T>>),
}

/// A realized [`ModelSpec`]: feature extractor plus a linear classifier.
///
/// All tensors start at zero; see `optim::init_params`.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    pub body: Body<T>,
    /// `(features, 10)`.
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

/// Parameter total with a per-layer breakdown, in registry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_layer: Vec<(String, usize)>,
}

/// Intermediate tensors of a forward pass through an attention model.
#[derive(Debug, Clone)]
pub struct ModelTrace<T: Scalar = f32> {
    pub first_head: HeadTrace<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub log_probs: Tensor<T>,
}

fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::parameter(shape, vec![T::zero(); shape.iter().product()]).expect("shape matches data")
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let body = match spec.arch {
            Architecture::Control { .. } => Body::Control(
                spec.control_convs()
                    .into_iter()
                    .map(|(i, o, k, stride, padding, bias)| ConvBlock {
                        weight: zeros_param(&[o, i, k, k]),
                        bias: bias.then(|| zeros_param(&[o])),
                        stride,
                        padding,
                    })
                    .collect(),
            ),
            Architecture::Attention {
                layers,
                heads,
                post_norm,
                skip,
            } => Body::Attention(
                (0..layers)
                    .map(|_| AttnWiseLayer::new(spec.input, heads, post_norm, skip))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            spec: *spec,
            body,
            classifier_weight: zeros_param(&[spec.classifier_inputs(), NUM_CLASSES]),
            classifier_bias: zeros_param(&[NUM_CLASSES]),
        })
    }

    pub fn build_control(input: [usize; 3], scale_divisor: usize) -> Result<Self> {
        Self::build(&ModelSpec::control(input, scale_divisor))
    }

    pub fn build_attention(spec: &ModelSpec) -> Result<Self> {
        if !spec.is_attention() {
            return Err(Error::Config("build_attention needs an attention spec".into()));
        }
        Self::build(spec)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Every learnable tensor exactly once, under a stable unique name.
    pub fn parameters(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        match &self.body {
            Body::Control(convs) => {
                for (i, c) in convs.iter().enumerate() {
                    out.push(NamedParam::new(
                        format!("convs.{i}.weight"),
                        ParamRole::Weight,
                        &c.weight,
                    ));
                    if let Some(b) = &c.bias {
                        out.push(NamedParam::new(format!("convs.{i}.bias"), ParamRole::Bias, b));
                    }
                }
            }
            Body::Attention(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.extend(l.parameters().into_iter().map(|p| p.prefixed(&format!("layers.{i}"))));
                }
            }
        }
        out.push(NamedParam::new(
            "classifier.weight",
            ParamRole::Weight,
            &self.classifier_weight,
        ));
        out.push(NamedParam::new(
            "classifier.bias",
            ParamRole::Bias,
            &self.classifier_bias,
        ));
        out
    }

    /// Running statistics of every normalizer.
    pub fn buffers_mut(&mut self) -> Vec<NamedBuffer<'_, T>> {
        let mut out = Vec::new();
        if let Body::Attention(layers) = &mut self.body {
            for (i, l) in layers.iter_mut().enumerate() {
                for mut b in l.buffers_mut() {
                    b.name = format!("layers.{i}.{}", b.name);
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn count_params(&self) -> ParamCount {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for p in self.parameters() {
            let group = layer_group(&p.name);
            let n = p.tensor.len();
            match per_layer.last_mut() {
                Some((g, total)) if *g == group => *total += n,
                _ => per_layer.push((group, n)),
            }
        }
        ParamCount {
            total: count_params(&self.parameters()),
            per_layer,
        }
    }

    /// The tensor whose gradient is tracked as the first-layer signal: the
    /// first convolution kernel of the control model, or `Wx` of the first
    /// head of the first attention layer.
    pub fn first_layer_weight(&self) -> &Tensor<T> {
        match &self.body {
            Body::Control(convs) => &convs[0].weight,
            Body::Attention(layers) => &layers[0].heads[0].wx,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input || s[0] == 0 {
            return Err(Error::shape(
                "model_forward",
                format!("expected (N>0, {:?}), got {s:?}", self.spec.input),
            ));
        }
        Ok(())
    }

    fn classify(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        features
            .flatten()?
            .linear(&self.classifier_weight, Some(&self.classifier_bias))?
            .log_softmax()
    }

    /// Per-class log-probabilities, shape `(N, 10)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        match &mut self.body {
            Body::Control(convs) => {
                for c in convs.iter() {
                    h = h.conv2d(&c.weight, c.bias.as_ref(), c.stride, c.padding)?.relu();
                }
            }
            Body::Attention(layers) => {
                for l in layers.iter_mut() {
                    h = l.forward(&h, mode)?;
                }
            }
        }
        self.classify(&h)
    }

    /// Forward pass keeping every stage. Attention models only. Normalizers
    /// are evaluated with running statistics so the pass has no side effects.
    pub fn forward_traced(&mut self, x: &Tensor<T>) -> Result<ModelTrace<T>> {
        self.check_input(x)?;
        let Body::Attention(layers) = &mut self.body else {
            return Err(Error::Config("activation traces need an attention model".into()));
        };
        let first_head = layers[0].heads[0].forward_traced(x, Mode::Eval)?;
        let mut traces = Vec::with_capacity(layers.len());
        let mut h = x.clone();
        for l in layers.iter_mut() {
            let t = l.forward_traced(&h, Mode::Eval)?;
            h = t.output.clone();
            traces.push(t);
        }
        let log_probs = self.classify(&h)?;
        Ok(ModelTrace {
            first_head,
            layers: traces,
            log_probs,
        })
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.tensor.zero_grad();
        }
    }
}

/// Total element count of a parameter list.
pub fn count_params<T: Scalar>(params: &[NamedParam<T>]) -> usize {
    params.iter().map(|p| p.tensor.len()).sum()
}

/// `layers.0.heads.3.wx` → `layers.0`; `classifier.bias` → `classifier`.
fn layer_group(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    match parts.next() {
        Some(idx) if idx.chars().all(|c| c.is_ascii_digit()) => format!("{head}.{idx}"),
        _ => head.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_names_are_unique_and_cover_counts() {
        for id in PRESET_IDS {
            let spec = ModelSpec::preset(id).unwrap();
            let model = Model::<f32>::build(&spec).unwrap();
            let params = model.parameters();
            let names: HashSet<_> = params.iter().map(|p| p.name.clone()).collect();
            assert_eq!(names.len(), params.len(), "{id}");
            let count = model.count_params();
            assert_eq!(count.total, spec.analytic_param_count(), "{id}");
            assert_eq!(count.per_layer.iter().map(|(_, n)| n).sum::<usize>(), count.total);
        }
    }

    #[test]
    fn empty_registry_counts_zero() {
        assert_eq!(count_params::<f32>(&[]), 0);
    }

    #[test]
    fn single_head_post_norm_count() {
        let m = Model::<f32>::build(&ModelSpec::preset("attn-1head").unwrap()).unwrap();
        let c = m.count_params();
        assert_eq!(c.total, 11_010);
        assert_eq!(c.per_layer[0], ("layers.0".into(), 1580));
        assert_eq!(c.per_layer[2], ("classifier".into(), 7850));
    }

    #[test]
    fn control_breakdown_has_seven_groups() {
        let m = Model::<f32>::build_control([1, 28, 28], 4).unwrap();
        let c = m.count_params();
        assert_eq!(c.per_layer.len(), 7);
        assert_eq!(c.per_layer[2].1, 25 * 25 * 4);
        assert_eq!(c.per_layer[6].1, 50 * 7 * 7 * 10 + 10);
    }

    #[test]
    fn build_attention_rejects_control_spec() {
        assert!(Model::<f32>::build_attention(&ModelSpec::control([1, 28, 28], 1)).is_err());
        assert!(Model::<f32>::build(&ModelSpec::attention([1, 28, 28], 0, 8, false)).is_err());
    }

    #[test]
    fn zero_model_outputs_uniform_log_probs() {
        let mut m = Model::<f64>::build(&ModelSpec::attention([1, 4, 4], 1, 2, true)).unwrap();
        let x = Tensor::new(&[3, 1, 4, 4], (0..48).map(|v| v as f64 / 10.0).collect()).unwrap();
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.shape(), &[3, 10]);
        for v in out.to_vec() {
            assert!((v + 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let mut m = Model::<f32>::build_control([1, 8, 8], 4).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 1, 8, 4]), Mode::Eval).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 1, 8, 8]), Mode::Eval).is_ok());
    }
}
