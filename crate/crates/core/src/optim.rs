//! Parameter initialization, parameter groups and Adam.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::{NamedParam, ParamRole};
use crate::scalar::Scalar;

pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_ATTN_LR: f64 = 0.1;

/// Gaussian initialization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Standard deviation for attention arrays, and for dense weights unless
    /// `dense_std` overrides it.
    pub std: f64,
    /// Standard deviation for convolution and classifier kernels.
    pub dense_std: Option<f64>,
    pub seed: u64,
}

impl InitConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            std: DEFAULT_INIT_STD,
            dense_std: None,
            seed,
        }
    }
}

/// Draws every non-bias weight from `N(0, std²)` using ChaCha8 and the
/// ziggurat normal sampler, in registry order. Biases and norm shifts become
/// 0, norm scales 1, running statistics `(0, 1)`.
pub fn init_params<T: Scalar>(model: &mut Model<T>, cfg: &InitConfig) -> Result<()> {
    let attn = Normal::new(0.0, cfg.std).map_err(|e| Error::Config(format!("init std {}: {e}", cfg.std)))?;
    let dense_std = cfg.dense_std.unwrap_or(cfg.std);
    let dense = Normal::new(0.0, dense_std).map_err(|e| Error::Config(format!("init std {dense_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for p in model.parameters() {
        let mut data = p.tensor.data_mut();
        match p.role {
            ParamRole::AttentionWeight => data.iter_mut().for_each(|v| *v = T::from_f64(attn.sample(&mut rng))),
            ParamRole::Weight => data.iter_mut().for_each(|v| *v = T::from_f64(dense.sample(&mut rng))),
            ParamRole::Bias | ParamRole::NormShift => data.fill(T::zero()),
            ParamRole::NormScale => data.fill(T::one()),
        }
        drop(data);
        p.tensor.zero_grad();
    }
    for b in model.buffers_mut() {
        let fill = if b.name.ends_with("running_var") {
            T::one()
        } else {
            T::zero()
        };
        b.values.fill(fill);
    }
    Ok(())
}

/// Parameters sharing one set of Adam hyperparameters.
#[derive(Debug, Clone)]
pub struct ParamGroup<T: Scalar = f32> {
    pub name: String,
    pub params: Vec<NamedParam<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>, params: Vec<NamedParam<T>>, lr: f64) -> Self {
        Self {
            name: name.into(),
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerMode {
    /// One group for the whole registry.
    Single { lr: f64 },
    /// Attention arrays in one group, everything else in another.
    Segregated { attn_lr: f64, lr: f64 },
}

impl Default for OptimizerMode {
    fn default() -> Self {
        OptimizerMode::Single { lr: DEFAULT_LR }
    }
}

pub fn partition_params<T: Scalar>(params: Vec<NamedParam<T>>, mode: OptimizerMode) -> Vec<ParamGroup<T>> {
    match mode {
        OptimizerMode::Single { lr } => vec![ParamGroup::new("all", params, lr)],
        OptimizerMode::Segregated { attn_lr, lr } => {
            let (attn, rest): (Vec<_>, Vec<_>) = params.into_iter().partition(|p| p.role == ParamRole::AttentionWeight);
            vec![
                ParamGroup::new("attention", attn, attn_lr),
                ParamGroup::new("remainder", rest, lr),
            ]
        }
    }
}

/// Adam with bias correction and a step counter shared by all groups.
#[derive(Debug, Default)]
pub struct Adam<T: Scalar = f32> {
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers of a parameter, once it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter holding a gradient. Parameters
    /// without a gradient are skipped. A non-finite gradient anywhere aborts
    /// the step before any parameter changes.
    pub fn step(&mut self, groups: &[ParamGroup<T>]) -> Result<()> {
        for g in groups {
            for p in &g.params {
                if let Some(grad) = p.tensor.grad() {
                    if grad.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            what: format!("gradient of {}", p.name),
                        });
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for g in groups {
            let bc1 = 1.0 - g.beta1.powi(t);
            let bc2_sqrt = (1.0 - g.beta2.powi(t)).sqrt();
            let (b1, b2) = (T::from_f64(g.beta1), T::from_f64(g.beta2));
            let (one_b1, one_b2) = (T::from_f64(1.0 - g.beta1), T::from_f64(1.0 - g.beta2));
            let step_size = T::from_f64(g.lr / bc1);
            let bc2_sqrt = T::from_f64(bc2_sqrt);
            let eps = T::from_f64(g.eps);
            for p in &g.params {
                let Some(grad) = p.tensor.grad() else { continue };
                let (m, v) = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
                let mut data = p.tensor.data_mut();
                for i in 0..data.len() {
                    let gi = grad[i];
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    data[i] = data[i] - step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::tensor::Tensor;

    fn scalar_param(value: f64, grad: f64) -> NamedParam<f64> {
        let t = Tensor::parameter(&[1], vec![value]).unwrap();
        t.accumulate_grad(&[grad]);
        NamedParam::new("p", ParamRole::Weight, &t)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = scalar_param(0.5, 1.0);
        let mut adam = Adam::new();
        adam.step(&[ParamGroup::new("g", vec![p.clone()], 1e-3)]).unwrap();
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.tensor.to_vec()[0] - want).abs() < 1e-15);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let p = scalar_param(0.25, 0.0);
        let mut adam = Adam::new();
        let groups = [ParamGroup::new("g", vec![p.clone()], 1e-3)];
        for _ in 0..5 {
            adam.step(&groups).unwrap();
        }
        assert_eq!(p.tensor.to_vec(), vec![0.25]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let good = scalar_param(1.0, 1.0);
        let bad = scalar_param(1.0, f64::NAN);
        let mut adam = Adam::new();
        let err = adam.step(&[ParamGroup::new("g", vec![good.clone(), bad], 1e-3)]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(good.tensor.to_vec(), vec![1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn partition_of_config_b() {
        let model = Model::<f32>::build(&ModelSpec::preset("attn-B").unwrap()).unwrap();
        let groups = partition_params(model.parameters(), OptimizerMode::Segregated { attn_lr: 0.1, lr: 1e-3 });
        assert_eq!(groups[0].params.len(), 32);
        assert_eq!(groups[1].params.len(), 6);
        let control = Model::<f32>::build(&ModelSpec::preset("control-fmnist").unwrap()).unwrap();
        let groups = partition_params(
            control.parameters(),
            OptimizerMode::Segregated { attn_lr: 0.1, lr: 1e-3 },
        );
        assert!(groups[0].params.is_empty());
        assert_eq!(groups[1].params.len(), control.parameters().len());
    }

    #[test]
    fn init_statistics_and_biases() {
        let mut model = Model::<f32>::build(&ModelSpec::preset("control-fmnist").unwrap()).unwrap();
        init_params(&mut model, &InitConfig::new(7)).unwrap();
        let mut weights = Vec::new();
        for p in model.parameters() {
            match p.role {
                ParamRole::Bias => assert!(p.tensor.to_vec().iter().all(|v| *v == 0.0), "{}", p.name),
                _ => weights.extend(p.tensor.to_vec().into_iter().map(f64::from)),
            }
        }
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002 && (0.018..0.022).contains(&std), "{mean} {std}");
    }

    #[test]
    fn init_is_deterministic_and_resets_norms() {
        let spec = ModelSpec::preset("attn-A").unwrap();
        let mut a = Model::<f32>::build(&spec).unwrap();
        let mut b = Model::<f32>::build(&spec).unwrap();
        for buf in b.buffers_mut() {
            buf.values.fill(3.0);
        }
        init_params(&mut a, &InitConfig::new(11)).unwrap();
        init_params(&mut b, &InitConfig::new(11)).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec());
            if pa.role == ParamRole::NormScale {
                assert!(pa.tensor.to_vec().iter().all(|v| *v == 1.0));
            }
        }
        for buf in b.buffers_mut() {
            let want = if buf.name.ends_with("var") { 1.0 } else { 0.0 };
            assert!(buf.values.iter().all(|v| *v == want));
        }
    }
}
