//! Central finite-difference checks of the analytic gradients.
//!
//! Everything here runs in `f64`. [`gradcheck`] compares one function's
//! backward pass against perturbation; [`standard_suite`] runs it over every
//! differentiable operation and the composed attention head on small random
//! inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{AttnHead, AttnWiseLayer};
use crate::error::{Error, Result};
use crate::params::ParamRole;
use crate::tensor::{concat_channels, no_grad, BatchNorm, Mode, SoftmaxAxis, Tensor};

/// Below this magnitude, errors are measured relative to the floor instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_element: usize,
    /// First element whose analytic gradient was NaN or infinite.
    pub non_finite: Option<usize>,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Requires every error within tolerance and at least one nonzero
    /// gradient, so a dead function cannot pass vacuously.
    pub fn passed(&self) -> bool {
        !self.vacuous()
            && self
                .params
                .iter()
                .all(|p| p.non_finite.is_none() && p.max_rel_error <= self.tolerance)
    }

    pub fn vacuous(&self) -> bool {
        self.params.iter().all(|p| p.max_abs_grad == 0.0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks ∂f/∂p for every `p` in `params` against central differences.
///
/// `f` must be deterministic in the parameter values and return a scalar.
pub fn gradcheck<F>(mut f: F, params: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_vec().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let _guard = no_grad();
    let eval = |f: &mut F| -> Result<f64> { f()?.item() };
    let mut checks = Vec::with_capacity(params.len());
    for (index, (p, grad)) in params.iter().zip(&analytic).enumerate() {
        let non_finite = grad.iter().position(|g| !g.is_finite());
        let mut max_rel_error: f64 = 0.0;
        let mut worst_element = 0;
        for i in 0..p.len() {
            let original = p.data()[i];
            p.data_mut()[i] = original + step;
            let plus = eval(&mut f);
            p.data_mut()[i] = original - step;
            let minus = eval(&mut f);
            p.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(grad[i], numeric);
            if err > max_rel_error || err.is_nan() {
                max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst_element = i;
            }
        }
        checks.push(ParamCheck {
            index,
            elements: p.len(),
            max_rel_error,
            worst_element,
            non_finite,
            max_abs_grad: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance,
    })
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn normal(&mut self, shape: &[usize], scale: f64) -> Vec<f64> {
        let n = shape.iter().product();
        (0..n)
            .map(|_| self.0.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    }

    fn constant(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(shape, self.normal(shape, 1.0)).expect("shape")
    }

    fn param(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::parameter(shape, self.normal(shape, scale)).expect("shape")
    }

    /// Values bounded away from zero, for inputs to the ReLU kink.
    fn param_off_kink(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mag = self.0.random_range(0.1..1.0);
                if self.0.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::parameter(shape, data).expect("shape")
    }
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(out.mul(r)?.sum())
}

/// One named case of [`standard_suite`].
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Gradient checks for every differentiable operation plus the composed
/// attention head and layer, on inputs of at most 200 elements.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let (h, tol) = (DEFAULT_STEP, DEFAULT_TOLERANCE);
    let mut cases = Vec::new();
    let mut push = |name, report| cases.push(SuiteCase { name, report });

    {
        let (a, b, r) = (
            s.param(&[2, 3, 4], 1.0),
            s.param(&[2, 3, 4], 1.0),
            s.constant(&[2, 3, 4]),
        );
        push(
            "mul",
            gradcheck(|| project(&a.mul(&b)?, &r), &[a.clone(), b.clone()], h, tol)?,
        );
        push(
            "add",
            gradcheck(|| project(&a.add(&b)?, &r), &[a.clone(), b.clone()], h, tol)?,
        );
    }
    {
        let (a, b, r) = (s.param(&[3, 2, 4], 1.0), s.param(&[2, 4], 1.0), s.constant(&[3, 2, 4]));
        push(
            "mul (per-sample broadcast)",
            gradcheck(|| project(&a.mul(&b)?, &r), &[a.clone(), b.clone()], h, tol)?,
        );
    }
    for (name, axis) in [("softmax rows", SoftmaxAxis::Rows), ("softmax cols", SoftmaxAxis::Cols)] {
        let (x, r) = (s.param(&[2, 1, 3, 4], 1.0), s.constant(&[2, 1, 3, 4]));
        push(
            name,
            gradcheck(|| project(&x.softmax_axis(axis)?, &r), std::slice::from_ref(&x), h, tol)?,
        );
    }
    {
        let x = s.param_off_kink(&[4, 25]);
        let r = s.constant(&[4, 25]);
        push(
            "relu",
            gradcheck(|| project(&x.relu(), &r), std::slice::from_ref(&x), h, tol)?,
        );
    }
    for (name, stride, pad, k) in [("conv2d 3x3 pad 1", 1, 1, 3), ("conv2d 2x2 stride 2", 2, 0, 2)] {
        let x = s.param(&[1, 2, 5, 5], 1.0);
        let w = s.param(&[3, 2, k, k], 0.5);
        let b = s.param(&[3], 0.5);
        let out = (5 + 2 * pad - k) / stride + 1;
        let r = s.constant(&[1, 3, out, out]);
        push(
            name,
            gradcheck(
                || project(&x.conv2d(&w, Some(&b), stride, pad)?, &r),
                &[x.clone(), w.clone(), b.clone()],
                h,
                tol,
            )?,
        );
    }
    {
        let (x, w, b) = (s.param(&[3, 8], 1.0), s.param(&[8, 5], 0.5), s.param(&[5], 0.5));
        let r = s.constant(&[3, 5]);
        push(
            "linear",
            gradcheck(
                || project(&x.linear(&w, Some(&b))?, &r),
                &[x.clone(), w.clone(), b.clone()],
                h,
                tol,
            )?,
        );
    }
    {
        let x = s.param(&[4, 6], 2.0);
        let targets = [0, 5, 2, 2];
        push(
            "log_softmax_nll",
            gradcheck(|| x.log_softmax_nll(&targets), std::slice::from_ref(&x), h, tol)?,
        );
    }
    for (name, mode) in [("batchnorm2d train", Mode::Train), ("batchnorm2d eval", Mode::Eval)] {
        let mut bn = BatchNorm::<f64>::new(2, true);
        bn.running_mean = vec![0.3, -0.2];
        bn.running_var = vec![1.5, 0.7];
        bn.gamma().unwrap().data_mut().copy_from_slice(&[1.3, 0.8]);
        bn.beta().unwrap().data_mut().copy_from_slice(&[0.1, -0.4]);
        let params = vec![
            s.param(&[3, 2, 3, 3], 1.0),
            bn.gamma().unwrap().clone(),
            bn.beta().unwrap().clone(),
        ];
        let r = s.constant(&[3, 2, 3, 3]);
        let x = params[0].clone();
        push(
            name,
            gradcheck(|| project(&bn.forward(&x, mode)?, &r), &params, h, tol)?,
        );
    }
    {
        let (a, b) = (s.param(&[2, 1, 2, 3], 1.0), s.param(&[2, 2, 2, 3], 1.0));
        let r = s.constant(&[2, 3, 2, 3]);
        push(
            "concat_channels",
            gradcheck(
                || project(&concat_channels(&[a.clone(), b.clone()])?, &r),
                &[a.clone(), b.clone()],
                h,
                tol,
            )?,
        );
    }
    {
        let x = s.param(&[2, 3, 4], 1.0);
        let r = s.constant(&[2, 12]);
        push(
            "flatten",
            gradcheck(|| project(&x.flatten()?, &r), std::slice::from_ref(&x), h, tol)?,
        );
    }
    {
        let mut head = AttnHead::<f64>::new([1, 4, 4]);
        head.wx.data_mut().copy_from_slice(&s.normal(&[16], 1.0));
        head.wy.data_mut().copy_from_slice(&s.normal(&[16], 1.0));
        let input = s.param(&[2, 1, 4, 4], 1.0);
        let r = s.constant(&[2, 1, 4, 4]);
        let params = vec![input.clone(), head.wx.clone(), head.wy.clone()];
        push(
            "attention head",
            gradcheck(|| project(&head.forward(&input, Mode::Train)?, &r), &params, h, tol)?,
        );
    }
    {
        let mut layer = AttnWiseLayer::<f64>::new([1, 4, 4], 2, true, true)?;
        // resample until no ReLU input sits within reach of its kink
        let input = loop {
            for p in layer.parameters() {
                let n = p.tensor.len();
                let values = match p.role {
                    ParamRole::NormScale => s.normal(&[n], 0.1).iter().map(|v| 1.0 + v).collect(),
                    ParamRole::NormShift => vec![0.2; n],
                    _ => s.normal(&[n], 0.7),
                };
                p.tensor.data_mut().copy_from_slice(&values);
            }
            let input = s.param_off_kink(&[2, 1, 4, 4]);
            let pre_relu = {
                let _guard = no_grad();
                let mut probe = layer.clone();
                probe
                    .forward_traced(&input, Mode::Train)?
                    .after_norm
                    .expect("post-norm layer")
            };
            if pre_relu.data().iter().all(|v| v.abs() > 1e-2) {
                break input;
            }
        };
        let r = s.constant(&[2, 1, 4, 4]);
        let mut params = vec![input.clone()];
        params.extend(layer.parameters().into_iter().map(|p| p.tensor));
        push(
            "attention layer",
            gradcheck(|| project(&layer.forward(&input, Mode::Train)?, &r), &params, h, tol)?,
        );
    }
    Ok(cases)
}

/// Runs [`standard_suite`] and fails with the first offending case.
pub fn check_standard_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let cases = standard_suite(seed)?;
    if let Some(bad) = cases.iter().find(|c| !c.report.passed()) {
        return Err(Error::NonFinite {
            what: format!(
                "gradient check '{}' (max relative error {:.3e})",
                bad.name,
                bad.report.max_rel_error()
            ),
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::parameter(&[5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let report = gradcheck(|| Ok(x.mul(&x)?.sum()), std::slice::from_ref(&x), 1e-3, 1e-8).unwrap();
        assert!(report.passed(), "{:?}", report);
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu has a kink at 0: straddling it with the step gives a 0.5 slope
        let x = Tensor::<f64>::parameter(&[1], vec![0.0]).unwrap();
        let report = gradcheck(|| Ok(x.relu().sum()), std::slice::from_ref(&x), 1e-3, 1e-4).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn flags_non_finite_gradients() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let bad = Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap();
        let report = gradcheck(|| Ok(x.mul(&bad)?.sum()), std::slice::from_ref(&x), 1e-3, 1e-4).unwrap();
        assert_eq!(report.params[0].non_finite, Some(0));
        assert!(!report.passed());
    }

    #[test]
    fn softmax_through_random_projection() {
        let mut s = Sampler(ChaCha8Rng::seed_from_u64(7));
        let x = s.param(&[3, 4], 1.0);
        let r = s.constant(&[3, 4]);
        let report = gradcheck(
            || project(&x.softmax_axis(SoftmaxAxis::Rows)?, &r),
            std::slice::from_ref(&x),
            1e-3,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max error {}", report.max_rel_error());
    }

    #[test]
    fn conv_single_channel_five_by_five() {
        let mut s = Sampler(ChaCha8Rng::seed_from_u64(11));
        let x = s.param(&[1, 1, 5, 5], 1.0);
        let w = s.param(&[1, 1, 3, 3], 1.0);
        let r = s.constant(&[1, 1, 3, 3]);
        let report = gradcheck(
            || project(&x.conv2d(&w, None, 1, 0)?, &r),
            &[x.clone(), w.clone()],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max error {}", report.max_rel_error());
    }

    #[test]
    fn standard_suite_passes() {
        for seed in [1, 2, 3] {
            for case in standard_suite(seed).unwrap() {
                assert!(case.report.passed(), "seed {seed} '{}': {:?}", case.name, case.report);
            }
        }
    }
}
