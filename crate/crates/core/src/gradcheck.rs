//! Finite-difference checks of the graph's analytic gradients.
//!
//! The oracles here evaluate forward values only; they never call the
//! backward machinery they are checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::layers::{self, ChannelStyle, SpatialStyle};
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Relative error bound for first-order checks in 64-bit.
pub const FIRST_ORDER_TOL: f64 = 1e-4;
/// Relative error bound for double-backward checks against nested differences.
pub const SECOND_ORDER_TOL: f64 = 1e-3;
/// Central-difference step for first-order checks.
pub const FD_EPS: f64 = 1e-5;
/// Second-order points are redrawn until every kinked pre-activation is at
/// least this far from its kink, so no difference stencil straddles it.
pub const KINK_MARGIN: f64 = 0.05;

/// Builds a scalar from leaf inputs inside a graph.
pub trait ScalarFn: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}
impl<F> ScalarFn for F where F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub order: u8,
    pub points: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

fn forward_value<F: ScalarFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(f(&g, &vars)?.value().item())
}

fn perturbed(inputs: &[Tensor], which: usize, idx: usize, delta: f64) -> Vec<Tensor> {
    let mut out = inputs.to_vec();
    let mut d = out[which].to_vec();
    d[idx] += delta;
    out[which] = Tensor::from_vec(inputs[which].shape(), d).expect("same shape");
    out
}

/// Central differences of a scalar function of tensors.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for (idx, slot) in g.iter_mut().enumerate() {
            let up = f(&perturbed(inputs, which, idx, eps))?;
            let down = f(&perturbed(inputs, which, idx, -eps))?;
            *slot = (up - down) / (2.0 * eps);
        }
        grads.push(Tensor::from_vec(t.shape(), g)?);
    }
    Ok(grads)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all tensors jointly.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale < 1e-300 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Analytic gradient of `f` at `inputs`.
pub fn analytic_gradient<F: ScalarFn>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&g, &vars)?;
    g.backward(y, &vars)
}

/// Relative error between the analytic gradient and central differences.
pub fn check_first_order<F: ScalarFn>(f: &F, inputs: &[Tensor], eps: f64) -> Result<f64> {
    let analytic = analytic_gradient(f, inputs)?;
    let numeric = central_difference(&|x| forward_value(f, x), inputs, eps)?;
    Ok(relative_error(&analytic, &numeric))
}

/// Checks the gradient of `‖∂inner/∂inputs[wrt]‖²` (built by double
/// backward) against nested central differences: the inner gradient is
/// itself taken by finite differences of forward values.
pub fn check_second_order<F: ScalarFn>(
    inner: &F,
    inputs: &[Tensor],
    wrt: usize,
    eps_inner: f64,
    eps_outer: f64,
) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = inner(&g, &vars)?;
    let penalty = g.grad_norm_sq(y, vars[wrt])?;
    let analytic = g.backward(penalty, &vars)?;

    let outer = |x: &[Tensor]| -> Result<f64> {
        let mut sq = 0.0;
        let t = &x[wrt];
        for idx in 0..t.numel() {
            let up = forward_value(inner, &perturbed(x, wrt, idx, eps_inner))?;
            let down = forward_value(inner, &perturbed(x, wrt, idx, -eps_inner))?;
            let d = (up - down) / (2.0 * eps_inner);
            sq += d * d;
        }
        Ok(sq)
    };
    let numeric = central_difference(&outer, inputs, eps_outer)?;
    Ok(relative_error(&analytic, &numeric))
}

/// Kind of random input a suite needs.
#[derive(Clone, Copy, Debug)]
enum Draw {
    Normal,
    /// Standard normal pushed away from zero, for kinked ops.
    AwayFromZero,
    /// Uniform in `[0.5, 2]`.
    Positive,
}

fn draw(shape: &[usize], kind: Draw, rng: &mut ChaCha8Rng) -> Tensor {
    match kind {
        Draw::Normal => Tensor::randn(shape, rng),
        Draw::AwayFromZero => {
            Tensor::randn(shape, rng).map(|x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x })
        }
        Draw::Positive => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            Tensor::from_vec(shape, data).expect("length matches shape")
        }
    }
}

/// Weighted sum `Σ out ⊙ r` with a fixed pseudo-random `r`, so every
/// output element gets a distinct cotangent.
fn probe<'g>(out: Var<'g>) -> Result<Var<'g>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7548776662).fract() - 0.5) * 2.0 + 0.1).collect();
    Ok(out.mul_const(&Tensor::from_vec(&shape, r)?)?.sum())
}

type Builder = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

fn first_order_suites() -> Vec<(&'static str, Vec<(Vec<usize>, Draw)>, Builder)> {
    use Draw::*;
    let nchw = vec![2, 3, 4, 4];
    vec![
        ("add_broadcast", vec![(nchw.clone(), Normal), (vec![1, 3, 1, 1], Normal)], |_, v| probe(v[0].add(v[1])?)),
        ("sub_broadcast", vec![(nchw.clone(), Normal), (vec![1, 3, 4, 4], Normal)], |_, v| probe(v[0].sub(v[1])?)),
        ("mul_broadcast", vec![(nchw.clone(), Normal), (vec![1, 3, 4, 4], Normal)], |_, v| probe(v[0].mul(v[1])?)),
        ("div_broadcast", vec![(nchw.clone(), Normal), (vec![2, 3, 1, 1], Positive)], |_, v| probe(v[0].div(v[1])?)),
        ("affine", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].affine(-1.3, 0.4))),
        ("square", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].square())),
        ("sqrt", vec![(nchw.clone(), Positive)], |_, v| probe(v[0].sqrt())),
        ("abs", vec![(nchw.clone(), AwayFromZero)], |_, v| probe(v[0].abs())),
        ("tanh", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].tanh())),
        ("sigmoid", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].sigmoid())),
        ("softplus", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].softplus())),
        ("leaky_relu", vec![(nchw.clone(), AwayFromZero)], |_, v| probe(v[0].leaky_relu(0.2))),
        ("clamp_min", vec![(nchw.clone(), AwayFromZero)], |_, v| probe(v[0].clamp_min(0.0))),
        ("sum_axes", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].sum_axes(&[0, 2])?)),
        ("mean_axes", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].mean_axes(&[2, 3])?)),
        ("broadcast_to", vec![(vec![1, 3, 1, 4], Normal)], |_, v| probe(v[0].broadcast_to(&[2, 3, 4, 4])?)),
        ("reshape", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].reshape(&[6, 16])?)),
        ("upsample_nearest_2x", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].upsample_nearest_2x()?)),
        ("downsample_avg_2x", vec![(nchw.clone(), Normal)], |_, v| probe(v[0].downsample_avg_2x()?)),
        ("conv2d_zero", vec![(vec![2, 3, 5, 5], Normal), (vec![4, 3, 3, 3], Normal)], |_, v| {
            probe(v[0].conv2d(v[1], Padding::Zero)?)
        }),
        ("conv2d_circular", vec![(vec![2, 3, 5, 4], Normal), (vec![2, 3, 3, 3], Normal)], |_, v| {
            probe(v[0].conv2d(v[1], Padding::Circular)?)
        }),
        ("conv2d_1x1", vec![(vec![2, 3, 4, 4], Normal), (vec![5, 3, 1, 1], Normal)], |_, v| {
            probe(v[0].conv2d(v[1], Padding::Zero)?)
        }),
        ("spade", vec![(nchw.clone(), Normal), (vec![1, 3, 4, 4], Positive), (vec![1, 3, 4, 4], Normal)], |_, v| {
            probe(layers::spade(v[0], SpatialStyle { scale: v[1], bias: Some(v[2]) })?.out)
        }),
        ("adain", vec![(nchw.clone(), Normal), (vec![2, 3, 1, 1], Positive), (vec![2, 3, 1, 1], Normal)], |_, v| {
            probe(layers::adain(v[0], ChannelStyle { scale: v[1], bias: Some(v[2]) })?.out)
        }),
        ("modulated_conv", vec![(nchw.clone(), Normal), (vec![2, 3, 1, 1], Positive), (vec![2, 3, 3, 3], Normal)], |_, v| {
            probe(layers::modulated_conv(v[0], ChannelStyle { scale: v[1], bias: None }, v[2], Padding::Zero)?.out)
        }),
        ("spatially_modulated_conv", vec![(nchw.clone(), Normal), (vec![2, 3, 4, 4], Positive), (vec![2, 3, 3, 3], Normal)], |_, v| {
            probe(layers::spatially_modulated_conv(v[0], SpatialStyle { scale: v[1], bias: None }, v[2], Padding::Zero)?.out)
        }),
        ("spatially_modulated_conv_circular", vec![(nchw, Normal), (vec![1, 3, 4, 4], Positive), (vec![2, 3, 3, 3], Normal)], |_, v| {
            probe(layers::spatially_modulated_conv(v[0], SpatialStyle { scale: v[1], bias: None }, v[2], Padding::Circular)?.out)
        }),
        ("positive_style", vec![(vec![1, 3, 2, 2], AwayFromZero)], |_, v| probe(layers::positive_style(v[0]))),
    ]
}

/// Smallest distance from a kink over the suite's kinked pre-activations.
type Margin = fn(&[Tensor]) -> Result<f64>;

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// Small networks whose input-gradient norm is differentiated again.
/// The first input is the one the inner gradient is taken against.
fn second_order_suites() -> Vec<(&'static str, Vec<(Vec<usize>, Draw)>, Builder, Option<Margin>)> {
    use Draw::*;
    vec![
        ("r1_conv_leaky", vec![(vec![2, 2, 4, 4], Normal), (vec![3, 2, 3, 3], Normal), (vec![1, 3, 3, 3], Normal), (vec![1, 3, 1, 1], Normal)], |_, v| {
            let h = v[0].conv2d(v[1], Padding::Zero)?.add(v[3])?.leaky_relu(0.2);
            let y = h.conv2d(v[2], Padding::Zero)?.square();
            probe(y)
        },
        Some(|v| Ok(min_abs(&v[0].conv2d(&v[1], Padding::Zero)?.add(&v[3])?)))),
        ("spatial_mod_conv", vec![(vec![1, 2, 4, 4], Normal), (vec![1, 2, 4, 4], Positive), (vec![2, 2, 3, 3], Normal)], |_, v| {
            let y = layers::spatially_modulated_conv(v[0], SpatialStyle { scale: v[1], bias: None }, v[2], Padding::Zero)?.out;
            probe(y.tanh())
        }, None),
        ("style_path", vec![(vec![1, 2, 2, 2], AwayFromZero), (vec![2, 2, 1, 1], Normal), (vec![2, 2, 3, 3], Normal), (vec![1, 2, 4, 4], Normal)], |_, v| {
            // latent -> 1x1 style -> upsample -> SMC -> downsample
            let s = layers::positive_style(v[0].conv2d(v[1], Padding::Zero)?.upsample(2)?);
            let y = layers::spatially_modulated_conv(v[3], SpatialStyle { scale: s, bias: None }, v[2], Padding::Zero)?.out;
            probe(y.downsample_avg_2x()?.sigmoid())
        }, Some(|v| Ok(min_abs(&v[0].conv2d(&v[1], Padding::Zero)?)))),
        ("mean_softplus_div", vec![(vec![2, 2, 2, 2], Normal), (vec![1, 2, 1, 1], Positive)], |_, v| {
            let y = v[0].div(v[1])?.softplus().mean_axes(&[2, 3])?;
            probe(y.sqrt())
        }, None),
    ]
}

fn draw_inputs(spec: &[(Vec<usize>, Draw)], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    spec.iter().map(|(s, k)| draw(s, *k, rng)).collect()
}

/// Every first-order suite at `points` random points each.
pub fn run_first_order(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, spec, f) in first_order_suites() {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs = draw_inputs(&spec, &mut rng);
            let e = check_first_order(&f, &inputs, FD_EPS)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        out.push(CheckReport {
            name: name.to_string(),
            order: 1,
            points,
            max_rel_err: worst,
            tol: FIRST_ORDER_TOL,
        });
    }
    Ok(out)
}

/// Every double-backward suite against nested central differences.
pub fn run_second_order(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, spec, f, margin) in second_order_suites() {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let mut inputs = draw_inputs(&spec, &mut rng);
            if let Some(m) = margin {
                let mut tries = 0;
                while m(&inputs)? < KINK_MARGIN {
                    tries += 1;
                    ensure!(tries < 1000, "{name}: no draw clears the kink margin");
                    inputs = draw_inputs(&spec, &mut rng);
                }
            }
            let e = check_second_order(&f, &inputs, 0, 1e-4, 1e-3)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        out.push(CheckReport {
            name: name.to_string(),
            order: 2,
            points,
            max_rel_err: worst,
            tol: SECOND_ORDER_TOL,
        });
    }
    Ok(out)
}

/// Both suites, ten points each.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = run_first_order(seed, 10)?;
    reports.extend(run_second_order(seed.wrapping_add(1), 10)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_first_order_suite_passes() {
        for r in run_first_order(11, 10).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn every_second_order_suite_passes() {
        for r in run_second_order(12, 3).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        fn f<'g>(_: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
            Ok(v[0].abs().sum())
        }
        let x = Tensor::from_vec(&[3], vec![-1.0, 2.0, -3.0]).unwrap();
        let analytic = analytic_gradient(&f, std::slice::from_ref(&x)).unwrap();
        let wrong = vec![x];
        assert!(relative_error(&analytic, &wrong) > 0.5);
    }
}
