//! Conditioning layers: SPADE, AdaIN, modulated convolution and spatially
//! modulated convolution.
//!
//! The first two normalize with measured feature statistics. The last two
//! divide by the *expected* output standard deviation `σ_E(w, s)` under
//! unit-variance, zero-mean inputs, computed from weights and styles only.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Result};
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Floor for feature variances and for `σ_E`.
pub const EPS: f64 = 1e-8;

/// Offset added to `|raw|` so styles stay strictly positive.
pub const STYLE_FLOOR: f64 = 1e-4;

/// Multiplicative (and optional additive) style with spatial extent.
#[derive(Clone, Copy, Debug)]
pub struct SpatialStyle<'g> {
    /// `[1|N, C, H, W]`
    pub scale: Var<'g>,
    pub bias: Option<Var<'g>>,
}

/// Per-channel style, `[1|N, C, 1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelStyle<'g> {
    pub scale: Var<'g>,
    pub bias: Option<Var<'g>>,
}

/// Layer output plus the number of statistics that hit the [`EPS`] floor.
#[derive(Clone, Copy, Debug)]
pub struct Normalized<'g> {
    pub out: Var<'g>,
    pub clamped: usize,
}

/// `|raw| + 1e-4`.
pub fn positive_style<'g>(raw: Var<'g>) -> Var<'g> {
    raw.abs().affine(1.0, STYLE_FLOOR)
}

fn count_below(v: &Tensor, floor: f64) -> usize {
    v.data().iter().filter(|&&x| x <= floor).count()
}

fn normalize<'g>(
    h: Var<'g>,
    axes: &[usize],
    scale: Var<'g>,
    bias: Option<Var<'g>>,
) -> Result<Normalized<'g>> {
    let mu = h.mean_axes(axes)?;
    let centered = h.sub(mu)?;
    let var = centered.square().mean_axes(axes)?;
    let floor = EPS * EPS;
    let clamped = count_below(&var.value(), floor);
    let sigma = var.clamp_min(floor).sqrt();
    let mut out = scale.mul(centered.div(sigma)?)?;
    if let Some(b) = bias {
        out = out.add(b)?;
    }
    Ok(Normalized { out, clamped })
}

fn check_rank4(name: &str, v: &Var<'_>) -> Result<Vec<usize>> {
    let s = v.shape();
    ensure!(s.len() == 4, "{name} expects an NCHW tensor, got {:?}", s);
    Ok(s)
}

/// Spatially adaptive normalization: statistics per channel, averaged over
/// the batch and both spatial axes.
pub fn spade<'g>(h: Var<'g>, style: SpatialStyle<'g>) -> Result<Normalized<'g>> {
    let hs = check_rank4("spade", &h)?;
    let ss = check_rank4("spade style", &style.scale)?;
    ensure!(
        ss[1] == hs[1] && ss[2..] == hs[2..],
        "spade style {:?} does not match activation {:?}",
        ss,
        hs
    );
    normalize(h, &[0, 2, 3], style.scale, style.bias)
}

/// Adaptive instance normalization: statistics per example and channel.
pub fn adain<'g>(h: Var<'g>, style: ChannelStyle<'g>) -> Result<Normalized<'g>> {
    let hs = check_rank4("adain", &h)?;
    let ss = check_rank4("adain style", &style.scale)?;
    ensure!(
        ss[1] == hs[1] && ss[2] == 1 && ss[3] == 1,
        "adain style must be [N, C, 1, 1], got {:?} for {:?}",
        ss,
        hs
    );
    normalize(h, &[2, 3], style.scale, style.bias)
}

fn divide_by_expected_std<'g>(num: Var<'g>, var_e: Var<'g>) -> Result<Normalized<'g>> {
    let floor = EPS * EPS;
    let clamped = count_below(&var_e.value(), floor);
    let sigma = var_e.clamp_min(floor).sqrt();
    Ok(Normalized {
        out: num.div(sigma)?,
        clamped,
    })
}

/// `w * (s h) / σ_E(w, s)` with `σ_E²[o] = Σ_{c,u,v} w[o,c,u,v]² s[c]²`.
pub fn modulated_conv<'g>(
    h: Var<'g>,
    s: ChannelStyle<'g>,
    w: Var<'g>,
    padding: Padding,
) -> Result<Normalized<'g>> {
    check_rank4("modulated_conv", &h)?;
    let ss = check_rank4("modulated_conv style", &s.scale)?;
    ensure!(ss[2] == 1 && ss[3] == 1, "modulated_conv style must be per-channel, got {:?}", ss);
    let num = h.mul(s.scale)?.conv2d(w, padding)?;
    let w_energy = w.square().sum_axes(&[2, 3])?;
    let var_e = s.scale.square().conv2d(w_energy, Padding::Zero)?;
    divide_by_expected_std(num, var_e)
}

/// `w * (s ⊙ h) / σ_E(w, s)` with
/// `σ_E²[o] = mean_{i,j} (w² * s²)[o,i,j]`, the squared-weight convolution
/// using the same padding as the forward convolution.
pub fn spatially_modulated_conv<'g>(
    h: Var<'g>,
    s: SpatialStyle<'g>,
    w: Var<'g>,
    padding: Padding,
) -> Result<Normalized<'g>> {
    let hs = check_rank4("spatially_modulated_conv", &h)?;
    let ss = check_rank4("spatially_modulated_conv style", &s.scale)?;
    ensure!(
        ss[1] == hs[1] && ss[2..] == hs[2..],
        "spatial style {:?} does not match activation {:?}",
        ss,
        hs
    );
    let num = h.mul(s.scale)?.conv2d(w, padding)?;
    let var_e = s.scale.square().conv2d(w.square(), padding)?.mean_axes(&[2, 3])?;
    divide_by_expected_std(num, var_e)
}

/// Per-example `σ_E` of the spatially modulated convolution, `[N, O]`.
pub fn expected_std(s: &Tensor, w: &Tensor, padding: Padding) -> Result<Tensor> {
    let sq = s.map(|x| x * x);
    let wsq = w.map(|x| x * x);
    let v = sq.conv2d(&wsq, padding)?.mean_axes(&[2, 3])?;
    let shape = [v.shape()[0], v.shape()[1]];
    v.map(f64::sqrt).reshape(&shape)
}

/// The weight `s w / σ_E(w, s)` that turns a single-example modulated
/// convolution into a plain convolution.
pub fn fold_modulated_weight(s: &Tensor, w: &Tensor) -> Result<Tensor> {
    ensure!(
        s.rank() == 4 && s.shape()[0] == 1 && s.shape()[2] == 1 && s.shape()[3] == 1,
        "folding needs a single per-channel style, got {:?}",
        s.shape()
    );
    let c = s.shape()[1];
    let (o, k) = (w.shape()[0], w.shape()[2]);
    ensure!(w.shape()[1] == c, "style channels {} vs weight {:?}", c, w.shape());
    let scaled = w.mul(&s.reshape(&[1, c, 1, 1])?)?;
    let sigma = scaled.map(|x| x * x).sum_axes(&[1, 2, 3])?.map(f64::sqrt);
    let folded = scaled.zip_with(&sigma, |a, b| a / b.max(EPS))?;
    debug_assert_eq!(folded.shape(), &[o, c, k, k]);
    Ok(folded)
}

/// Least-squares fit of a single convolution `w̃` mapping each input in
/// `inputs` to the matching entry of `outputs`. Returns the fitted weight
/// and the relative residual `‖w̃ * h − y‖ / ‖y‖`.
pub fn fit_convolution(
    inputs: &[Tensor],
    outputs: &[Tensor],
    k: usize,
    padding: Padding,
) -> Result<(Tensor, f64)> {
    ensure!(!inputs.is_empty() && inputs.len() == outputs.len(), "need matching input/output lists");
    let hs = inputs[0].shape();
    let (c, h, w) = (hs[1], hs[2], hs[3]);
    let o = outputs[0].shape()[1];
    let p = (k / 2) as isize;
    let cols = c * k * k;
    let mut rows = 0;
    for (x, y) in inputs.iter().zip(outputs) {
        ensure!(
            x.shape()[1..] == hs[1..] && y.shape()[0] == x.shape()[0] && y.shape()[2..] == hs[2..],
            "inconsistent fit shapes {:?} -> {:?}",
            x.shape(),
            y.shape()
        );
        rows += x.shape()[0] * h * w;
    }
    // One design matrix shared by all output channels.
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut r = 0;
    for x in inputs {
        let xd = x.data();
        for n in 0..x.shape()[0] {
            for i in 0..h {
                for j in 0..w {
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = i as isize + u as isize - p;
                                let jj = j as isize + v as isize - p;
                                let val = match padding {
                                    Padding::Zero => {
                                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                            0.0
                                        } else {
                                            xd[((n * c + ci) * h + ii as usize) * w + jj as usize]
                                        }
                                    }
                                    Padding::Circular => {
                                        let ii = ii.rem_euclid(h as isize) as usize;
                                        let jj = jj.rem_euclid(w as isize) as usize;
                                        xd[((n * c + ci) * h + ii) * w + jj]
                                    }
                                };
                                a[(r, (ci * k + u) * k + v)] = val;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    let svd = a.clone().svd(true, true);
    let mut weight = vec![0.0; o * cols];
    let mut resid_sq = 0.0;
    let mut target_sq = 0.0;
    for oi in 0..o {
        let mut b = DVector::<f64>::zeros(rows);
        let mut r = 0;
        for y in outputs {
            let yd = y.data();
            for n in 0..y.shape()[0] {
                let plane = &yd[(n * o + oi) * h * w..(n * o + oi + 1) * h * w];
                for &val in plane {
                    b[r] = val;
                    r += 1;
                }
            }
        }
        let sol = svd
            .solve(&b, 1e-12)
            .map_err(|e| crate::Error::contract(format!("least squares failed: {e}")))?;
        let fitted = &a * &sol;
        resid_sq += (&fitted - &b).norm_squared();
        target_sq += b.norm_squared();
        weight[oi * cols..(oi + 1) * cols].copy_from_slice(sol.as_slice());
    }
    let rel = if target_sq > 0.0 { (resid_sq / target_sq).sqrt() } else { resid_sq.sqrt() };
    Ok((Tensor::from_vec(&[o, c, k, k], weight)?, rel))
}

/// Evaluate a layer on plain tensors, outside any training graph.
pub fn eval<F>(inputs: &[Tensor], f: F) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(f(&g, &vars)?.value())
}
