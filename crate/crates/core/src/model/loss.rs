//! Adversarial losses and the R1, path-length and distortion regularizers.

use crate::blocks::{distortion_outside_var, BlockPartition};
use crate::error::{ensure, Result};
use crate::tensor::{Tensor, Var};

/// Floor under squared norms before the square root: keeps the gradient
/// finite when a Jacobian block is exactly zero, without shifting nonzero
/// norms measurably.
pub const NORM_FLOOR: f64 = 1e-24;

/// Non-saturating logistic loss for the discriminator.
pub fn d_adversarial<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Result<Var<'g>> {
    fake_logits.softplus().mean().add(real_logits.neg().softplus().mean())
}

pub fn g_adversarial(fake_logits: Var<'_>) -> Var<'_> {
    fake_logits.neg().softplus().mean()
}

/// `E_n ‖∇_x D(x_n)‖²` for `real` on the graph as a leaf. Callers weight it
/// by `λ_R1 / 2`.
pub fn r1_penalty<'g>(real: Var<'g>, real_logits: Var<'g>) -> Result<Var<'g>> {
    let n = real.shape()[0] as f64;
    let g = real.graph().grad_norm_sq(real_logits.sum(), real)?;
    Ok(g.scale(1.0 / n))
}

/// Per-example norms of `∂⟨img, probe⟩/∂w`, summed over every non-batch
/// axis of `w`.
fn jvp_norms<'g>(img: Var<'g>, w: Var<'g>, probe: &Tensor) -> Result<Var<'g>> {
    let inner = img.mul_const(probe)?.sum();
    let j = img.graph().grad(inner, &[w])?[0];
    let axes: Vec<usize> = (1..w.shape().len()).collect();
    Ok(j.square().sum_axes(&axes)?.clamp_min(NORM_FLOOR).sqrt())
}

/// Standard path length: `E_n (‖J_nᵀ y_n‖ - a)²` with `a` the running mean
/// passed in. Returns the penalty and the detached batch mean of the norms.
pub fn path_length<'g>(img: Var<'g>, w: Var<'g>, probe: &Tensor, target: f64) -> Result<(Var<'g>, f64)> {
    ensure!(probe.shape() == img.shape().as_slice(), "probe {:?} vs image {:?}", probe.shape(), img.shape());
    let norms = jvp_norms(img, w, probe)?;
    let mean = norms.value().mean();
    Ok((norms.affine(1.0, -target).square().mean(), mean))
}

/// Spatial path length. For each image block `b` one backward pass gives
/// `∂⟨g_b, y_b⟩/∂w`; its norm restricted to latent block `a` is pushed to
/// `γ₊` when `a = b` and to `γ₋` otherwise. Summed over `(a, b)`,
/// averaged over the batch.
///
/// `w` is `[N, C, rows, cols]` with one latent position per image block.
pub fn spatial_path_length<'g>(
    img: Var<'g>,
    w: Var<'g>,
    probe: &Tensor,
    partition: &BlockPartition,
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<Var<'g>> {
    let ws = w.shape();
    let (rows, cols) = (ws[2], ws[3]);
    ensure!(
        partition.n_blocks() == rows * cols && partition.n_blocks() > 1,
        "spatial path length needs one latent position per block and at least two blocks, got {} blocks for a {rows}x{cols} latent",
        partition.n_blocks()
    );
    ensure!(probe.shape() == img.shape().as_slice(), "probe {:?} vs image {:?}", probe.shape(), img.shape());
    let n = ws[0];
    let g = img.graph();
    let mut total: Option<Var<'g>> = None;
    for b in 0..partition.n_blocks() {
        let mask = partition.outside_mask(&[b])?.map(|x| 1.0 - x);
        let inner = img.mul_const(&probe.mul(&mask)?)?.sum();
        let j = g.grad(inner, &[w])?[0];
        let norms = j.square().sum_axes(&[1])?.clamp_min(NORM_FLOOR).sqrt();
        let mut target = vec![gamma_minus; rows * cols];
        target[b] = gamma_plus;
        let target = Tensor::from_vec(&[1, 1, rows, cols], target)?;
        let term = norms.sub(g.constant(target))?.square().sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least two blocks").scale(1.0 / n as f64))
}

/// Distortion regularizer for one resampled block per example: mean
/// squared error outside block `blocks[n]` between `img` and the image
/// generated after replacing that latent block.
pub fn distortion_regularizer<'g>(
    img: Var<'g>,
    resampled: Var<'g>,
    partition: &BlockPartition,
    blocks: &[usize],
) -> Result<Var<'g>> {
    distortion_outside_var(img, resampled, partition, blocks)
}
