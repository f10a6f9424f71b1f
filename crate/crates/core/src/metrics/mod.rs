//! Pixel-space stand-ins for FID and PPL, the resampling distortion and the
//! regularization-strength sweep.

pub mod ablation;
pub mod dataset;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::blocks::{compose_latent, distortion_outside, BlockPartition, LatentGrid};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub use dataset::SyntheticDataset;

/// Side of the averaging window applied before the Gaussian fit.
pub const FID_POOL: usize = 8;
pub const FID_MIN_SAMPLES: usize = 256;
/// Added to both covariance diagonals before the matrix square roots.
pub const FID_RIDGE: f64 = 1e-6;

/// Mean and covariance of a sample set, one sample per row.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn of(samples: &DMatrix<f64>) -> Self {
        let n = samples.nrows() as f64;
        let mean = samples.row_mean().transpose();
        let centered = DMatrix::from_fn(samples.nrows(), samples.ncols(), |i, j| samples[(i, j)] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n - 1.0);
        Moments { mean, cov }
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(C₁ + C₂ − 2 (C₁^{1/2} C₂ C₁^{1/2})^{1/2})`, with
/// negative eigenvalues clipped to zero.
pub fn frechet_distance(a: &Moments, b: &Moments) -> f64 {
    let d = a.mean.len();
    let ridge = DMatrix::<f64>::identity(d, d) * FID_RIDGE;
    let c1 = &a.cov + &ridge;
    let c2 = &b.cov + &ridge;
    let s1 = psd_sqrt(&c1);
    let inner = &s1 * &c2 * &s1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    (&a.mean - &b.mean).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross
}

/// `FID_POOL x FID_POOL` average pooling, flattened per image.
pub fn pooled_features(images: &Tensor) -> Result<DMatrix<f64>> {
    let s = images.shape();
    ensure!(s.len() == 4, "expected an image batch, got {:?}", s);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    ensure!(
        h % FID_POOL == 0 && w % FID_POOL == 0,
        "image {h}x{w} is not divisible into {FID_POOL}x{FID_POOL} windows"
    );
    let (ph, pw) = (h / FID_POOL, w / FID_POOL);
    let dim = c * ph * pw;
    let d = images.data();
    let area = (FID_POOL * FID_POOL) as f64;
    let mut m = DMatrix::zeros(n, dim);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let f = (ci * ph + i / FID_POOL) * pw + j / FID_POOL;
                    m[(ni, f)] += d[((ni * c + ci) * h + i) * w + j] / area;
                }
            }
        }
    }
    Ok(m)
}

/// Fréchet distance between Gaussian fits of pooled pixels.
pub fn pixel_fid(real: &Tensor, fake: &Tensor) -> Result<f64> {
    ensure!(
        real.shape()[0] >= FID_MIN_SAMPLES && fake.shape()[0] >= FID_MIN_SAMPLES,
        "pixel-FID needs at least {FID_MIN_SAMPLES} samples per set, got {} and {}",
        real.shape()[0],
        fake.shape()[0]
    );
    ensure!(real.shape()[1..] == fake.shape()[1..], "real {:?} vs fake {:?}", real.shape(), fake.shape());
    let a = Moments::of(&pooled_features(real)?);
    let b = Moments::of(&pooled_features(fake)?);
    Ok(frechet_distance(&a, &b))
}

/// Maps a latent batch `[N, n_z, rows, cols]` to images `[N, C, H, W]`.
pub type Generator<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// `E ‖g(z) − g(z + εη)‖² / ε²`, divided by the number of values per image.
pub fn pixel_ppl<R: Rng + ?Sized>(
    gen: &Generator<'_>,
    latent_shape: [usize; 3],
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    ensure!(n > 0 && eps > 0.0, "pixel-PPL needs samples and a positive step");
    let shape = [n, latent_shape[0], latent_shape[1], latent_shape[2]];
    let z = Tensor::randn(&shape, rng);
    let eta = Tensor::randn(&shape, rng);
    let a = gen(&z)?;
    let b = gen(&z.add(&eta.scale(eps))?)?;
    let per_image = a.numel() / n;
    Ok(a.sub(&b)?.norm_sq() / (eps * eps) / (n * per_image) as f64)
}

/// Mean over `n_pairs` latent pairs and over every block `a` of the
/// distortion outside `a` after replacing latent block `a`.
pub fn resampling_distortion<R: Rng + ?Sized>(
    gen: &Generator<'_>,
    latent_shape: [usize; 3],
    partition: &BlockPartition,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    let [n_z, rows, cols] = latent_shape;
    ensure!(rows * cols == partition.n_blocks(), "latent {rows}x{cols} vs {} blocks", partition.n_blocks());
    ensure!(n_pairs > 0, "need at least one latent pair");
    let nb = partition.n_blocks();
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let z = LatentGrid::sample(rows, cols, n_z, rng, 0);
        let zp = LatentGrid::sample(rows, cols, n_z, rng, 1);
        let mut grids = vec![z.clone()];
        for a in 0..nb {
            grids.push(compose_latent(&z, &zp, &BTreeSet::from([a]))?);
        }
        let imgs = gen(&LatentGrid::batch(&grids)?)?;
        let base = imgs.example(0)?;
        for a in 0..nb {
            total += distortion_outside(&base, &imgs.example(a + 1)?, partition, a)?;
        }
    }
    Ok(total / (n_pairs * nb) as f64)
}
