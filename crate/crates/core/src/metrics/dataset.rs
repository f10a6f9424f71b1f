//! Procedural images with one global factor and four local ones.
//!
//! Each image has a background hue shared by the whole picture. Every
//! quadrant holds one shape (square, disc or cross) at a random offset,
//! drawn in a brighter shade of the same hue, so quadrants are dependent
//! through the hue while their shapes vary independently.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Bumped whenever the sampler changes, so stored sweeps can be matched to
/// the data they saw.
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Cross,
}

/// Factors behind one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub hue: f64,
    /// Shape and top-left offset of each quadrant, row-major.
    pub quadrants: [(Shape, usize, usize); 4],
}

/// `h, s, v` in `[0, 1]` to RGB in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SyntheticDataset {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        ensure!(size >= 8 && size.is_multiple_of(2), "synthetic images need an even size of at least 8, got {size}");
        Ok(SyntheticDataset { size, seed })
    }

    fn shape_extent(&self) -> usize {
        (self.size / 4).max(2)
    }

    pub fn sample_factors<R: Rng + ?Sized>(&self, rng: &mut R) -> Factors {
        let hue = rng.random::<f64>();
        let q = self.size / 2;
        let e = self.shape_extent();
        let quadrants = std::array::from_fn(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Square,
                1 => Shape::Disc,
                _ => Shape::Cross,
            };
            (shape, rng.random_range(0..=q - e), rng.random_range(0..=q - e))
        });
        Factors { hue, quadrants }
    }

    /// `[3, size, size]` values in `[-1, 1]`.
    pub fn render(&self, f: &Factors) -> Tensor {
        let n = self.size;
        let q = n / 2;
        let e = self.shape_extent();
        let bg = hsv_to_rgb(f.hue, 0.6, 0.3);
        let fg = hsv_to_rgb(f.hue, 0.8, 0.95);
        let mut data = vec![0.0; 3 * n * n];
        for i in 0..n {
            for j in 0..n {
                let quad = (i / q) * 2 + j / q;
                let (shape, oi, oj) = f.quadrants[quad];
                let (li, lj) = ((i % q) as isize - oi as isize, (j % q) as isize - oj as isize);
                let inside = li >= 0 && lj >= 0 && (li as usize) < e && (lj as usize) < e && {
                    let (a, b) = (li as f64 + 0.5 - e as f64 / 2.0, lj as f64 + 0.5 - e as f64 / 2.0);
                    let r = e as f64 / 2.0;
                    match shape {
                        Shape::Square => true,
                        Shape::Disc => a * a + b * b <= r * r,
                        Shape::Cross => a.abs() < r / 2.5 || b.abs() < r / 2.5,
                    }
                };
                let col = if inside { fg } else { bg };
                for c in 0..3 {
                    data[c * n * n + i * n + j] = 2.0 * col[c] - 1.0;
                }
            }
        }
        Tensor::from_vec(&[3, n, n], data).expect("sizes match")
    }

    /// `n` images drawn from the stream keyed by `(seed, key)`, as
    /// `[n, 3, size, size]`.
    pub fn batch(&self, key: u64, n: usize) -> Tensor {
        let mut rng = stream(self.seed, &[tag("data"), key]);
        let parts: Vec<Tensor> = (0..n)
            .map(|_| {
                let t = self.render(&self.sample_factors(&mut rng));
                t.reshape(&[1, 3, self.size, self.size]).expect("same numel")
            })
            .collect();
        Tensor::cat_batch(&parts).expect("equal shapes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_repeatable_and_in_range() {
        let d = SyntheticDataset::new(16, 3).unwrap();
        let a = d.batch(5, 4);
        assert_eq!(a.shape(), &[4, 3, 16, 16]);
        assert!(a.bit_eq(&d.batch(5, 4)));
        assert!(!a.bit_eq(&d.batch(6, 4)));
        assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn shapes_and_background_follow_the_hue() {
        let d = SyntheticDataset::new(16, 0).unwrap();
        let f = Factors {
            hue: 0.25,
            quadrants: [(Shape::Square, 0, 0), (Shape::Disc, 4, 4), (Shape::Cross, 2, 0), (Shape::Square, 4, 0)],
        };
        let img = d.render(&f);
        let px = |i: usize, j: usize| [0, 1, 2].map(|c| img.data()[c * 256 + i * 16 + j]);
        let enc = |c: [f64; 3]| c.map(|x| 2.0 * x - 1.0);
        assert_eq!(px(0, 0), enc(hsv_to_rgb(0.25, 0.8, 0.95)));
        assert_eq!(px(7, 7), enc(hsv_to_rgb(0.25, 0.6, 0.3)));
        assert_eq!(px(15, 15), px(7, 7));
        assert_eq!(px(6, 13), px(0, 0));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
