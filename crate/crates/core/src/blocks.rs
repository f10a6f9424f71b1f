//! Block partitions of the pixel grid, latent grids with one vector per
//! block, latent composition and the off-block distortion.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Tensor, Var};

/// Disjoint blocks `J_a` covering an `height x width` pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    height: usize,
    width: usize,
    /// `(rows, cols)` when the partition is a rectangular grid.
    grid: Option<(usize, usize)>,
    /// Row-major pixel coordinates of each block.
    blocks: Vec<Vec<(usize, usize)>>,
    owner: Vec<usize>,
}

/// Extents of `parts` pieces of `n`, the last absorbing the remainder.
fn split_extent(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let step = n / parts;
    (0..parts)
        .map(|p| {
            let start = p * step;
            let end = if p + 1 == parts { n } else { start + step };
            (start, end)
        })
        .collect()
}

impl BlockPartition {
    /// Rectangular `rows x cols` grid over an `n_y x n_y` image, blocks in
    /// row-major order.
    pub fn grid(n_y: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::grid_rect(n_y, n_y, rows, cols)
    }

    pub fn grid_rect(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        ensure!(rows * cols > 0, "grid needs at least one block, got {rows}x{cols}");
        ensure!(
            rows <= height && cols <= width,
            "{rows}x{cols} grid leaves empty blocks on a {height}x{width} image"
        );
        let mut blocks = Vec::with_capacity(rows * cols);
        for &(r0, r1) in &split_extent(height, rows) {
            for &(c0, c1) in &split_extent(width, cols) {
                let mut px = Vec::with_capacity((r1 - r0) * (c1 - c0));
                for i in r0..r1 {
                    for j in c0..c1 {
                        px.push((i, j));
                    }
                }
                blocks.push(px);
            }
        }
        let mut p = Self::from_blocks(height, width, blocks)?;
        p.grid = Some((rows, cols));
        Ok(p)
    }

    /// Arbitrary index sets. Fails unless they are disjoint and cover the
    /// grid.
    pub fn from_blocks(
        height: usize,
        width: usize,
        blocks: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        ensure!(!blocks.is_empty(), "partition needs at least one block");
        let mut owner = vec![usize::MAX; height * width];
        for (a, block) in blocks.iter().enumerate() {
            ensure!(!block.is_empty(), "block {a} is empty");
            for &(i, j) in block {
                ensure!(i < height && j < width, "pixel ({i}, {j}) outside {height}x{width}");
                let slot = &mut owner[i * width + j];
                ensure!(*slot == usize::MAX, "pixel ({i}, {j}) in blocks {} and {a}", *slot);
                *slot = a;
            }
        }
        if let Some(k) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::contract(format!(
                "pixel ({}, {}) not covered by any block",
                k / width,
                k % width
            )));
        }
        let mut blocks = blocks;
        for b in &mut blocks {
            b.sort_unstable();
        }
        Ok(BlockPartition {
            height,
            width,
            grid: None,
            blocks,
            owner,
        })
    }

    /// A single block spanning the whole image.
    pub fn whole(height: usize, width: usize) -> Self {
        Self::grid_rect(height, width, 1, 1).expect("1x1 grid on a non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn block(&self, a: usize) -> Result<&[(usize, usize)]> {
        self.blocks
            .get(a)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("block {a} of {}", self.blocks.len())))
    }

    /// Index of the block containing pixel `(i, j)`.
    pub fn block_of(&self, i: usize, j: usize) -> usize {
        self.owner[i * self.width + j]
    }

    /// `[1, 1, H, W]` indicator of pixels outside every block in `excluded`.
    pub fn outside_mask(&self, excluded: &[usize]) -> Result<Tensor> {
        for &a in excluded {
            self.block(a)?;
        }
        let data = self
            .owner
            .iter()
            .map(|o| if excluded.contains(o) { 0.0 } else { 1.0 })
            .collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data)
    }

    /// `"rows x cols"` for grids, otherwise one line per block listing
    /// `row:col` pixel coordinates.
    pub fn to_spec(&self) -> String {
        match self.grid {
            Some((r, c)) => format!("{r} x {c}"),
            None => self
                .blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|(i, j)| format!("{i}:{j}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    /// Inverse of [`to_spec`](Self::to_spec) for an image of the given extent.
    pub fn parse(spec: &str, height: usize, width: usize) -> Result<Self> {
        let t = spec.trim();
        if let Some((r, c)) = t.split_once('x') {
            if let (Ok(r), Ok(c)) = (r.trim().parse(), c.trim().parse()) {
                return Self::grid_rect(height, width, r, c);
            }
        }
        let mut blocks = Vec::new();
        for line in t.lines().filter(|l| !l.trim().is_empty()) {
            let mut block = Vec::new();
            for tok in line.split_whitespace() {
                let (i, j) = tok
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad pixel token {tok:?}")))?;
                let i = i.parse().map_err(|_| Error::Format(format!("bad row in {tok:?}")))?;
                let j = j.parse().map_err(|_| Error::Format(format!("bad col in {tok:?}")))?;
                block.push((i, j));
            }
            blocks.push(block);
        }
        Self::from_blocks(height, width, blocks)
    }
}

impl fmt::Display for BlockPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_spec())
    }
}

/// `(C, H, W)` of a single image given as `[C, H, W]` or `[1, C, H, W]`.
fn image_dims(y: &Tensor) -> Result<(usize, usize, usize)> {
    match *y.shape() {
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::contract(format!("expected a single image, got {:?}", y.shape()))),
    }
}

fn check_image(y: &Tensor, p: &BlockPartition) -> Result<usize> {
    let (c, h, w) = image_dims(y)?;
    ensure!(
        h == p.height && w == p.width,
        "image {h}x{w} vs partition {}x{}",
        p.height,
        p.width
    );
    Ok(c)
}

/// Values of block `a`: pixels in row-major order of `J_a`, channels
/// innermost.
pub fn extract_block(y: &Tensor, p: &BlockPartition, a: usize) -> Result<Vec<f64>> {
    let c = check_image(y, p)?;
    let plane = p.height * p.width;
    let d = y.data();
    let block = p.block(a)?;
    let mut out = Vec::with_capacity(block.len() * c);
    for &(i, j) in block {
        for ch in 0..c {
            out.push(d[ch * plane + i * p.width + j]);
        }
    }
    Ok(out)
}

/// `y` with block `a` overwritten by `values` (layout of [`extract_block`]).
pub fn scatter_block(y: &Tensor, p: &BlockPartition, a: usize, values: &[f64]) -> Result<Tensor> {
    let c = check_image(y, p)?;
    let block = p.block(a)?;
    ensure!(
        values.len() == block.len() * c,
        "block {a} holds {} values, got {}",
        block.len() * c,
        values.len()
    );
    let plane = p.height * p.width;
    let mut d = y.to_vec();
    let mut it = values.iter();
    for &(i, j) in block {
        for ch in 0..c {
            d[ch * plane + i * p.width + j] = *it.next().expect("length checked");
        }
    }
    Tensor::from_vec(y.shape(), d)
}

/// Mean squared pixel error over every pixel outside block `a`.
pub fn distortion_outside(y: &Tensor, y_prime: &Tensor, p: &BlockPartition, a: usize) -> Result<f64> {
    distortion_outside_set(y, y_prime, p, &[a])
}

/// Mean squared pixel error over pixels outside all `excluded` blocks; zero
/// when nothing is left.
pub fn distortion_outside_set(
    y: &Tensor,
    y_prime: &Tensor,
    p: &BlockPartition,
    excluded: &[usize],
) -> Result<f64> {
    ensure!(
        y.shape() == y_prime.shape(),
        "distortion of {:?} vs {:?}",
        y.shape(),
        y_prime.shape()
    );
    let c = check_image(y, p)?;
    let mask = p.outside_mask(excluded)?;
    let m = mask.data();
    let plane = p.height * p.width;
    let (a, b) = (y.data(), y_prime.data());
    let mut sum = 0.0;
    for ch in 0..c {
        for k in 0..plane {
            if m[k] != 0.0 {
                let d = a[ch * plane + k] - b[ch * plane + k];
                sum += d * d;
            }
        }
    }
    let count = m.iter().filter(|&&x| x != 0.0).count() * c;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Differentiable batched form: per-example mean squared error outside
/// `excluded[n]`, averaged over the batch. `y` and `y_prime` are
/// `[N, C, H, W]`.
pub fn distortion_outside_var<'g>(
    y: Var<'g>,
    y_prime: Var<'g>,
    p: &BlockPartition,
    excluded: &[usize],
) -> Result<Var<'g>> {
    let s = y.shape();
    ensure!(
        s.len() == 4 && s[0] == excluded.len() && s[2] == p.height && s[3] == p.width,
        "distortion batch {:?} vs {} excluded blocks on {}x{}",
        s,
        excluded.len(),
        p.height,
        p.width
    );
    let (n, c) = (s[0], s[1]);
    let plane = p.height * p.width;
    let mut w = Vec::with_capacity(n * plane);
    for &a in excluded {
        let m = p.outside_mask(&[a])?;
        let count = m.sum() * c as f64 * n as f64;
        let scale = if count == 0.0 { 0.0 } else { 1.0 / count };
        w.extend(m.data().iter().map(|x| x * scale));
    }
    let weights = y.graph().constant(Tensor::from_vec(&[n, 1, p.height, p.width], w)?);
    Ok(y.sub(y_prime)?.square().mul(weights)?.sum())
}

/// Spatial latent `[rows, cols, n_z]` with one independent vector per block
/// and the draw that produced each block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    rows: usize,
    cols: usize,
    n_z: usize,
    values: Vec<f64>,
    lineage: Vec<u64>,
}

impl LatentGrid {
    pub fn from_vec(rows: usize, cols: usize, n_z: usize, values: Vec<f64>, draw: u64) -> Result<Self> {
        ensure!(rows * cols * n_z > 0, "empty latent grid {rows}x{cols}x{n_z}");
        ensure!(
            values.len() == rows * cols * n_z,
            "latent data {} for {rows}x{cols}x{n_z}",
            values.len()
        );
        Ok(LatentGrid {
            rows,
            cols,
            n_z,
            values,
            lineage: vec![draw; rows * cols],
        })
    }

    /// Standard-normal entries, block by block in row-major order.
    pub fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, n_z: usize, rng: &mut R, draw: u64) -> Self {
        let values = (0..rows * cols * n_z).map(|_| rng.sample(StandardNormal)).collect();
        LatentGrid::from_vec(rows, cols, n_z, values, draw).expect("sizes match")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_blocks(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lineage(&self) -> &[u64] {
        &self.lineage
    }

    pub fn block(&self, a: usize) -> &[f64] {
        &self.values[a * self.n_z..(a + 1) * self.n_z]
    }

    /// The grid as a `[1, n_z, rows, cols]` activation.
    pub fn to_nchw(&self) -> Tensor {
        let plane = self.rows * self.cols;
        let mut d = vec![0.0; self.values.len()];
        for a in 0..plane {
            for k in 0..self.n_z {
                d[k * plane + a] = self.values[a * self.n_z + k];
            }
        }
        Tensor::from_vec(&[1, self.n_z, self.rows, self.cols], d).expect("sizes match")
    }

    /// Stack grids of equal shape into `[N, n_z, rows, cols]`.
    pub fn batch(grids: &[LatentGrid]) -> Result<Tensor> {
        ensure!(!grids.is_empty(), "empty latent batch");
        for g in grids {
            g.check_same(&grids[0])?;
        }
        Tensor::cat_batch(&grids.iter().map(LatentGrid::to_nchw).collect::<Vec<_>>())
    }

    fn check_same(&self, other: &LatentGrid) -> Result<()> {
        ensure!(
            (self.rows, self.cols, self.n_z) == (other.rows, other.cols, other.n_z),
            "latent {}x{}x{} vs {}x{}x{}",
            self.rows,
            self.cols,
            self.n_z,
            other.rows,
            other.cols,
            other.n_z
        );
        Ok(())
    }

    /// Bit-exact equality of the values in block `a`.
    pub fn block_bit_eq(&self, other: &LatentGrid, a: usize) -> bool {
        self.block(a)
            .iter()
            .zip(other.block(a))
            .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// `z` with every block in `targets` replaced by the block of `z_new`.
pub fn compose_latent(z: &LatentGrid, z_new: &LatentGrid, targets: &BTreeSet<usize>) -> Result<LatentGrid> {
    z.check_same(z_new)?;
    let mut out = z.clone();
    let n = z.n_z;
    for &a in targets {
        ensure!(a < z.n_blocks(), "block {a} of {}", z.n_blocks());
        out.values[a * n..(a + 1) * n].copy_from_slice(z_new.block(a));
        out.lineage[a] = z_new.lineage[a];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_rows() {
        let p = BlockPartition::grid_rect(2, 1, 2, 1).unwrap();
        assert_eq!(p.block(0).unwrap(), &[(0, 0)]);
        assert_eq!(p.block(1).unwrap(), &[(1, 0)]);
    }

    #[test]
    fn square_grids() {
        let p = BlockPartition::grid(32, 4, 4).unwrap();
        assert_eq!(p.n_blocks(), 16);
        assert!((0..16).all(|a| p.block(a).unwrap().len() == 64));
        assert_eq!(BlockPartition::grid(32, 8, 8).unwrap().n_blocks(), 64);
    }

    #[test]
    fn remainder_goes_to_last_block() {
        let p = BlockPartition::grid(10, 3, 3).unwrap();
        assert_eq!(p.block(0).unwrap().len(), 9);
        assert_eq!(p.block(8).unwrap().len(), 16);
        assert_eq!(p.block_of(9, 9), 8);
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(BlockPartition::grid(8, 0, 2).is_err());
        assert!(BlockPartition::grid(2, 3, 1).is_err());
    }

    #[test]
    fn overlapping_or_partial_blocks_are_rejected() {
        assert!(BlockPartition::from_blocks(1, 2, vec![vec![(0, 0)], vec![(0, 0), (0, 1)]]).is_err());
        assert!(BlockPartition::from_blocks(1, 2, vec![vec![(0, 0)]]).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let g = BlockPartition::grid(16, 2, 4).unwrap();
        assert_eq!(g.to_spec(), "2 x 4");
        assert_eq!(BlockPartition::parse(&g.to_spec(), 16, 16).unwrap(), g);
        let odd = BlockPartition::from_blocks(2, 2, vec![vec![(0, 0), (1, 1)], vec![(0, 1), (1, 0)]]).unwrap();
        assert_eq!(BlockPartition::parse(&odd.to_spec(), 2, 2).unwrap(), odd);
        assert!(BlockPartition::parse("0:0 0:x", 1, 2).is_err());
    }

    #[test]
    fn whole_image_block_is_the_image() {
        let y = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = BlockPartition::whole(2, 2);
        assert_eq!(extract_block(&y, &p, 0).unwrap(), y.to_vec());
    }

    #[test]
    fn first_pixel_triple() {
        let y = Tensor::from_vec(&[1, 3, 2, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = BlockPartition::grid_rect(2, 1, 2, 1).unwrap();
        assert_eq!(extract_block(&y, &p, 0).unwrap(), vec![0.1, 0.3, 0.5]);
        assert!(extract_block(&y, &p, 2).is_err());
    }

    #[test]
    fn two_pixel_distortion() {
        let y = Tensor::from_vec(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
        let yp = Tensor::from_vec(&[1, 2, 1], vec![1.0, -1.0]).unwrap();
        let p = BlockPartition::grid_rect(2, 1, 2, 1).unwrap();
        assert_eq!(distortion_outside(&y, &yp, &p, 0).unwrap(), 4.0);
        assert_eq!(distortion_outside(&y, &yp, &p, 1).unwrap(), 0.0);
        assert_eq!(distortion_outside(&y, &y, &p, 0).unwrap(), 0.0);
    }

    #[test]
    fn batched_distortion_matches_scalar_form() {
        use crate::tensor::Graph;
        let p = BlockPartition::grid(4, 2, 2).unwrap();
        let a: Vec<f64> = (0..2 * 3 * 16).map(|k| ((k * 37 % 11) as f64) / 7.0).collect();
        let b: Vec<f64> = (0..2 * 3 * 16).map(|k| ((k * 53 % 13) as f64) / 5.0).collect();
        let ya = Tensor::from_vec(&[2, 3, 4, 4], a).unwrap();
        let yb = Tensor::from_vec(&[2, 3, 4, 4], b).unwrap();
        let g = Graph::new();
        let d = distortion_outside_var(g.constant(ya.clone()), g.constant(yb.clone()), &p, &[1, 3])
            .unwrap()
            .value()
            .item();
        let d0 = distortion_outside(&ya.example(0).unwrap(), &yb.example(0).unwrap(), &p, 1).unwrap();
        let d1 = distortion_outside(&ya.example(1).unwrap(), &yb.example(1).unwrap(), &p, 3).unwrap();
        assert!((d - (d0 + d1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn latent_layout() {
        let z = LatentGrid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(z.block(1), &[3.0, 4.0]);
        assert_eq!(z.to_nchw().to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }
}
