//! Exact block-resampling checks on tiny discrete image spaces.
//!
//! Images are short vectors of integer pixel values. A base distribution
//! `P(y)` and one kernel `P^a(y' | y)` per block are explicit tables over a
//! common support, so sequential resampling is a chain of matrix products.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

/// Row sums of a conditional table must be within this of 1.
pub const ROW_TOL: f64 = 1e-12;
/// Default pass threshold on total-variation distance for exact kernels.
pub const EXACT_TV_TOL: f64 = 1e-9;
/// Largest support enumerated exactly.
pub const MAX_SUPPORT: usize = 64;
/// Above this many blocks only a seeded sample of orders is checked.
pub const MAX_EXHAUSTIVE_BLOCKS: usize = 4;
pub const SAMPLED_ORDERS: usize = 24;

pub type Image = Vec<i32>;

/// Every image over `pixels` positions with values in `levels`, plus the
/// block each position belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSpace {
    support: Arc<[Image]>,
    blocks: Vec<Vec<usize>>,
}

impl DiscreteSpace {
    pub fn new(levels: &[i32], blocks: Vec<Vec<usize>>) -> Result<Self> {
        ensure!(!levels.is_empty(), "no pixel levels");
        let pixels: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; pixels];
        for b in &blocks {
            ensure!(!b.is_empty(), "empty block");
            for &p in b {
                ensure!(p < pixels && !seen[p], "blocks must partition 0..{pixels}");
                seen[p] = true;
            }
        }
        let size = (levels.len() as f64).powi(pixels as i32);
        ensure!(size <= MAX_SUPPORT as f64, "support of {size} images exceeds {MAX_SUPPORT}");
        let mut support = vec![Vec::new()];
        for _ in 0..pixels {
            support = support
                .into_iter()
                .flat_map(|img: Image| {
                    levels.iter().map(move |&v| {
                        let mut next = img.clone();
                        next.push(v);
                        next
                    })
                })
                .collect();
        }
        Ok(DiscreteSpace {
            support: support.into(),
            blocks,
        })
    }

    /// One block per pixel.
    pub fn pixelwise(levels: &[i32], pixels: usize) -> Result<Self> {
        Self::new(levels, (0..pixels).map(|p| vec![p]).collect())
    }

    pub fn support(&self) -> &[Image] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn index_of(&self, y: &[i32]) -> Result<usize> {
        self.support
            .iter()
            .position(|s| s.as_slice() == y)
            .ok_or_else(|| Error::contract(format!("{y:?} not in support")))
    }

    /// `true` when `u` and `v` agree on every block except `a`.
    fn agree_off(&self, u: usize, v: usize, a: usize) -> bool {
        let (u, v) = (&self.support[u], &self.support[v]);
        self.blocks
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .all(|(_, px)| px.iter().all(|&p| u[p] == v[p]))
    }

    /// Squared pixel difference summed over block `b`.
    fn block_sq_dist(&self, u: usize, v: usize, b: usize) -> f64 {
        let (u, v) = (&self.support[u], &self.support[v]);
        self.blocks[b]
            .iter()
            .map(|&p| {
                let d = (u[p] - v[p]) as f64;
                d * d
            })
            .sum()
    }
}

/// A distribution over the support of a [`DiscreteSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn new(space: &DiscreteSpace, probs: Vec<f64>) -> Result<Self> {
        ensure!(probs.len() == space.len(), "{} probabilities for {} images", probs.len(), space.len());
        check_row(&probs, "distribution")?;
        Ok(Distribution { probs })
    }

    /// Put mass `p` on each listed image.
    pub fn from_points(space: &DiscreteSpace, points: &[(&[i32], f64)]) -> Result<Self> {
        let mut probs = vec![0.0; space.len()];
        for (y, p) in points {
            probs[space.index_of(y)?] += p;
        }
        Self::new(space, probs)
    }

    pub fn point(space: &DiscreteSpace, y: &[i32]) -> Result<Self> {
        Self::from_points(space, &[(y, 1.0)])
    }

    pub fn prob(&self, space: &DiscreteSpace, y: &[i32]) -> Result<f64> {
        Ok(self.probs[space.index_of(y)?])
    }

    pub fn tv(&self, other: &Distribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    ensure!(row.iter().all(|&p| p >= 0.0 && p.is_finite()), "{what} has a negative or non-finite entry");
    let s: f64 = row.iter().sum();
    ensure!((s - 1.0).abs() <= ROW_TOL, "{what} sums to {s}");
    Ok(())
}

/// Row-stochastic table `table[i][j] = P(y' = support[j] | y = support[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteConditional {
    table: Vec<Vec<f64>>,
}

impl DiscreteConditional {
    pub fn new(space: &DiscreteSpace, table: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(table.len() == space.len(), "{} rows for {} images", table.len(), space.len());
        for (i, row) in table.iter().enumerate() {
            ensure!(row.len() == space.len(), "row {i} has {} entries", row.len());
            check_row(row, &format!("row {i}"))?;
        }
        Ok(DiscreteConditional { table })
    }

    pub fn identity(space: &DiscreteSpace) -> Self {
        let n = space.len();
        let table = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        DiscreteConditional { table }
    }

    /// Ignore the current image and redraw from `p`.
    pub fn constant(p: &Distribution) -> Self {
        DiscreteConditional {
            table: vec![p.probs.clone(); p.probs.len()],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.table[i]
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    fn then(&self, next: &DiscreteConditional) -> DiscreteConditional {
        let n = self.table.len();
        let mut out = vec![vec![0.0; n]; n];
        for (i, row) in self.table.iter().enumerate() {
            for (k, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    for (j, q) in next.table[k].iter().enumerate() {
                        out[i][j] += p * q;
                    }
                }
            }
        }
        DiscreteConditional { table: out }
    }

    fn push(&self, p: &Distribution) -> Distribution {
        let n = self.table.len();
        let mut out = vec![0.0; n];
        for (i, &pi) in p.probs.iter().enumerate() {
            for j in 0..n {
                out[j] += pi * self.table[i][j];
            }
        }
        Distribution { probs: out }
    }
}

/// One kernel per block.
#[derive(Clone, Debug)]
pub struct ResamplingFamily {
    pub space: DiscreteSpace,
    pub kernels: Vec<DiscreteConditional>,
}

impl ResamplingFamily {
    pub fn new(space: DiscreteSpace, kernels: Vec<DiscreteConditional>) -> Result<Self> {
        ensure!(
            kernels.len() == space.n_blocks(),
            "{} kernels for {} blocks",
            kernels.len(),
            space.n_blocks()
        );
        for k in &kernels {
            ensure!(k.table.len() == space.len(), "kernel support mismatch");
        }
        Ok(ResamplingFamily { space, kernels })
    }

    pub fn identity(space: &DiscreteSpace) -> Self {
        let k = DiscreteConditional::identity(space);
        ResamplingFamily {
            space: space.clone(),
            kernels: vec![k; space.n_blocks()],
        }
    }

    /// `P^a(. | y) = P(.)` for every block.
    pub fn trivial(space: &DiscreteSpace, base: &Distribution) -> Self {
        let k = DiscreteConditional::constant(base);
        ResamplingFamily {
            space: space.clone(),
            kernels: vec![k; space.n_blocks()],
        }
    }

    /// Exact inpainting: redraw block `a` from `P(y_a | y_b, b != a)`. Rows
    /// whose context has zero probability keep the image unchanged.
    pub fn inpainting(space: &DiscreteSpace, base: &Distribution) -> Self {
        let n = space.len();
        let kernels = (0..space.n_blocks())
            .map(|a| {
                let table = (0..n)
                    .map(|i| {
                        let compat: Vec<usize> = (0..n).filter(|&j| space.agree_off(i, j, a)).collect();
                        let z: f64 = compat.iter().map(|&j| base.probs[j]).sum();
                        let mut row = vec![0.0; n];
                        if z > 0.0 {
                            for &j in &compat {
                                row[j] = base.probs[j] / z;
                            }
                        } else {
                            row[i] = 1.0;
                        }
                        row
                    })
                    .collect();
                DiscreteConditional { table }
            })
            .collect();
        ResamplingFamily {
            space: space.clone(),
            kernels,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.kernels.len()
    }

    /// Composite kernel `P^{a_1} P^{a_2} ...` for the given order.
    pub fn sequential_kernel(&self, order: &[usize]) -> Result<DiscreteConditional> {
        check_order(order, self.n_blocks())?;
        let mut k = DiscreteConditional::identity(&self.space);
        for &a in order {
            k = k.then(&self.kernels[a]);
        }
        Ok(k)
    }
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    ensure!(order.len() == n, "order {order:?} must list all {n} blocks");
    for &a in order {
        ensure!(a < n && !seen[a], "order {order:?} is not a permutation of 0..{n}");
        seen[a] = true;
    }
    Ok(())
}

/// A latent model with independent discrete blocks pushed through a
/// deterministic decoder; the kernels redraw one latent block.
pub struct LatentDecoder {
    /// Values and probabilities of each latent block.
    pub blocks: Vec<Vec<(i32, f64)>>,
    pub decode: Box<dyn Fn(&[i32]) -> Image>,
}

impl LatentDecoder {
    fn latents(&self) -> Vec<(Vec<i32>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for b in &self.blocks {
            out = out
                .into_iter()
                .flat_map(|(z, p): (Vec<i32>, f64)| {
                    b.iter().map(move |&(v, q)| {
                        let mut next = z.clone();
                        next.push(v);
                        (next, p * q)
                    })
                })
                .collect();
        }
        out
    }

    /// Image distribution `P(g(z))`.
    pub fn base(&self, space: &DiscreteSpace) -> Result<Distribution> {
        let mut probs = vec![0.0; space.len()];
        for (z, p) in self.latents() {
            probs[space.index_of(&(self.decode)(&z))?] += p;
        }
        Distribution::new(space, probs)
    }

    /// `P^a(y' | y)`: draw `z` from its posterior given `g(z) = y`, redraw
    /// latent block `a`, decode. Images outside the decoder's range stay put.
    pub fn family(&self, space: &DiscreteSpace) -> Result<ResamplingFamily> {
        ensure!(
            self.blocks.len() == space.n_blocks(),
            "{} latent blocks for {} image blocks",
            self.blocks.len(),
            space.n_blocks()
        );
        let latents = self.latents();
        let coded: Vec<usize> = latents
            .iter()
            .map(|(z, _)| space.index_of(&(self.decode)(z)))
            .collect::<Result<_>>()?;
        let n = space.len();
        let mut kernels = Vec::with_capacity(self.blocks.len());
        for (a, values) in self.blocks.iter().enumerate() {
            let mut table = vec![vec![0.0; n]; n];
            let mut mass = vec![0.0; n];
            for ((z, p), &i) in latents.iter().zip(&coded) {
                mass[i] += p;
                for &(v, q) in values {
                    let mut zt = z.clone();
                    zt[a] = v;
                    let j = space.index_of(&(self.decode)(&zt))?;
                    table[i][j] += p * q;
                }
            }
            for (i, row) in table.iter_mut().enumerate() {
                if mass[i] > 0.0 {
                    row.iter_mut().for_each(|x| *x /= mass[i]);
                } else {
                    row[i] = 1.0;
                }
            }
            kernels.push(DiscreteConditional::new(space, table)?);
        }
        ResamplingFamily::new(space.clone(), kernels)
    }
}

/// Distribution of `y*` after resampling every block in `order`, starting
/// from `start`.
pub fn sequential_resample_distribution(
    family: &ResamplingFamily,
    start: &Distribution,
    order: &[usize],
) -> Result<Distribution> {
    ensure!(start.probs.len() == family.space.len(), "support mismatch");
    Ok(family.sequential_kernel(order)?.push(start))
}

/// Orders checked by [`is_block_resampling`].
pub fn orders_to_check(n_blocks: usize, seed: u64) -> Vec<Vec<usize>> {
    let id: Vec<usize> = (0..n_blocks).collect();
    if n_blocks <= MAX_EXHAUSTIVE_BLOCKS {
        permutations(&id)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..SAMPLED_ORDERS)
            .map(|_| {
                let mut o = id.clone();
                o.shuffle(&mut rng);
                o
            })
            .collect()
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (k, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(k);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Outcome of one order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub order: Vec<usize>,
    /// Largest TV between `P(y* | y^(0) = y)` and `P` over starts `y` with
    /// positive base mass.
    pub conditional_tv: f64,
    /// TV between the law of `y*` with `y^(0) ~ P` and `P`.
    pub marginal_tv: f64,
    /// TV between the joint law of `(y^(0), y*)` and `P x P`.
    pub independence_tv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplingCheck {
    pub passed: bool,
    pub tol: f64,
    pub max_tv: f64,
    pub orders: Vec<OrderCheck>,
}

fn check_one_order(family: &ResamplingFamily, base: &Distribution, order: &[usize]) -> Result<OrderCheck> {
    let k = family.sequential_kernel(order)?;
    let mut conditional_tv: f64 = 0.0;
    let mut independence = 0.0;
    for (i, &pi) in base.probs.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        let row = Distribution { probs: k.row(i).to_vec() };
        conditional_tv = conditional_tv.max(row.tv(base));
        independence += pi * row.tv(base);
    }
    Ok(OrderCheck {
        order: order.to_vec(),
        conditional_tv,
        marginal_tv: k.push(base).tv(base),
        independence_tv: independence,
    })
}

/// Checks whether resampling every block, from any starting image drawn
/// from `base`, yields `base` again, for every order (or a seeded sample of
/// 24 orders above four blocks). Passing means the conditional TV stays
/// within `tol` for each order.
pub fn is_block_resampling(family: &ResamplingFamily, base: &Distribution, tol: f64) -> Result<ResamplingCheck> {
    ensure!(base.probs.len() == family.space.len(), "support mismatch");
    let orders = orders_to_check(family.n_blocks(), 0)
        .iter()
        .map(|o| check_one_order(family, base, o))
        .collect::<Result<Vec<_>>>()?;
    let max_tv = orders.iter().map(|o| o.conditional_tv).fold(0.0, f64::max);
    Ok(ResamplingCheck {
        passed: max_tv <= tol,
        tol,
        max_tv,
        orders,
    })
}

/// Expected off-block distortion, with `D` the squared pixel difference
/// summed over a block.
#[derive(Clone, Debug, PartialEq)]
pub struct LdbrObjective {
    /// `E_y E_{y' ~ P^a} sum_{b != a} D(y_b, y'_b)` for each `a`.
    pub per_block: Vec<f64>,
}

impl LdbrObjective {
    /// Sum over blocks, the quantity minimized.
    pub fn total(&self) -> f64 {
        self.per_block.iter().sum()
    }

    pub fn mean_per_block(&self) -> f64 {
        self.total() / self.per_block.len() as f64
    }
}

pub fn ldbr_objective(family: &ResamplingFamily, base: &Distribution) -> Result<LdbrObjective> {
    let space = &family.space;
    ensure!(base.probs.len() == space.len(), "support mismatch");
    let per_block = family
        .kernels
        .iter()
        .enumerate()
        .map(|(a, k)| {
            let mut e = 0.0;
            for (i, &pi) in base.probs.iter().enumerate() {
                for (j, &q) in k.row(i).iter().enumerate() {
                    if pi * q != 0.0 {
                        let d: f64 = (0..space.n_blocks())
                            .filter(|&b| b != a)
                            .map(|b| space.block_sq_dist(i, j, b))
                            .sum();
                        e += pi * q * d;
                    }
                }
            }
            e
        })
        .collect();
    Ok(LdbrObjective { per_block })
}

/// Exact account of sequential inpainting on two perfectly correlated
/// binary pixels started from `(1, 1)`.
#[derive(Clone, Debug)]
pub struct CounterexampleReport {
    /// `P(y_0 = 1 | y_1 = 1)` under the base.
    pub p_y0_given_y1: f64,
    pub p_y1_given_y0: f64,
    /// Law of `y*` for each order, as `(order, P(1,1), P(0,0))`.
    pub finals: Vec<(Vec<usize>, f64, f64)>,
    /// Probability of ever reaching `(0, 0)`, over all orders.
    pub p_reach_00: f64,
    /// TV between the law of `y*` and the base, worst order.
    pub tv: f64,
    pub check: ResamplingCheck,
    pub inpainting: LdbrObjective,
    pub trivial: LdbrObjective,
    pub trivial_check: ResamplingCheck,
}

pub fn two_pixel_space() -> DiscreteSpace {
    DiscreteSpace::pixelwise(&[0, 1], 2).expect("four-image space")
}

pub fn two_pixel_base(space: &DiscreteSpace) -> Distribution {
    Distribution::from_points(space, &[(&[1, 1], 0.5), (&[0, 0], 0.5)]).expect("points in support")
}

pub fn sequential_inpainting_counterexample() -> Result<CounterexampleReport> {
    let space = two_pixel_space();
    let base = two_pixel_base(&space);
    let family = ResamplingFamily::inpainting(&space, &base);
    let start = Distribution::point(&space, &[1, 1])?;
    let i11 = space.index_of(&[1, 1])?;
    let i10 = space.index_of(&[1, 0])?;
    let i01 = space.index_of(&[0, 1])?;
    let i00 = space.index_of(&[0, 0])?;
    // Block 0 is pixel 0: its kernel conditions on pixel 1 and vice versa.
    let p_y0_given_y1 = family.kernels[0].row(i11)[i11] + family.kernels[0].row(i11)[i10];
    let p_y1_given_y0 = family.kernels[1].row(i11)[i11] + family.kernels[1].row(i11)[i01];
    let mut finals = Vec::new();
    let mut p_reach_00: f64 = 0.0;
    let mut tv: f64 = 0.0;
    for order in orders_to_check(2, 0) {
        let mut d = start.clone();
        for &a in &order {
            d = family.kernels[a].push(&d);
            p_reach_00 = p_reach_00.max(d.probs[i00]);
        }
        tv = tv.max(d.tv(&base));
        finals.push((order, d.probs[i11], d.probs[i00]));
    }
    let trivial = ResamplingFamily::trivial(&space, &base);
    Ok(CounterexampleReport {
        p_y0_given_y1,
        p_y1_given_y0,
        finals,
        p_reach_00,
        tv,
        check: is_block_resampling(&family, &base, EXACT_TV_TOL)?,
        inpainting: ldbr_objective(&family, &base)?,
        trivial: ldbr_objective(&trivial, &base)?,
        trivial_check: is_block_resampling(&trivial, &base, EXACT_TV_TOL)?,
    })
}

fn order_label(order: &[usize]) -> String {
    order.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

impl CounterexampleReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "two-pixel sequential inpainting, base P(1,1) = P(0,0) = 0.5, start (1,1)");
        let _ = writeln!(s, "P(y0=1 | y1=1) = {}", self.p_y0_given_y1);
        let _ = writeln!(s, "P(y1=1 | y0=1) = {}", self.p_y1_given_y0);
        for (o, p11, p00) in &self.finals {
            let _ = writeln!(s, "order {}: P(y*=(1,1)) = {p11}, P(y*=(0,0)) = {p00}", order_label(o));
        }
        let _ = writeln!(s, "P(reach (0,0)) = {}", self.p_reach_00);
        let _ = writeln!(s, "TV(y*, P) = {}", self.tv);
        let _ = writeln!(
            s,
            "inpainting: block-resampling = {}, objective total = {}",
            self.check.passed,
            self.inpainting.total()
        );
        let _ = writeln!(
            s,
            "trivial: block-resampling = {} (max TV {:e}), objective per block = {}, total = {}",
            self.trivial_check.passed,
            self.trivial_check.max_tv,
            self.trivial.mean_per_block(),
            self.trivial.total()
        );
        s
    }

    /// `order,tv_distance,objective` rows for both families.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["family", "order", "tv_distance", "objective"]).map_err(io)?;
        for (name, check, obj) in [
            ("inpainting", &self.check, &self.inpainting),
            ("trivial", &self.trivial_check, &self.trivial),
        ] {
            for o in &check.orders {
                w.write_record([
                    name.to_string(),
                    order_label(&o.order),
                    o.conditional_tv.to_string(),
                    obj.total().to_string(),
                ])
                .map_err(io)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}
