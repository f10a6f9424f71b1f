use ssn_core::ldbr::*;

/// Law of `y*` by summing over every path of intermediate images.
fn path_sum(family: &ResamplingFamily, start: &Distribution, order: &[usize]) -> Vec<f64> {
    let n = family.space.len();
    let mut out = vec![0.0; n];
    fn walk(f: &ResamplingFamily, order: &[usize], i: usize, p: f64, out: &mut [f64]) {
        match order.split_first() {
            None => out[i] += p,
            Some((&a, rest)) => {
                for (j, &q) in f.kernels[a].row(i).iter().enumerate() {
                    if q > 0.0 {
                        walk(f, rest, j, p * q, out);
                    }
                }
            }
        }
    }
    for (i, &p) in start.probs.iter().enumerate() {
        if p > 0.0 {
            walk(family, order, i, p, &mut out);
        }
    }
    out
}

fn independent_base(space: &DiscreteSpace, marginals: &[f64]) -> Distribution {
    let probs = space
        .support()
        .iter()
        .map(|y| {
            y.iter()
                .zip(marginals)
                .map(|(&v, &p1)| if v == 1 { p1 } else { 1.0 - p1 })
                .product()
        })
        .collect();
    Distribution::new(space, probs).unwrap()
}

#[test]
fn inpainting_conditionals_are_deterministic() {
    let r = sequential_inpainting_counterexample().unwrap();
    assert_eq!(r.p_y0_given_y1, 1.0);
    assert_eq!(r.p_y1_given_y0, 1.0);
}

#[test]
fn inpainting_never_reaches_zero_zero() {
    let r = sequential_inpainting_counterexample().unwrap();
    assert_eq!(r.p_reach_00, 0.0);
    for (_, p11, p00) in &r.finals {
        assert_eq!((*p11, *p00), (1.0, 0.0));
    }
    // 0.5 * (|1 - 1/2| + |0 - 1/2|)
    assert_eq!(r.tv, 0.5);
    assert!(!r.check.passed);
    assert_eq!(r.check.max_tv, 0.5);
    assert_eq!(r.inpainting.total(), 0.0);
}

#[test]
fn trivial_family_on_two_pixels() {
    let r = sequential_inpainting_counterexample().unwrap();
    assert!(r.trivial_check.passed);
    assert!(r.trivial_check.max_tv < 1e-12);
    // Redrawing from the base flips the kept pixel with probability 1/2.
    assert_eq!(r.trivial.per_block, vec![0.5, 0.5]);
    assert_eq!(r.trivial.total(), 1.0);
}

#[test]
fn report_formats() {
    let r = sequential_inpainting_counterexample().unwrap();
    let text = r.to_text();
    assert!(text.contains("TV(y*, P) = 0.5"));
    assert!(text.contains("P(reach (0,0)) = 0"));
    let csv = r.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("family,order,tv_distance,objective"));
    assert!(csv.contains("inpainting,0-1,0.5,0"));
    assert!(csv.contains("trivial,1-0,0,1"));
}

#[test]
fn identity_kernels_keep_the_marginal_but_fail() {
    let space = DiscreteSpace::pixelwise(&[0, 1], 3).unwrap();
    let base = independent_base(&space, &[0.3, 0.6, 0.8]);
    let fam = ResamplingFamily::identity(&space);
    let d = sequential_resample_distribution(&fam, &base, &[2, 0, 1]).unwrap();
    assert_eq!(d, base);
    let check = is_block_resampling(&fam, &base, EXACT_TV_TOL).unwrap();
    assert!(!check.passed);
    assert!(check.orders.iter().all(|o| o.marginal_tv == 0.0));
    assert!(check.orders.iter().all(|o| o.independence_tv > 0.1));
    assert_eq!(ldbr_objective(&fam, &base).unwrap().total(), 0.0);
}

#[test]
fn trivial_family_is_a_block_resampling_for_every_order() {
    let space = DiscreteSpace::new(&[0, 1], vec![vec![0, 3], vec![1], vec![2], vec![4]]).unwrap();
    let probs: Vec<f64> = (0..space.len()).map(|k| ((k * 7 % 5) + 1) as f64).collect();
    let z: f64 = probs.iter().sum();
    let base = Distribution::new(&space, probs.iter().map(|p| p / z).collect()).unwrap();
    let fam = ResamplingFamily::trivial(&space, &base);
    let check = is_block_resampling(&fam, &base, EXACT_TV_TOL).unwrap();
    assert_eq!(check.orders.len(), 24);
    assert!(check.passed);
    assert!(check.max_tv < 1e-12);
    assert!(check.orders.iter().all(|o| o.independence_tv < 1e-12));
}

#[test]
fn inpainting_passes_when_blocks_are_independent() {
    let space = DiscreteSpace::pixelwise(&[0, 1], 4).unwrap();
    let base = independent_base(&space, &[0.1, 0.45, 0.7, 0.95]);
    let fam = ResamplingFamily::inpainting(&space, &base);
    let check = is_block_resampling(&fam, &base, EXACT_TV_TOL).unwrap();
    assert!(check.passed, "max tv {}", check.max_tv);
    assert!(check.max_tv < 1e-12);
}

#[test]
fn inpainting_fails_when_blocks_are_coupled() {
    let space = DiscreteSpace::pixelwise(&[0, 1], 3).unwrap();
    let mut probs = vec![0.05; 8];
    probs[0] = 0.35;
    probs[7] = 0.35;
    let base = Distribution::new(&space, probs).unwrap();
    let fam = ResamplingFamily::inpainting(&space, &base);
    assert!(!is_block_resampling(&fam, &base, EXACT_TV_TOL).unwrap().passed);
}

#[test]
fn chained_products_match_path_enumeration() {
    let space = DiscreteSpace::pixelwise(&[0, 1], 3).unwrap();
    let probs: Vec<f64> = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0].iter().map(|p| p / 31.0).collect();
    let base = Distribution::new(&space, probs).unwrap();
    let fam = ResamplingFamily::inpainting(&space, &base);
    for order in orders_to_check(3, 0) {
        let d = sequential_resample_distribution(&fam, &base, &order).unwrap();
        let oracle = path_sum(&fam, &base, &order);
        for (a, b) in d.probs.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn bad_orders_are_rejected() {
    let space = two_pixel_space();
    let base = two_pixel_base(&space);
    let fam = ResamplingFamily::trivial(&space, &base);
    assert!(sequential_resample_distribution(&fam, &base, &[0]).is_err());
    assert!(sequential_resample_distribution(&fam, &base, &[1, 1]).is_err());
}

fn xor_decoder() -> LatentDecoder {
    // Three binary latent blocks; pixel k mixes latent blocks k and k - 1,
    // so image blocks are dependent but the code is invertible.
    LatentDecoder {
        blocks: vec![
            vec![(0, 0.3), (1, 0.7)],
            vec![(0, 0.6), (1, 0.4)],
            vec![(0, 0.15), (1, 0.85)],
        ],
        decode: Box::new(|z| vec![z[0], z[0] ^ z[1], z[1] ^ z[2]]),
    }
}

#[test]
fn latent_block_resampling_passes_for_every_order() {
    let space = DiscreteSpace::pixelwise(&[0, 1], 3).unwrap();
    let dec = xor_decoder();
    let base = dec.base(&space).unwrap();
    let fam = dec.family(&space).unwrap();
    let check = is_block_resampling(&fam, &base, EXACT_TV_TOL).unwrap();
    assert!(check.passed, "max tv {}", check.max_tv);
    assert!(check.max_tv < 1e-12);
    // Blocks are coupled, so inpainting on the same base does not pass.
    let inpaint = ResamplingFamily::inpainting(&space, &base);
    assert!(!is_block_resampling(&inpaint, &base, EXACT_TV_TOL).unwrap().passed);
    let d_latent = ldbr_objective(&fam, &base).unwrap().total();
    let d_trivial = ldbr_objective(&ResamplingFamily::trivial(&space, &base), &base).unwrap().total();
    assert!(d_latent < d_trivial);
}

#[test]
fn objective_is_additive_and_nonnegative() {
    let space = DiscreteSpace::pixelwise(&[0, 1, 2], 2).unwrap();
    let probs: Vec<f64> = (1..=9).map(|k| k as f64 / 45.0).collect();
    let base = Distribution::new(&space, probs).unwrap();
    for fam in [
        ResamplingFamily::trivial(&space, &base),
        ResamplingFamily::inpainting(&space, &base),
    ] {
        let o = ldbr_objective(&fam, &base).unwrap();
        assert!(o.per_block.iter().all(|&x| x >= 0.0));
        assert!((o.total() - o.per_block.iter().sum::<f64>()).abs() < 1e-15);
    }
}
