use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssn_core::blocks::*;
use ssn_core::Tensor;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[1, c, h, w], &mut rng)
}

fn grids() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h, 1..=w))
}

proptest! {
    #[test]
    fn every_pixel_in_exactly_one_block((h, w, r, c) in grids()) {
        let p = BlockPartition::grid_rect(h, w, r, c).unwrap();
        prop_assert_eq!(p.n_blocks(), r * c);
        let mut hits = vec![0u32; h * w];
        for a in 0..p.n_blocks() {
            for &(i, j) in p.block(a).unwrap() {
                hits[i * w + j] += 1;
                prop_assert_eq!(p.block_of(i, j), a);
            }
        }
        prop_assert!(hits.iter().all(|&k| k == 1));
    }

    #[test]
    fn extract_then_scatter_restores_the_image((h, w, r, c) in grids(), seed in any::<u64>()) {
        let p = BlockPartition::grid_rect(h, w, r, c).unwrap();
        let y = image(3, h, w, seed);
        let mut rebuilt = Tensor::zeros(y.shape());
        for a in 0..p.n_blocks() {
            rebuilt = scatter_block(&rebuilt, &p, a, &extract_block(&y, &p, a).unwrap()).unwrap();
        }
        prop_assert!(rebuilt.bit_eq(&y));
    }

    #[test]
    fn distortion_axioms((h, w, r, c) in grids(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let p = BlockPartition::grid_rect(h, w, r, c).unwrap();
        let (y, yp) = (image(3, h, w, s1), image(3, h, w, s2));
        for a in 0..p.n_blocks() {
            let d = distortion_outside(&y, &yp, &p, a).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, distortion_outside(&yp, &y, &p, a).unwrap());
            prop_assert_eq!(distortion_outside(&y, &y, &p, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn changes_inside_the_block_are_free((h, w, r, c) in grids(), s1 in any::<u64>(), a in any::<prop::sample::Index>()) {
        let p = BlockPartition::grid_rect(h, w, r, c).unwrap();
        let a = a.index(p.n_blocks());
        let y = image(3, h, w, s1);
        let noise = extract_block(&image(3, h, w, s1 ^ 1), &p, a).unwrap();
        let yp = scatter_block(&y, &p, a, &noise).unwrap();
        prop_assert_eq!(distortion_outside(&y, &yp, &p, a).unwrap(), 0.0);
    }

    #[test]
    fn compose_is_idempotent(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), mask in any::<u32>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentGrid::sample(rows, cols, 3, &mut rng, 0);
        let zn = LatentGrid::sample(rows, cols, 3, &mut rng, 1);
        let targets: BTreeSet<usize> = (0..rows * cols).filter(|a| mask >> a & 1 == 1).collect();
        let once = compose_latent(&z, &zn, &targets).unwrap();
        prop_assert_eq!(&compose_latent(&once, &zn, &targets).unwrap(), &once);
        for a in 0..rows * cols {
            let src = if targets.contains(&a) { &zn } else { &z };
            prop_assert!(once.block_bit_eq(src, a));
        }
    }

    #[test]
    fn resampling_every_block_in_any_order_gives_the_fresh_latent(
        rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), perm_seed in any::<u64>()
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentGrid::sample(rows, cols, 4, &mut rng, 0);
        let zn = LatentGrid::sample(rows, cols, 4, &mut rng, 1);
        let mut order: Vec<usize> = (0..rows * cols).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut cur = z;
        for a in order {
            cur = compose_latent(&cur, &zn, &BTreeSet::from([a])).unwrap();
        }
        prop_assert_eq!(cur, zn);
    }
}

#[test]
fn compose_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = LatentGrid::sample(2, 2, 5, &mut rng, 0);
    let zn = LatentGrid::sample(2, 2, 5, &mut rng, 1);
    assert_eq!(compose_latent(&z, &zn, &BTreeSet::new()).unwrap(), z);
    assert_eq!(compose_latent(&z, &zn, &(0..4).collect()).unwrap(), zn);
    let one = compose_latent(&z, &zn, &BTreeSet::from([2])).unwrap();
    assert!(one.block_bit_eq(&zn, 2));
    assert!([0, 1, 3].iter().all(|&a| one.block_bit_eq(&z, a)));
    assert_eq!(one.lineage(), &[0, 0, 1, 0]);
    assert!(compose_latent(&z, &zn, &BTreeSet::from([4])).is_err());
    let other = LatentGrid::sample(2, 2, 4, &mut rng, 2);
    assert!(compose_latent(&z, &other, &BTreeSet::new()).is_err());
}
