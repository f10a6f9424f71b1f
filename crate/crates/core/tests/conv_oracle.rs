use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssn_core::{Graph, Padding, Tensor};

/// Direct six-loop convolution.
fn conv_naive(x: &Tensor, w: &Tensor, padding: Padding) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * o * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let (si, sj) = (i as isize + u as isize - p, j as isize + v as isize - p);
                                let (si, sj) = match padding {
                                    Padding::Zero => {
                                        if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                            continue;
                                        }
                                        (si as usize, sj as usize)
                                    }
                                    Padding::Circular => {
                                        (si.rem_euclid(h as isize) as usize, sj.rem_euclid(wd as isize) as usize)
                                    }
                                };
                                acc += w.data()[((oi * c + ci) * k + u) * k + v]
                                    * x.data()[((ni * c + ci) * h + si) * wd + sj];
                            }
                        }
                    }
                    out[((ni * o + oi) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.mul(b).unwrap().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops_and_its_adjoints(
        seed in 0u64..10_000,
        n in 1usize..3,
        c in 1usize..4,
        o in 1usize..4,
        h in 1usize..7,
        wd in 1usize..7,
        half in 0usize..3,
        circular in any::<bool>(),
    ) {
        let k = 2 * half + 1;
        let padding = if circular { Padding::Circular } else { Padding::Zero };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, c, h, wd], &mut rng);
        let w = Tensor::randn(&[o, c, k, k], &mut rng);
        let q = Tensor::randn(&[n, o, h, wd], &mut rng);
        let y = x.conv2d(&w, padding).unwrap();
        prop_assert!(y.max_abs_diff(&conv_naive(&x, &w, padding)).unwrap() < 1e-12);

        // <conv(x, w), q> = <x, dx> = <w, dw>
        let g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let l = xv.conv2d(wv, padding).unwrap().mul_const(&q).unwrap().sum();
        let grads = g.backward(l, &[xv, wv]).unwrap();
        let lhs = dot(&y, &q);
        let tol = 1e-10 * (1.0 + lhs.abs());
        prop_assert!((dot(&x, &grads[0]) - lhs).abs() < tol);
        prop_assert!((dot(&w, &grads[1]) - lhs).abs() < tol);
    }
}

#[test]
fn conv_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 8, 16, 16], &mut rng);
    let w = Tensor::randn(&[8, 8, 3, 3], &mut rng);
    assert!(x.conv2d(&w, Padding::Zero).unwrap().bit_eq(&x.conv2d(&w, Padding::Zero).unwrap()));
}
