use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssn_core::model::checkpoint;
use ssn_core::model::loss::{distortion_regularizer, path_length, r1_penalty, spatial_path_length, NORM_FLOOR};
use ssn_core::model::network::{discriminate, generate, init_discriminator, init_generator, map_latent};
use ssn_core::model::train::compose_batch;
use ssn_core::model::{generate_with, GeneratorConfig, PathLengthMode};
use ssn_core::{compose_latent, BlockPartition, Error, Graph, LatentGrid, Padding, Tensor, TrainConfig, TrainState};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.generator.latent_rows = 2;
    c.generator.latent_cols = 2;
    c.generator.n_z = 4;
    c.generator.mapping_depth = 2;
    c.generator.channels = vec![4, 4, 4];
    c.discriminator.channels = vec![4, 4];
    c.training.batch = 2;
    c
}

fn mapped(cfg: &GeneratorConfig, params: &ssn_core::model::ParamStore, z: &Tensor) -> Tensor {
    let g = Graph::new();
    let p = params.bind(&g, false);
    map_latent(&p, cfg, g.constant(z.clone())).unwrap().value()
}

fn position(t: &Tensor, n: usize, i: usize, j: usize) -> Vec<f64> {
    let s = t.shape();
    (0..s[1]).map(|c| t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]).collect()
}

#[test]
fn mapping_acts_on_each_latent_block_alone() {
    let cfg = TrainConfig::toy().generator;
    let params = init_generator(&cfg, &mut rng(1));
    let z = Tensor::randn(&[1, cfg.n_z, 4, 4], &mut rng(2));
    let zn = mapped(&cfg, &params, &z);

    // Changing block (1, 2) only moves the mapped latent there.
    let mut d = z.to_vec();
    for c in 0..cfg.n_z {
        d[(c * 4 + 1) * 4 + 2] += 1.0;
    }
    let zn2 = mapped(&cfg, &params, &Tensor::from_vec(z.shape(), d).unwrap());
    for i in 0..4 {
        for j in 0..4 {
            let same = position(&zn, 0, i, j) == position(&zn2, 0, i, j);
            assert_eq!(same, (i, j) != (1, 2), "position {i},{j}");
        }
    }

    // The same vector maps to the same output wherever it sits.
    let mut swapped = z.to_vec();
    for c in 0..cfg.n_z {
        swapped.swap(c * 16, c * 16 + 15);
    }
    let zs = mapped(&cfg, &params, &Tensor::from_vec(z.shape(), swapped).unwrap());
    for (a, b) in position(&zn, 0, 0, 0).iter().zip(position(&zs, 0, 3, 3)) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn zero_depth_mapping_is_the_identity() {
    let mut cfg = TrainConfig::toy().generator;
    cfg.mapping_depth = 0;
    let params = init_generator(&cfg, &mut rng(1));
    let z = Tensor::randn(&[2, cfg.n_z, 4, 4], &mut rng(2));
    assert!(mapped(&cfg, &params, &z).bit_eq(&z));
}

#[test]
fn default_generator_shape_and_determinism() {
    let mut cfg = TrainConfig::default();
    cfg.generator.n_z = 8;
    let state = TrainState::new(cfg.clone()).unwrap();
    let z = Tensor::randn(&[2, 8, 4, 4], &mut rng(3));
    let img = state.generate(&z).unwrap();
    assert_eq!(img.shape(), &[2, 3, 32, 32]);
    assert!(img.data().iter().all(|x| x.abs() <= 1.0));
    assert!(img.bit_eq(&state.generate(&z).unwrap()));
    assert!(img.bit_eq(&TrainState::new(cfg).unwrap().generate(&z).unwrap()));
}

#[test]
fn resampling_every_block_in_turn_gives_the_fresh_latent_image() {
    for seed in 0..3 {
        let cfg = TrainConfig::toy();
        let gc = &cfg.generator;
        let state = TrainState::new(TrainConfig {
            training: ssn_core::model::TrainSettings { seed, ..cfg.training.clone() },
            ..cfg.clone()
        })
        .unwrap();
        let mut r = rng(100 + seed);
        let z = LatentGrid::sample(gc.latent_rows, gc.latent_cols, gc.n_z, &mut r, 0);
        let fresh = LatentGrid::sample(gc.latent_rows, gc.latent_cols, gc.n_z, &mut r, 1);
        let mut cur = z.clone();
        for a in 0..gc.n_blocks() {
            cur = compose_latent(&cur, &fresh, &BTreeSet::from([a])).unwrap();
            for b in 0..gc.n_blocks() {
                let want = if b <= a { &fresh } else { &z };
                assert!(cur.block_bit_eq(want, b));
            }
        }
        let got = state.generate(&cur.to_nchw()).unwrap();
        assert!(got.bit_eq(&state.generate(&fresh.to_nchw()).unwrap()));
    }
}

#[test]
fn compose_batch_replaces_one_position_per_example() {
    let z = Tensor::randn(&[2, 3, 2, 2], &mut rng(1));
    let f = Tensor::randn(&[2, 3, 2, 2], &mut rng(2));
    let out = compose_batch(&z, &f, &[1, 3]).unwrap();
    for n in 0..2 {
        for a in 0..4 {
            let (i, j) = (a / 2, a % 2);
            let src = if a == [1, 3][n] { &f } else { &z };
            assert_eq!(position(&out, n, i, j), position(src, n, i, j));
        }
    }
    assert!(compose_batch(&z, &f, &[4, 0]).is_err());
    assert!(compose_batch(&z, &f, &[0]).is_err());
}

#[test]
fn distortion_regularizer_vanishes_without_change() {
    let cfg = TrainConfig::toy();
    let gc = &cfg.generator;
    let params = init_generator(gc, &mut rng(1));
    let z = Tensor::randn(&[2, gc.n_z, 4, 4], &mut rng(2));
    let g = Graph::new();
    let p = params.bind(&g, true);
    let (_, a) = generate(&p, gc, g.constant(z.clone()), None).unwrap();
    let (_, b) = generate(&p, gc, g.constant(compose_batch(&z, &z, &[3, 5]).unwrap()), None).unwrap();
    let rd = distortion_regularizer(a, b, &gc.partition(), &[3, 5]).unwrap();
    assert_eq!(rd.value().item(), 0.0);

    let fresh = Tensor::randn(z.shape(), &mut rng(3));
    let (_, c) = generate(&p, gc, g.constant(compose_batch(&z, &fresh, &[3, 5]).unwrap()), None).unwrap();
    let rd = distortion_regularizer(a, c, &gc.partition(), &[3, 5]).unwrap();
    assert!(rd.value().item() > 0.0);
}

#[test]
fn r1_is_zero_when_the_discriminator_ignores_its_input() {
    let cfg = TrainConfig::toy();
    let mut d = init_discriminator(&cfg.generator, &cfg.discriminator, &mut rng(1));
    let real = Tensor::randn(&[2, 3, 16, 16], &mut rng(2));
    let r1 = |d: &ssn_core::model::ParamStore| {
        let g = Graph::new();
        let p = d.bind(&g, true);
        let x = g.leaf(real.clone());
        r1_penalty(x, discriminate(&p, &cfg.discriminator, x).unwrap()).unwrap().value().item()
    };
    assert!(r1(&d) > 0.0);
    let shape = d.get("d.rgb.w").unwrap().shape().to_vec();
    d.insert("d.rgb.w", Tensor::zeros(&shape));
    assert_eq!(r1(&d), 0.0);
}

#[test]
fn distortion_weight_changes_only_the_generator_update() {
    let real = Tensor::randn(&[8, 3, 16, 16], &mut rng(9)).map(f64::tanh);
    let run = |lambda_d: f64| {
        let mut cfg = TrainConfig::toy();
        cfg.regularizers.lambda_d = lambda_d;
        let mut s = TrainState::new(cfg).unwrap();
        let logs = s.train_step(&real).unwrap();
        (s, logs)
    };
    let (a, la) = run(0.0);
    let (b, lb) = run(100.0);
    assert!(a.d.bit_eq(&b.d));
    assert!(!a.g.bit_eq(&b.g));
    assert_eq!(la.distortion, None);
    assert!(lb.distortion.unwrap() > 0.0 && lb.resampled_block.unwrap() < 16);
}

#[test]
fn lazy_interval_skips_regularizers_between_multiples() {
    let mut cfg = small();
    cfg.regularizers.lazy_interval = 2;
    cfg.regularizers.lambda_d = 1.0;
    let mut s = TrainState::new(cfg).unwrap();
    let real = Tensor::randn(&[2, 3, 8, 8], &mut rng(1)).map(f64::tanh);
    let first = s.train_step(&real).unwrap();
    let second = s.train_step(&real).unwrap();
    assert!(first.r1.is_some() && first.path_length.is_some() && first.distortion.is_some());
    assert!(second.r1.is_none() && second.path_length.is_none() && second.distortion.is_none());
}

fn train_bytes(cfg: &TrainConfig, steps: u64) -> Vec<u8> {
    let mut s = TrainState::new(cfg.clone()).unwrap();
    let data = ssn_core::metrics::ablation::dataset_for(cfg).unwrap();
    ssn_core::model::train::train(&mut s, steps, |k| data.batch(k, cfg.training.batch), |_| {}).unwrap();
    checkpoint::to_bytes(&s).unwrap()
}

#[test]
fn training_is_bit_reproducible() {
    let mut cfg = small();
    cfg.regularizers.lambda_d = 10.0;
    let a = train_bytes(&cfg, 4);
    assert_eq!(a, train_bytes(&cfg, 4));
    cfg.training.seed += 1;
    assert_ne!(a, train_bytes(&cfg, 4));
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let mut cfg = small();
    cfg.regularizers.pl_mode = PathLengthMode::Spatial;
    let bytes = train_bytes(&cfg, 2);
    let loaded = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.step, 2);
    assert_eq!(loaded.config, cfg);
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());

    let dir = std::env::temp_dir().join(format!("ssn-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("state.ssnc");
    checkpoint::save(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let z = Tensor::randn(&[1, 4, 2, 2], &mut rng(5));
    let again = checkpoint::load(&path).unwrap();
    assert!(generate_with(&again.config, &again.g, &z).unwrap().bit_eq(&loaded.generate(&z).unwrap()));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn non_finite_data_aborts_with_a_snapshot() {
    let mut s = TrainState::new(small()).unwrap();
    let mut real = Tensor::randn(&[2, 3, 8, 8], &mut rng(1)).to_vec();
    real[7] = f64::NAN;
    let err = s.train_step(&Tensor::from_vec(&[2, 3, 8, 8], real).unwrap()).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("step 0") && msg.contains("snapshot")),
        other => panic!("unexpected {other:?}"),
    }
}

// Linear "generators" img = L w with L built from plain tensor ops, so the
// Jacobian is read off column by column without autodiff.

fn linear_map(w: &Tensor, kernel: &Tensor, factor: usize) -> Tensor {
    let g = Graph::new();
    let up = g.constant(w.clone()).upsample(factor).unwrap();
    up.conv2d(g.constant(kernel.clone()), Padding::Zero).unwrap().value()
}

/// Penalty from the explicit Jacobian: for each image block b, the column
/// `⟨L e_q, probe·1_b⟩` restricted to each latent position a.
fn spatial_pl_oracle(
    w_shape: &[usize],
    kernel: &Tensor,
    factor: usize,
    probe: &Tensor,
    p: &BlockPartition,
    gp: f64,
    gm: f64,
) -> f64 {
    let (c, rows, cols) = (w_shape[1], w_shape[2], w_shape[3]);
    let numel = c * rows * cols;
    let columns: Vec<Tensor> = (0..numel)
        .map(|q| {
            let mut e = vec![0.0; numel];
            e[q] = 1.0;
            linear_map(&Tensor::from_vec(&[1, c, rows, cols], e).unwrap(), kernel, factor)
        })
        .collect();
    let mut total = 0.0;
    for b in 0..p.n_blocks() {
        let mask = p.outside_mask(&[b]).unwrap().map(|x| 1.0 - x);
        let yb = probe.mul(&mask.broadcast_to(probe.shape()).unwrap()).unwrap();
        for a in 0..rows * cols {
            let sq: f64 = (0..c).map(|ch| columns[ch * rows * cols + a].mul(&yb).unwrap().sum().powi(2)).sum();
            let norm = sq.max(NORM_FLOOR).sqrt();
            let target = if a == b { gp } else { gm };
            total += (norm - target).powi(2);
        }
    }
    total
}

fn spatial_pl_graph(w: &Tensor, kernel: &Tensor, factor: usize, probe: &Tensor, p: &BlockPartition, gp: f64, gm: f64) -> f64 {
    let g = Graph::new();
    let wv = g.leaf(w.clone());
    let img = wv.upsample(factor).unwrap().conv2d(g.constant(kernel.clone()), Padding::Zero).unwrap();
    spatial_path_length(img, wv, probe, p, gp, gm).unwrap().value().item()
}

#[test]
fn spatial_path_length_matches_the_linear_closed_form() {
    let mut r = rng(11);
    for (factor, k, gp, gm) in [(1, 1, 1.0, 0.1), (4, 1, 1.0, 0.1), (4, 3, 1.0, 0.1), (2, 3, 0.5, 0.5)] {
        let (c, rows, cols) = (3, 2, 2);
        let w = Tensor::randn(&[1, c, rows, cols], &mut r);
        let kernel = Tensor::randn(&[3, c, k, k], &mut r);
        let (h, wd) = (rows * factor, cols * factor);
        let probe = Tensor::randn(&[1, 3, h, wd], &mut r);
        let p = BlockPartition::grid_rect(h, wd, rows, cols).unwrap();
        let got = spatial_pl_graph(&w, &kernel, factor, &probe, &p, gp, gm);
        let want = spatial_pl_oracle(w.shape(), &kernel, factor, &probe, &p, gp, gm);
        assert!((got - want).abs() < 1e-8, "factor {factor} k {k}: {got} vs {want}");
    }
}

#[test]
fn block_local_linear_map_has_only_diagonal_terms() {
    // A 1x1 kernel with one latent position per block: every off-diagonal
    // norm is the floor, so the penalty is explicit.
    let mut r = rng(12);
    let (c, rows, cols, f) = (2, 2, 2, 3);
    let w = Tensor::randn(&[1, c, rows, cols], &mut r);
    let kernel = Tensor::randn(&[3, c, 1, 1], &mut r);
    let probe = Tensor::randn(&[1, 3, rows * f, cols * f], &mut r);
    let p = BlockPartition::grid_rect(rows * f, cols * f, rows, cols).unwrap();
    let (gp, gm) = (1.0, 0.1);
    let mut want = 0.0;
    for b in 0..4 {
        let (bi, bj) = (b / 2, b % 2);
        let mut sq = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            for o in 0..3 {
                for i in bi * f..(bi + 1) * f {
                    for j in bj * f..(bj + 1) * f {
                        acc += kernel.data()[o * c + ch] * probe.data()[(o * rows * f + i) * cols * f + j];
                    }
                }
            }
            sq += acc * acc;
        }
        want += (sq.sqrt() - gp).powi(2) + 3.0 * (NORM_FLOOR.sqrt() - gm).powi(2);
    }
    let got = spatial_pl_graph(&w, &kernel, f, &probe, &p, gp, gm);
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn standard_path_length_on_a_linear_map() {
    let mut r = rng(13);
    let w = Tensor::randn(&[2, 2, 2, 2], &mut r);
    let kernel = Tensor::randn(&[3, 2, 3, 3], &mut r);
    let probe = Tensor::randn(&[2, 3, 4, 4], &mut r);
    let g = Graph::new();
    let wv = g.leaf(w.clone());
    let img = wv.upsample(2).unwrap().conv2d(g.constant(kernel.clone()), Padding::Zero).unwrap();
    let (pen, mean) = path_length(img, wv, &probe, 0.5).unwrap();
    let mut norms = Vec::new();
    for n in 0..2 {
        let yn = probe.example(n).unwrap();
        let mut sq = 0.0;
        for q in 0..8 {
            let mut e = vec![0.0; 8];
            e[q] = 1.0;
            let col = linear_map(&Tensor::from_vec(&[1, 2, 2, 2], e).unwrap(), &kernel, 2);
            sq += col.mul(&yn).unwrap().sum().powi(2);
        }
        norms.push(sq.sqrt());
    }
    assert!((mean - (norms[0] + norms[1]) / 2.0).abs() < 1e-10);
    let want = norms.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>() / 2.0;
    assert!((pen.value().item() - want).abs() < 1e-10);
}

#[test]
fn finer_latent_grid_resamples_each_of_its_64_blocks() {
    let mut cfg = TrainConfig::toy();
    cfg.generator.latent_rows = 8;
    cfg.generator.latent_cols = 8;
    cfg.generator.channels = vec![8, 8];
    cfg.generator.n_z = 4;
    cfg.discriminator.channels = vec![8, 8];
    let gc = cfg.generator.clone();
    assert_eq!((gc.height(), gc.n_blocks(), gc.partition().n_blocks()), (16, 64, 64));
    let state = TrainState::new(cfg).unwrap();
    let mut r = rng(7);
    let z = LatentGrid::sample(8, 8, 4, &mut r, 0);
    let fresh = LatentGrid::sample(8, 8, 4, &mut r, 1);
    let mut cur = z.clone();
    for a in (0..64).rev() {
        cur = compose_latent(&cur, &fresh, &BTreeSet::from([a])).unwrap();
    }
    assert!(state.generate(&cur.to_nchw()).unwrap().bit_eq(&state.generate(&fresh.to_nchw()).unwrap()));
    assert_eq!(state.generate(&z.to_nchw()).unwrap().shape(), &[1, 3, 16, 16]);
}
