//! Train one model per distortion weight from the same seed and score each.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{SyntheticDataset, DATASET_VERSION};
use super::{pixel_fid, pixel_ppl, resampling_distortion};
use crate::error::{ensure, Error, Result};
use crate::model::{generate_with, TrainConfig, TrainState};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Weights of the reference sweep.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0];

/// Distortions reported for FFHQ at 256x256 (distortion column of the
/// published ablation). Written to the CSV as context only; a desk-scale
/// model is not expected to reproduce them.
pub const REFERENCE_DISTORTION: [(f64, f64); 3] = [(0.0, 0.028), (100.0, 0.0043), (10000.0, 0.0001)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_fid: usize,
    pub n_ppl: usize,
    pub ppl_eps: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_fid: 512,
            n_ppl: 64,
            ppl_eps: 1e-3,
            n_pairs: 128,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    NonFinite,
    TrainingFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub lambda_d: f64,
    pub step: u64,
    pub pixel_fid: f64,
    pub pixel_ppl: f64,
    pub distortion: f64,
    pub seconds: f64,
    pub status: RowStatus,
}

const CHUNK: usize = 64;

fn generate_chunked(config: &TrainConfig, state: &TrainState, z: &Tensor) -> Result<Tensor> {
    let n = z.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let slice: Vec<Tensor> = (start..end).map(|i| z.example(i)).collect::<Result<_>>()?;
        parts.push(generate_with(config, &state.g, &Tensor::cat_batch(&slice)?)?);
        start = end;
    }
    Tensor::cat_batch(&parts)
}

pub fn dataset_for(config: &TrainConfig) -> Result<SyntheticDataset> {
    let g = &config.generator;
    ensure!(g.height() == g.width(), "synthetic data is square, generator is {}x{}", g.height(), g.width());
    ensure!(g.image_channels == 3, "synthetic data is RGB");
    SyntheticDataset::new(g.height(), config.training.data_seed)
}

/// Pixel-FID against held-out synthetic images, pixel-PPL and resampling
/// distortion, all from streams keyed by `eval.seed`.
pub fn evaluate(state: &TrainState, eval: &EvalSettings) -> Result<(f64, f64, f64)> {
    let cfg = &state.config;
    let g = &cfg.generator;
    let data = dataset_for(cfg)?;
    let latent = [g.n_z, g.latent_rows, g.latent_cols];
    let real = data.batch(u64::MAX, eval.n_fid);
    let mut rng = stream(eval.seed, &[tag("fid")]);
    let z = Tensor::randn(&[eval.n_fid, g.n_z, g.latent_rows, g.latent_cols], &mut rng);
    let fid = pixel_fid(&real, &generate_chunked(cfg, state, &z)?)?;
    let gen = |z: &Tensor| generate_chunked(cfg, state, z);
    let ppl = pixel_ppl(&gen, latent, eval.n_ppl, eval.ppl_eps, &mut stream(eval.seed, &[tag("ppl")]))?;
    let dist = resampling_distortion(&gen, latent, &g.partition(), eval.n_pairs, &mut stream(eval.seed, &[tag("dist")]))?;
    Ok((fid, ppl, dist))
}

/// Result of a sweep: one row and one final state per weight.
pub struct Sweep {
    pub rows: Vec<MetricReport>,
    pub states: Vec<Option<TrainState>>,
}

/// Train `base` once per entry of `lambdas`, from the same seed, for
/// `base.training.steps` steps each. Failures are recorded in the row and
/// the sweep moves on.
pub fn ablation_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    eval: &EvalSettings,
    mut progress: impl FnMut(f64, u64),
) -> Result<Sweep> {
    base.validate()?;
    let data = dataset_for(base)?;
    let mut rows = Vec::new();
    let mut states = Vec::new();
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.regularizers.lambda_d = lambda;
        cfg.validate()?;
        let t0 = Instant::now();
        let mut state = TrainState::new(cfg.clone())?;
        let batch = cfg.training.batch;
        let trained = crate::model::train::train(
            &mut state,
            cfg.training.steps,
            |step| data.batch(step, batch),
            |logs| progress(lambda, logs.step),
        );
        let mut row = MetricReport {
            lambda_d: lambda,
            step: state.step,
            pixel_fid: f64::NAN,
            pixel_ppl: f64::NAN,
            distortion: f64::NAN,
            seconds: 0.0,
            status: RowStatus::Ok,
        };
        match trained {
            Err(Error::NonFinite(_)) => row.status = RowStatus::TrainingFailed,
            Err(e) => return Err(e),
            Ok(()) => {
                let (fid, ppl, dist) = evaluate(&state, eval)?;
                row.pixel_fid = fid;
                row.pixel_ppl = ppl;
                row.distortion = dist;
                if ![fid, ppl, dist].iter().all(|x| x.is_finite()) {
                    row.status = RowStatus::NonFinite;
                }
            }
        }
        row.seconds = t0.elapsed().as_secs_f64();
        let ok = row.status == RowStatus::Ok;
        rows.push(row);
        states.push(ok.then_some(state));
    }
    Ok(Sweep { rows, states })
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

/// Metric rows. Leading `#` lines record the dataset version and the
/// published reference distortions.
pub fn to_csv(rows: &[MetricReport]) -> Result<String> {
    let mut out = format!("# synthetic dataset v{DATASET_VERSION}; pixel_fid and pixel_ppl are pixel-space surrogates\n");
    out.push_str("# reference distortion at 256x256 (context only, not expected here):");
    for (l, d) in REFERENCE_DISTORTION {
        out.push_str(&format!(" lambda_d={l}:{d}"));
    }
    out.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    out.push_str(&String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)?);
    Ok(out)
}

/// `(lambda_d, pixel_fid, distortion)` in increasing `lambda_d`.
pub fn pareto_points(rows: &[MetricReport]) -> Vec<(f64, f64, f64)> {
    let mut pts: Vec<_> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Ok)
        .map(|r| (r.lambda_d, r.pixel_fid, r.distortion))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Adjacent pairs where distortion went up with a larger weight.
pub fn pareto_violations(rows: &[MetricReport]) -> Vec<(f64, f64)> {
    pareto_points(rows)
        .windows(2)
        .filter(|w| w[1].2 > w[0].2)
        .map(|w| (w[0].0, w[1].0))
        .collect()
}

/// Two-column `pixel_fid,distortion` file, one point per weight.
pub fn pareto_csv(rows: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pixel_fid", "distortion"]).map_err(csv_err)?;
    for (_, fid, dist) in pareto_points(rows) {
        w.write_record([fid.to_string(), dist.to_string()]).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lambda_d: f64, fid: f64, distortion: f64) -> MetricReport {
        MetricReport {
            lambda_d,
            step: 10,
            pixel_fid: fid,
            pixel_ppl: 0.5,
            distortion,
            seconds: 1.0,
            status: RowStatus::Ok,
        }
    }

    #[test]
    fn csv_schema() {
        let csv = to_csv(&[row(0.0, 2.0, 0.1)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#') && lines[1].contains("lambda_d=100:0.0043"));
        assert_eq!(lines[2], "lambda_d,step,pixel_fid,pixel_ppl,distortion,seconds,status");
        assert_eq!(lines[3], "0.0,10,2.0,0.5,0.1,1.0,ok");
    }

    #[test]
    fn pareto_sorted_and_violations_reported() {
        let rows = [row(100.0, 3.0, 0.02), row(0.0, 1.0, 0.1), row(10.0, 2.0, 0.05), row(1000.0, 4.0, 0.03)];
        let p = pareto_points(&rows);
        assert_eq!(p.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0.0, 10.0, 100.0, 1000.0]);
        assert_eq!(pareto_violations(&rows), vec![(100.0, 1000.0)]);
        assert_eq!(pareto_csv(&rows).unwrap().lines().count(), 5);
    }
}
