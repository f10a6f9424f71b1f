//! Verbs of the `ssn` binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ssn_core::image::encode_png;
use ssn_core::ldbr::sequential_inpainting_counterexample;
use ssn_core::metrics::ablation::{ablation_sweep, dataset_for, pareto_csv, pareto_violations, to_csv, RowStatus};
use ssn_core::model::{checkpoint, train, PathLengthMode};
use ssn_core::{gradcheck, TrainState};

use crate::config::CliConfig;
use crate::session::{Model, Session, SessionStore};

#[derive(Debug, Parser)]
#[command(name = "ssn", version, about = "Spatially stochastic generators and block resampling")]
pub struct Cli {
    /// TOML config; the toy model when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides SSN_OUT and the config's output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that mirror config keys.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_r1: Option<f64>,
    #[arg(long)]
    pub lambda_pl: Option<f64>,
    #[arg(long, value_parser = ["standard", "spatial"])]
    pub pl_mode: Option<String>,
    #[arg(long)]
    pub lazy_interval: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut CliConfig) -> anyhow::Result<()> {
        let t = &mut c.training;
        let r = &mut c.regularizers;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.lambda_d {
            r.lambda_d = v;
        }
        if let Some(v) = self.lambda_r1 {
            r.lambda_r1 = v;
        }
        if let Some(v) = self.lambda_pl {
            r.lambda_pl = v;
        }
        if let Some(v) = &self.pl_mode {
            r.pl_mode = if v == "spatial" { PathLengthMode::Spatial } else { PathLengthMode::Standard };
        }
        if let Some(v) = self.lazy_interval {
            r.lazy_interval = v;
        }
        c.train().validate()?;
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write `checkpoint.ssnc` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Print every n-th step.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Sweep the distortion weight and write `ablation.csv` and `pareto.csv`.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated weights; overrides `[ablation] lambdas`.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Write PNGs generated from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Resample latent blocks of one generation and report the change.
    Resample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 1-based `row,col`; repeat for several blocks.
        #[arg(long = "block", value_parser = parse_block, required = true)]
        blocks: Vec<(usize, usize)>,
    },
    /// Exact checks of the discrete block-resampling fixtures.
    VerifyLdbr,
    /// Finite-difference checks of every differentiable op and layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Serve the resampling HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Where sessions are persisted; `<out>/sessions` by default.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
}

pub fn parse_block(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(r)?, p(c)?))
}

/// What a verb concluded.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Passed,
    /// The verb ran but one of its checks failed.
    Failed(String),
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    let out = cfg.out_dir(cli.out.as_deref());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Train { overrides, log_every } => {
            overrides.apply(&mut cfg)?;
            run_train(&cfg, &out, log_every)
        }
        Command::Ablate { overrides, lambdas } => {
            overrides.apply(&mut cfg)?;
            if let Some(l) = lambdas {
                cfg.ablation.lambdas = l;
            }
            run_ablate(&cfg, &out)
        }
        Command::Generate { checkpoint, seed, count } => run_generate(&checkpoint, seed, count, &out),
        Command::Resample { checkpoint, seed, blocks } => run_resample(&checkpoint, seed, &blocks, &out),
        Command::VerifyLdbr => run_verify_ldbr(&out),
        Command::Gradcheck { seed, points } => run_gradcheck(seed, points, &out),
        Command::Serve { addr, sessions } => {
            let dir = sessions.unwrap_or_else(|| out.join("sessions"));
            let store = Arc::new(SessionStore::new(Some(dir))?);
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(store, &addr))?;
            Ok(Outcome::Passed)
        }
    }
}

fn run_train(cfg: &CliConfig, out: &Path, log_every: u64) -> anyhow::Result<Outcome> {
    let tc = cfg.train();
    let data = dataset_for(&tc)?;
    let mut state = TrainState::new(tc.clone())?;
    write(out, "config.toml", tc.to_toml())?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.jsonl"))?);
    let mut log_err = None;
    let batch = tc.training.batch;
    let result = train::train(
        &mut state,
        tc.training.steps,
        |k| data.batch(k, batch),
        |l| {
            if let Err(e) = serde_json::to_writer(&mut log, l).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?)) {
                log_err.get_or_insert(e);
            }
            if log_every > 0 && l.step % log_every == 0 {
                eprintln!("step {} d {:.4} g {:.4}", l.step, l.d_loss, l.g_loss);
            }
        },
    );
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e);
    }
    result?;
    let p = out.join("checkpoint.ssnc");
    checkpoint::save(&state, &p)?;
    println!("wrote {}", p.display());
    Ok(Outcome::Passed)
}

fn run_ablate(cfg: &CliConfig, out: &Path) -> anyhow::Result<Outcome> {
    let tc = cfg.train();
    let sweep = ablation_sweep(&tc, &cfg.ablation.lambdas, &cfg.eval, |l, s| {
        if s % 250 == 0 {
            eprintln!("lambda_d {l}: step {s}");
        }
    })?;
    for (row, state) in sweep.rows.iter().zip(&sweep.states) {
        if let Some(s) = state {
            checkpoint::save(s, &out.join(format!("checkpoint_lambda_{}.ssnc", row.lambda_d)))?;
        }
    }
    let csv = to_csv(&sweep.rows)?;
    write(out, "ablation.csv", &csv)?;
    write(out, "pareto.csv", pareto_csv(&sweep.rows)?)?;
    print!("{csv}");
    let failed: Vec<f64> = sweep.rows.iter().filter(|r| r.status != RowStatus::Ok).map(|r| r.lambda_d).collect();
    if !failed.is_empty() {
        return Ok(Outcome::Failed(format!("runs failed for lambda_d {failed:?}")));
    }
    let v = pareto_violations(&sweep.rows);
    if !v.is_empty() {
        return Ok(Outcome::Failed(format!("distortion did not decrease between {v:?}")));
    }
    Ok(Outcome::Passed)
}

fn run_generate(ckpt: &Path, seed: u64, count: usize, out: &Path) -> anyhow::Result<Outcome> {
    let model = Model::load(ckpt)?;
    let (rows, cols, n_z) = model.grid();
    let mut rng = ssn_core::rng::stream(seed, &[ssn_core::rng::tag("generate")]);
    let mut latents = Vec::new();
    for i in 0..count {
        let z = ssn_core::LatentGrid::sample(rows, cols, n_z, &mut rng, 0);
        let img = model.state.generate(&z.to_nchw())?;
        write(out, &format!("sample_{i:04}.png"), encode_png(&img)?)?;
        latents.push(z);
    }
    write(out, "latents.json", serde_json::to_vec_pretty(&latents)?)?;
    println!("wrote {count} images to {}", out.display());
    Ok(Outcome::Passed)
}

fn run_resample(ckpt: &Path, seed: u64, blocks: &[(usize, usize)], out: &Path) -> anyhow::Result<Outcome> {
    let model = Model::load(ckpt)?;
    let (rows, cols, _) = model.grid();
    let (mut session, before) = Session::create("cli".into(), &model, ckpt.to_path_buf(), seed, rows, cols)?;
    let outcome = session.resample(&model, blocks, None)?;
    write(out, "before.png", &before.png)?;
    write(out, "after.png", &outcome.rendered.png)?;
    let report = serde_json::json!({
        "blocks": blocks,
        "distortion_outside": outcome.distortion_outside,
        "changed": outcome.changed,
        "before_digest": before.digest,
        "after_digest": outcome.rendered.digest,
    });
    write(out, "resample.json", serde_json::to_vec_pretty(&report)?)?;
    println!("distortion outside the resampled blocks: {}", outcome.distortion_outside);
    Ok(Outcome::Passed)
}

fn run_verify_ldbr(out: &Path) -> anyhow::Result<Outcome> {
    let r = sequential_inpainting_counterexample()?;
    let text = r.to_text();
    print!("{text}");
    write(out, "ldbr_report.txt", &text)?;
    write(out, "ldbr.csv", r.to_csv()?)?;
    let mut problems = Vec::new();
    if r.p_reach_00 != 0.0 {
        problems.push(format!("(0,0) reachable with probability {}", r.p_reach_00));
    }
    if r.tv != 0.5 {
        problems.push(format!("TV {} instead of 0.5", r.tv));
    }
    if r.check.passed {
        problems.push("sequential inpainting accepted as block resampling".into());
    }
    if !r.trivial_check.passed {
        problems.push("trivial resampling rejected".into());
    }
    if problems.is_empty() {
        Ok(Outcome::Passed)
    } else {
        Ok(Outcome::Failed(problems.join("; ")))
    }
}

fn run_gradcheck(seed: u64, points: usize, out: &Path) -> anyhow::Result<Outcome> {
    if points == 0 {
        bail!("--points must be positive");
    }
    let mut reports = gradcheck::run_first_order(seed, points)?;
    reports.extend(gradcheck::run_second_order(seed.wrapping_add(1), points)?);
    let mut lines = String::from("suite,order,points,max_rel_err,tol,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{} {:<28} order {} max rel err {:.2e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.order,
            r.max_rel_err,
            r.tol
        );
        lines.push_str(&format!("{},{},{},{},{},{}\n", r.name, r.order, r.points, r.max_rel_err, r.tol, r.passed()));
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    write(out, "gradcheck.csv", lines)?;
    if failed.is_empty() {
        Ok(Outcome::Passed)
    } else {
        Ok(Outcome::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}
