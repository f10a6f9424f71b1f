//! Alternating discriminator / generator updates with all regularizers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use super::config::{PathLengthMode, TrainConfig};
use super::loss;
use super::network::{discriminate, generate, init_discriminator, init_generator};
use super::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::error::{ensure, Error, Result};
use crate::rng::{stream, tag};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g: ParamStore,
    pub d: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    /// Running mean of path lengths (standard mode target).
    pub pl_mean: f64,
}

/// Scalars recorded for one step; regularizers are `None` on steps where
/// lazy regularization skips them.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepLogs {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: Option<f64>,
    pub path_length: Option<f64>,
    pub distortion: Option<f64>,
    pub resampled_block: Option<usize>,
}

/// Copy latent position `blocks[n]` of example `n` from `fresh` into `z`.
pub fn compose_batch(z: &Tensor, fresh: &Tensor, blocks: &[usize]) -> Result<Tensor> {
    ensure!(z.shape() == fresh.shape(), "compose {:?} vs {:?}", z.shape(), fresh.shape());
    let s = z.shape();
    ensure!(s.len() == 4 && s[0] == blocks.len(), "one block per example, got {} for {:?}", blocks.len(), s);
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = z.to_vec();
    for (n, &a) in blocks.iter().enumerate() {
        ensure!(a < plane, "block {a} of {plane}");
        for k in 0..c {
            let i = (n * c + k) * plane + a;
            out[i] = fresh.data()[i];
        }
    }
    Tensor::from_vec(s, out)
}

fn collect_grads(g: &Graph, loss: Var<'_>, params: &Bound<'_>) -> Result<BTreeMap<String, Tensor>> {
    let vars = params.vars();
    let grads = g.backward(loss, &vars)?;
    Ok(params.names().cloned().zip(grads).collect())
}

fn check_finite(what: &str, x: f64, logs: &StepLogs) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {x} at step {}; snapshot {logs:?}", logs.step)))
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.training.seed, &[tag("init")]);
        let g = init_generator(&config.generator, &mut rng);
        let d = init_discriminator(&config.generator, &config.discriminator, &mut rng);
        Ok(TrainState {
            config,
            g,
            d,
            adam_g: Adam::default(),
            adam_d: Adam::default(),
            step: 0,
            pl_mean: 0.0,
        })
    }

    fn adam(&self) -> AdamConfig {
        let t = &self.config.training;
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        }
    }

    fn latent_shape(&self, n: usize) -> [usize; 4] {
        let c = &self.config.generator;
        [n, c.n_z, c.latent_rows, c.latent_cols]
    }

    /// One discriminator update then one generator update on `real`.
    pub fn train_step(&mut self, real: &Tensor) -> Result<StepLogs> {
        let cfg = self.config.clone();
        let gc = &cfg.generator;
        let reg = &cfg.regularizers;
        let n = real.shape()[0];
        ensure!(
            real.shape() == [n, gc.image_channels, gc.height(), gc.width()],
            "real batch {:?} does not match the generator output",
            real.shape()
        );
        let k = reg.lazy_interval;
        let lazy = self.step.is_multiple_of(k as u64);
        let scale = k as f64;
        let mut logs = StepLogs {
            step: self.step,
            ..Default::default()
        };
        let mut rng = stream(cfg.training.seed, &[tag("step"), self.step]);

        {
            let g = Graph::new();
            let gp = self.g.bind(&g, false);
            let dp = self.d.bind(&g, true);
            let z = g.constant(Tensor::randn(&self.latent_shape(n), &mut rng));
            let (_, fake) = generate(&gp, gc, z, None)?;
            let with_r1 = lazy && reg.lambda_r1 > 0.0;
            let real_v = if with_r1 { g.leaf(real.clone()) } else { g.constant(real.clone()) };
            let real_logits = discriminate(&dp, &cfg.discriminator, real_v)?;
            let fake_logits = discriminate(&dp, &cfg.discriminator, fake.detach())?;
            let mut total = loss::d_adversarial(real_logits, fake_logits)?;
            logs.d_loss = total.value().item();
            check_finite("discriminator loss", logs.d_loss, &logs)?;
            if with_r1 {
                let r1 = loss::r1_penalty(real_v, real_logits)?;
                logs.r1 = Some(r1.value().item());
                check_finite("r1", r1.value().item(), &logs)?;
                total = total.add(r1.scale(0.5 * reg.lambda_r1 * scale))?;
            }
            let grads = collect_grads(&g, total, &dp)?;
            self.adam_d.step(&self.adam(), &mut self.d, &grads)?;
        }

        {
            let g = Graph::new();
            let gp = self.g.bind(&g, true);
            let dp = self.d.bind(&g, false);
            let z_val = Tensor::randn(&self.latent_shape(n), &mut rng);
            let (zn, fake) = generate(&gp, gc, g.constant(z_val.clone()), None)?;
            let mut total = loss::g_adversarial(discriminate(&dp, &cfg.discriminator, fake)?);
            logs.g_loss = total.value().item();
            check_finite("generator loss", logs.g_loss, &logs)?;

            if lazy && reg.lambda_d > 0.0 && gc.n_blocks() > 1 {
                let a = rng.random_range(0..gc.n_blocks());
                let fresh = Tensor::randn(&self.latent_shape(n), &mut rng);
                let zt = compose_batch(&z_val, &fresh, &vec![a; n])?;
                let (_, resampled) = generate(&gp, gc, g.constant(zt), None)?;
                let rd = loss::distortion_regularizer(fake, resampled, &gc.partition(), &vec![a; n])?;
                logs.distortion = Some(rd.value().item());
                logs.resampled_block = Some(a);
                check_finite("distortion", rd.value().item(), &logs)?;
                total = total.add(rd.scale(reg.lambda_d * scale))?;
            }

            if lazy && reg.lambda_pl > 0.0 {
                let hw = (gc.height() * gc.width()) as f64;
                let probe = Tensor::randn(&fake.shape(), &mut rng).scale(1.0 / hw.sqrt());
                let pl = match reg.pl_mode {
                    PathLengthMode::Standard => {
                        let (pen, mean) = loss::path_length(fake, zn, &probe, self.pl_mean)?;
                        check_finite("path length", mean, &logs)?;
                        self.pl_mean += reg.pl_decay * (mean - self.pl_mean);
                        pen
                    }
                    PathLengthMode::Spatial => loss::spatial_path_length(
                        fake,
                        zn,
                        &probe,
                        &gc.partition(),
                        reg.gamma_plus,
                        reg.gamma_minus,
                    )?,
                };
                logs.path_length = Some(pl.value().item());
                check_finite("path length penalty", pl.value().item(), &logs)?;
                total = total.add(pl.scale(reg.lambda_pl * scale))?;
            }

            let grads = collect_grads(&g, total, &gp)?;
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at step {}; snapshot {logs:?}", self.step)));
            }
            self.adam_g.step(&self.adam(), &mut self.g, &grads)?;
        }

        self.step += 1;
        Ok(logs)
    }

    /// Generate images for latents `[N, n_z, rows, cols]` with the current
    /// generator.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        generate_with(&self.config, &self.g, z)
    }
}

pub fn generate_with(config: &TrainConfig, g_params: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let p = g_params.bind(&g, false);
    let (_, img) = generate(&p, &config.generator, g.constant(z.clone()), None)?;
    Ok(img.value())
}

/// Run `steps` updates, drawing the real batch for each step from `data`.
pub fn train(
    state: &mut TrainState,
    steps: u64,
    mut data: impl FnMut(u64) -> Tensor,
    mut on_step: impl FnMut(&StepLogs),
) -> Result<()> {
    for _ in 0..steps {
        let real = data(state.step);
        let logs = state.train_step(&real)?;
        on_step(&logs);
    }
    Ok(())
}
