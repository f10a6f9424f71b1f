//! Mapping network, generator and discriminator.
//!
//! The generator starts from a learned constant at the latent resolution.
//! Each stage upsamples (except the first), applies spatially modulated
//! 3x3 convolutions whose styles come from `z_nonlin` upsampled to the
//! stage resolution, and adds a 1x1 RGB projection to a running skip image.

use rand::Rng;

use super::config::{DiscriminatorConfig, GeneratorConfig};
use super::params::{Bound, ParamStore};
use crate::error::{ensure, Result};
use crate::layers::{positive_style, spatially_modulated_conv, SpatialStyle};
use crate::tensor::{Padding, Tensor, Var};

const SLOPE: f64 = 0.2;
const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

fn lrelu(v: Var<'_>) -> Var<'_> {
    v.leaky_relu(SLOPE).scale(ACT_GAIN)
}

/// Convolution with the weight scaled by `1/sqrt(fan_in)` at use time.
fn eq_conv<'g>(h: Var<'g>, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
    let s = w.shape();
    let fan_in = (s[1] * s[2] * s[3]) as f64;
    let out = h.conv2d(w.scale(1.0 / fan_in.sqrt()), Padding::Zero)?;
    match b {
        Some(b) => out.add(b),
        None => Ok(out),
    }
}

pub fn init_generator<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    let nz = cfg.n_z;
    for l in 0..cfg.mapping_depth {
        p.randn(&format!("g.map.{l}.w"), &[nz, nz, 1, 1], rng);
        p.insert(format!("g.map.{l}.b"), Tensor::zeros(&[1, nz, 1, 1]));
    }
    if cfg.cond_channels > 0 {
        p.randn("g.cond.w", &[nz, cfg.cond_channels, 1, 1], rng);
    }
    p.randn("g.const", &[1, cfg.channels[0], cfg.latent_rows, cfg.latent_cols], rng);
    let mut c_in = cfg.channels[0];
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        for j in 0..cfg.convs_per_stage {
            let k = format!("g.s{i}.c{j}");
            p.randn(&format!("{k}.aw"), &[c_in, nz, 1, 1], rng);
            p.insert(format!("{k}.ab"), Tensor::ones(&[1, c_in, 1, 1]));
            p.randn(&format!("{k}.w"), &[c_out, c_in, 3, 3], rng);
            p.insert(format!("{k}.b"), Tensor::zeros(&[1, c_out, 1, 1]));
            c_in = c_out;
        }
        let k = format!("g.s{i}.rgb");
        p.randn(&format!("{k}.aw"), &[c_out, nz, 1, 1], rng);
        p.insert(format!("{k}.ab"), Tensor::ones(&[1, c_out, 1, 1]));
        p.randn(&format!("{k}.w"), &[cfg.image_channels, c_out, 1, 1], rng);
        p.insert(format!("{k}.b"), Tensor::zeros(&[1, cfg.image_channels, 1, 1]));
    }
    p
}

pub fn init_discriminator<R: Rng + ?Sized>(g: &GeneratorConfig, d: &DiscriminatorConfig, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    let ch = &d.channels;
    p.randn("d.rgb.w", &[ch[0], g.image_channels, 1, 1], rng);
    p.insert("d.rgb.b", Tensor::zeros(&[1, ch[0], 1, 1]));
    for i in 1..ch.len() {
        p.randn(&format!("d.s{i}.w"), &[ch[i], ch[i - 1], 3, 3], rng);
        p.insert(format!("d.s{i}.b"), Tensor::zeros(&[1, ch[i], 1, 1]));
    }
    let last = *ch.last().expect("validated");
    let shrink = 1 << (ch.len() - 1);
    p.randn("d.final.w", &[last, last, 3, 3], rng);
    p.insert("d.final.b", Tensor::zeros(&[1, last, 1, 1]));
    p.randn("d.out.w", &[1, last, g.height() / shrink, g.width() / shrink], rng);
    p.insert("d.out.b", Tensor::zeros(&[1, 1, 1, 1]));
    p
}

fn check_latent(cfg: &GeneratorConfig, z: &Var<'_>) -> Result<()> {
    let s = z.shape();
    ensure!(
        s.len() == 4 && s[1..] == [cfg.n_z, cfg.latent_rows, cfg.latent_cols],
        "latent {:?} does not match {}x{}x{}",
        s,
        cfg.latent_rows,
        cfg.latent_cols,
        cfg.n_z
    );
    Ok(())
}

/// The same MLP on every latent block, as a stack of 1x1 convolutions.
pub fn map_latent<'g>(p: &Bound<'g>, cfg: &GeneratorConfig, z: Var<'g>) -> Result<Var<'g>> {
    check_latent(cfg, &z)?;
    let mut h = z;
    for l in 0..cfg.mapping_depth {
        h = lrelu(eq_conv(h, p.get(&format!("g.map.{l}.w")), Some(p.get(&format!("g.map.{l}.b"))))?);
    }
    Ok(h)
}

fn style<'g>(p: &Bound<'g>, key: &str, zn_up: Var<'g>) -> Result<Var<'g>> {
    let raw = eq_conv(zn_up, p.get(&format!("{key}.aw")), Some(p.get(&format!("{key}.ab"))))?;
    Ok(positive_style(raw))
}

/// Image in `[-1, 1]` from mapped latents `[N, n_z, rows, cols]`.
pub fn synthesize<'g>(p: &Bound<'g>, cfg: &GeneratorConfig, zn: Var<'g>) -> Result<Var<'g>> {
    check_latent(cfg, &zn)?;
    let n = zn.shape()[0];
    let c0 = cfg.channels[0];
    let mut h = p
        .get("g.const")
        .broadcast_to(&[n, c0, cfg.latent_rows, cfg.latent_cols])?;
    let mut img: Option<Var<'g>> = None;
    for i in 0..cfg.channels.len() {
        let zn_up = if i == 0 { zn } else { zn.upsample(1 << i)? };
        if i > 0 {
            h = h.upsample_nearest_2x()?;
        }
        for j in 0..cfg.convs_per_stage {
            let k = format!("g.s{i}.c{j}");
            let s = style(p, &k, zn_up)?;
            let y = spatially_modulated_conv(h, SpatialStyle { scale: s, bias: None }, p.get(&format!("{k}.w")), Padding::Zero)?;
            h = lrelu(y.out.add(p.get(&format!("{k}.b")))?);
        }
        // Modulated 1x1 projection without demodulation.
        let k = format!("g.s{i}.rgb");
        let s = style(p, &k, zn_up)?;
        let rgb = eq_conv(h.mul(s)?, p.get(&format!("{k}.w")), Some(p.get(&format!("{k}.b"))))?;
        img = Some(match img {
            None => rgb,
            Some(prev) => prev.upsample_nearest_2x()?.add(rgb)?,
        });
    }
    Ok(img.expect("at least one stage").tanh())
}

/// Mapped latents (optionally shifted by the projected conditioning input)
/// and the generated image.
pub fn generate<'g>(
    p: &Bound<'g>,
    cfg: &GeneratorConfig,
    z: Var<'g>,
    x: Option<Var<'g>>,
) -> Result<(Var<'g>, Var<'g>)> {
    let mut zn = map_latent(p, cfg, z)?;
    match (x, cfg.cond_channels) {
        (None, 0) => {}
        (Some(x), c) if c > 0 => {
            ensure!(
                x.shape() == [z.shape()[0], c, cfg.latent_rows, cfg.latent_cols],
                "conditioning {:?} does not match the latent grid",
                x.shape()
            );
            zn = zn.add(eq_conv(x, p.get("g.cond.w"), None)?)?;
        }
        (Some(_), _) => return Err(crate::Error::Contract("model takes no conditioning input".into())),
        (None, _) => return Err(crate::Error::Contract("model needs a conditioning input".into())),
    }
    let img = synthesize(p, cfg, zn)?;
    Ok((zn, img))
}

/// Logits `[N, 1, 1, 1]`.
pub fn discriminate<'g>(p: &Bound<'g>, d: &DiscriminatorConfig, img: Var<'g>) -> Result<Var<'g>> {
    let mut h = lrelu(eq_conv(img, p.get("d.rgb.w"), Some(p.get("d.rgb.b")))?);
    for i in 1..d.channels.len() {
        h = lrelu(eq_conv(h, p.get(&format!("d.s{i}.w")), Some(p.get(&format!("d.s{i}.b"))))?);
        h = h.downsample_avg_2x()?;
    }
    h = lrelu(eq_conv(h, p.get("d.final.w"), Some(p.get("d.final.b")))?);
    let w = p.get("d.out.w");
    let fan_in = w.value().numel() as f64;
    let logit = h.mul(w.scale(1.0 / fan_in.sqrt()))?.sum_axes(&[1, 2, 3])?;
    logit.add(p.get("d.out.b"))
}
