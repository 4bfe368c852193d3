//! Toy generators over image latents: an ε-predicting denoiser sampled with
//! deterministic DDIM, a flow-matching velocity field integrated with Euler
//! steps, and the decoder from latents to pixels.
//!
//! Both networks regress the clean latent `x̂0(z, t)`; ε and the velocity are
//! derived from it in closed form. A width-512 MLP cannot carry isotropic
//! noise through its bottleneck, while clean latents sit on a
//! low-dimensional set. Writing the noisy latent as `z = a·x0 + b·noise`,
//! the estimate is
//!
//! ```text
//! x̂0 = μ + c_skip·(z − aμ) + c_out·MLP(c_in·(z − aμ), t)
//! ```
//!
//! where the coefficients are those of the posterior mean for data with
//! scalar mean `μ` and variance `σ²`: `c_skip = aσ²/s²`, `c_out = σb/s`,
//! `c_in = 1/s`, `s² = a²σ² + b²`. The skip path keeps the estimate close
//! to `z` at low noise instead of confining it to the span of the last
//! layer.
//!
//! Time conventions. DDIM steps are indexed `0..T`, with `alpha_bar[t]`
//! shrinking as `t` grows; sampling walks `T-1 → 0` and the last step lands
//! on the clean estimate (`t_prev = None`, where ā = 1). Flow time runs from
//! `0` (noise) to `1` (data) in `T` Euler steps of `1/T`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Activation, Mlp};
use crate::optim::{AdamConfig, Bound, ParamSet};
use crate::rng::{self, Rng};
use crate::shapeworld::{IMAGE_SHAPE, PIXELS};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.2;
/// Width of the identity band of the identity decoder's squash.
pub const SQUASH_MARGIN: f64 = 0.05;
pub const AE_LATENT: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "linear schedule needs ≥2 steps and 0 < start < end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// ā at step `t`; `None` is the clean end of the chain (ā = 1).
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alpha_bars.get(t).copied().ok_or(Error::StepOutOfRange {
                step: t,
                len: self.len(),
            }),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }
}

/// `z_t = sqrt(ā_t)·x0 + sqrt(1 − ā_t)·noise`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(Some(t))?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(noise, |x, n| a * x + b * n)
}

/// Clean-image estimate implied by `eps_pred` at step `t`.
pub fn predict_x0(schedule: &NoiseSchedule, z_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
    let ab = schedule.alpha_bar(Some(t))?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_with(eps_pred, |z, e| (z - b * e) / a)
}

/// Deterministic (η = 0) DDIM update from step `t` to `t_prev`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Tensor> {
    if t_prev.is_some_and(|p| p >= t) {
        return Err(Error::StepOrderInvalid { t, t_prev });
    }
    let x0 = predict_x0(schedule, z_t, eps_pred, t)?;
    let ab = schedule.alpha_bar(t_prev)?;
    if ab == 1.0 {
        return Ok(x0);
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(eps_pred, |x, e| a * x + b * e)
}

/// Linear interpolant between noise `x1` (t = 0) and data `x0` (t = 1),
/// with its constant velocity `x0 − x1`.
pub fn flow_pair(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TOutOfRange(t));
    }
    let point = x0.zip_with(x1, |a, b| (1.0 - t) * b + t * a)?;
    let velocity = x0.sub(x1)?;
    Ok((point, velocity))
}

pub fn euler_step(z: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    debug_assert!(dt > 0.0);
    z.zip_with(v, |a, b| a + b * dt)
}

/// Sinusoidal features of `t ∈ [0, 1]`: `dim/2` sines then `dim/2` cosines,
/// angular frequencies spaced geometrically from 1000 down to 1.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |j: usize| 1000f64.powf(1.0 - j as f64 / (half.max(2) - 1) as f64);
    let mut out: Vec<f64> = (0..half).map(|j| (t * freq(j)).sin()).collect();
    out.extend((0..half).map(|j| (t * freq(j)).cos()));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// ε-prediction, sampled with DDIM.
    Ddim,
    /// Velocity prediction, integrated with Euler steps.
    Flow,
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Ddim => "ddim",
            Paradigm::Flow => "flow",
        })
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Paradigm::Ddim),
            "flow" => Ok(Paradigm::Flow),
            _ => Err(Error::ConfigInvalid(format!("unknown paradigm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArchitecture {
    pub paradigm: Paradigm,
    pub latent_dim: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub mlp: Mlp,
    /// Noise schedule of a DDIM denoiser.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<NoiseSchedule>,
    /// Per-element mean of the training latents.
    pub data_mean: Vec<f64>,
    /// Per-element variance of the training latents.
    pub data_var: Vec<f64>,
}

/// Per-element mean and variance across `latents`, which must share a size.
pub fn latent_stats(latents: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = latents.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = latents.len() as f64;
    let mut mean = vec![0.0; first.numel()];
    for t in latents {
        mean.iter_mut().zip(t.data()).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; mean.len()];
    for t in latents {
        var.iter_mut()
            .zip(t.data().iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    (mean, var)
}

/// Latent → latent network conditioned on time: the denoiser for DDIM or
/// the velocity field for flow matching.
#[derive(Debug, Clone)]
pub struct GenNet {
    pub arch: GenArchitecture,
    pub params: ParamSet,
}

pub type DenoiserNet = GenNet;
pub type VelocityNet = GenNet;

impl GenNet {
    /// A flow network, or a DDIM network without a schedule; see
    /// [`GenNet::denoiser`].
    pub fn new(paradigm: Paradigm, latent_dim: usize, config: &GenTrainConfig) -> Self {
        let mlp = Mlp::new(
            "gen",
            &[latent_dim + config.time_dim, config.hidden, config.hidden, latent_dim],
            Activation::Relu,
        );
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut rng::rng(rng::derive_str(config.seed, "gen-init")));
        Self {
            arch: GenArchitecture {
                paradigm,
                latent_dim,
                time_dim: config.time_dim,
                steps: config.steps,
                mlp,
                schedule: None,
                data_mean: vec![0.5; latent_dim],
                data_var: vec![0.05; latent_dim],
            },
            params,
        }
    }

    pub fn denoiser(latent_dim: usize, schedule: &NoiseSchedule, config: &GenTrainConfig) -> Self {
        let mut net = Self::new(Paradigm::Ddim, latent_dim, config);
        net.arch.schedule = Some(schedule.clone());
        net
    }

    pub fn paradigm(&self) -> Paradigm {
        self.arch.paradigm
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Time fed to the network: DDIM step `t` maps to `(t + 1) / T`.
    fn net_time(&self, t: f64) -> f64 {
        match self.arch.paradigm {
            Paradigm::Ddim => (t + 1.0) / self.arch.steps as f64,
            Paradigm::Flow => t,
        }
    }

    /// Signal and noise weights `(a, b)` of the latent at time `t`.
    fn mix(&self, t: f64) -> Result<(f64, f64)> {
        match self.arch.paradigm {
            Paradigm::Ddim => {
                let ab = self
                    .arch
                    .schedule
                    .as_ref()
                    .ok_or_else(|| Error::ConfigInvalid("denoiser has no noise schedule".into()))?
                    .alpha_bar(Some(t as usize))?;
                Ok((ab.sqrt(), (1.0 - ab).sqrt()))
            }
            Paradigm::Flow if (0.0..=1.0).contains(&t) => Ok((t, 1.0 - t)),
            Paradigm::Flow => Err(Error::TOutOfRange(t)),
        }
    }

    /// Clean-latent estimate. `z`: `[batch, latent_dim]`; `times` holds the
    /// DDIM step index or the flow time per row.
    pub fn clean_var<'t>(&self, bound: &Bound<'t>, z: Var<'t>, times: &[f64]) -> Result<Var<'t>> {
        let tape = z.tape();
        let (td, ld) = (self.arch.time_dim, self.arch.latent_dim);
        let (mu, var) = (&self.arch.data_mean, &self.arch.data_var);
        let n = times.len();
        let mut emb = Vec::with_capacity(n * td);
        let (mut shift, mut c_in, mut c_skip, mut c_out) =
            (Vec::with_capacity(n * ld), Vec::with_capacity(n * ld), Vec::with_capacity(n * ld), Vec::with_capacity(n * ld));
        for &t in times {
            emb.extend(time_embedding(self.net_time(t), td));
            let (a, b) = self.mix(t)?;
            for (&m, &v) in mu.iter().zip(var) {
                let s = (a * a * v + b * b).sqrt();
                shift.push(a * m);
                c_in.push(1.0 / s);
                c_skip.push(a * v / (s * s));
                c_out.push(v.sqrt() * b / s);
            }
        }
        let rows = |v: Vec<f64>| Tensor::new(vec![n, ld], v).map(|t| tape.constant(t));
        let u = z.sub(rows(shift)?)?;
        let emb = tape.constant(Tensor::new(vec![n, td], emb)?);
        let f = self.arch.mlp.forward(bound, concat(&[u.mul(rows(c_in)?)?, emb], 1)?)?;
        u.mul(rows(c_skip)?)?
            .add(f.mul(rows(c_out)?)?)?
            .add_row(tape.constant(Tensor::from_vec(mu.clone())))
    }

    /// Clean-latent estimate for one latent of any shape with `latent_dim`
    /// elements; the result is flat.
    pub fn predict_clean(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        if z.numel() != self.latent_dim() {
            return Err(Error::shape("predict", z.shape(), &[self.latent_dim()]));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(Tensor::new(vec![1, z.numel()], z.data().to_vec())?);
        let out = self.clean_var(&bound, x, &[t])?.value();
        Ok(Tensor::from_vec(out.into_data()))
    }

    /// The sampler's field at `(z, t)`: ε for DDIM step `t`, velocity for
    /// flow time `t < 1`. The result is flat.
    pub fn predict(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let x0 = self.predict_clean(z, t)?;
        let z = Tensor::from_vec(z.data().to_vec());
        match self.arch.paradigm {
            Paradigm::Ddim => {
                let (a, b) = self.mix(t)?;
                z.zip_with(&x0, |z, x| (z - a * x) / b)
            }
            Paradigm::Flow => {
                if !(0.0..1.0).contains(&t) {
                    return Err(Error::TOutOfRange(t));
                }
                x0.zip_with(&z, |x, z| (x - z) / (1.0 - t))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(&path.with_extension("json"), &serde_json::to_vec_pretty(&self.arch)?)?;
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch_path = path.with_extension("json");
        for p in [path, arch_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let arch: GenArchitecture = serde_json::from_slice(&std::fs::read(&arch_path)?)?;
        let params = ParamSet::load(path)?;
        Ok(Self { arch, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            hidden: 512,
            time_dim: 32,
            steps: DEFAULT_STEPS,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(Error::ConfigInvalid(
                "batch_size and hidden must be positive; time_dim even and ≥4".into(),
            ));
        }
        if self.steps < 2 || !(self.lr > 0.0) {
            return Err(Error::ConfigInvalid("steps must be ≥2 and lr positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
}

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("epoch,loss\n");
    for r in curve {
        s.push_str(&format!("{},{}\n", r.epoch, r.loss));
    }
    s
}

fn flat_latents(latents: &[Tensor]) -> Result<usize> {
    let Some(first) = latents.first() else {
        return Err(Error::InsufficientVariety("no training latents".into()));
    };
    let d = first.numel();
    if let Some(bad) = latents.iter().find(|l| l.numel() != d) {
        return Err(Error::shape("train", bad.shape(), first.shape()));
    }
    Ok(d)
}

/// Shared minibatch loop regressing the clean latent. `make_batch` draws,
/// for a batch of clean latents, the network input and per-row times.
fn train_field(
    mut net: GenNet,
    latents: &[Tensor],
    config: &GenTrainConfig,
    mut make_batch: impl FnMut(&[&Tensor], &mut Rng) -> Result<(Tensor, Vec<f64>)>,
) -> Result<(GenNet, Vec<LossRecord>)> {
    let d = net.latent_dim();
    let opt = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::rng(rng::derive(rng::derive_str(config.seed, "gen-epoch"), epoch as u64));
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&Tensor> = batch.iter().map(|&i| &latents[i]).collect();
            let (input, times) = make_batch(&refs, &mut r)?;
            let clean: Vec<Tensor> = refs.iter().map(|x| Tensor::from_vec(x.data().to_vec())).collect();
            let tape = Tape::new();
            let bound = net.params.bind(&tape, true);
            let pred = net.clean_var(&bound, tape.constant(input), &times)?;
            let loss = pred.sub(tape.constant(rows(&clean, d)?))?.square()?.mean()?;
            sum += loss.item() * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect(&mut grads);
            net.params.adam_step(&grads, &opt)?;
        }
        curve.push(LossRecord {
            epoch: epoch + 1,
            loss: sum / latents.len() as f64,
        });
    }
    Ok((net, curve))
}

fn rows(items: &[Tensor], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(items.len() * d);
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), d], data)
}

/// Denoiser training with `t` uniform over the schedule.
pub fn train_denoiser(
    latents: &[Tensor],
    schedule: &NoiseSchedule,
    config: &GenTrainConfig,
) -> Result<(DenoiserNet, Vec<LossRecord>)> {
    if schedule.len() != config.steps {
        return Err(Error::ConfigInvalid(format!(
            "schedule has {} steps, config {}",
            schedule.len(),
            config.steps
        )));
    }
    config.validate()?;
    let mut net = GenNet::denoiser(flat_latents(latents)?, schedule, config);
    (net.arch.data_mean, net.arch.data_var) = latent_stats(latents);
    train_field(net, latents, config, |batch, r| {
        let d = batch[0].numel();
        let mut inputs = Vec::with_capacity(batch.len());
        let mut times = Vec::with_capacity(batch.len());
        for x0 in batch {
            let t = r.gen_range(0..schedule.len());
            let noise = rng::normal_tensor(r, &[d]);
            let flat = Tensor::from_vec(x0.data().to_vec());
            inputs.push(forward_diffuse(schedule, &flat, t, &noise)?);
            times.push(t as f64);
        }
        Ok((rows(&inputs, d)?, times))
    })
}

/// Velocity-field training with `t` uniform on `[0, 1)`.
pub fn train_velocity(latents: &[Tensor], config: &GenTrainConfig) -> Result<(VelocityNet, Vec<LossRecord>)> {
    config.validate()?;
    let mut net = GenNet::new(Paradigm::Flow, flat_latents(latents)?, config);
    (net.arch.data_mean, net.arch.data_var) = latent_stats(latents);
    train_field(net, latents, config, |batch, r| {
        let d = batch[0].numel();
        let mut points = Vec::with_capacity(batch.len());
        let mut times = Vec::with_capacity(batch.len());
        for x0 in batch {
            let t: f64 = r.gen_range(0.0..1.0);
            let x1 = rng::normal_tensor(r, &[d]);
            let (p, _) = flow_pair(&Tensor::from_vec(x0.data().to_vec()), &x1, t)?;
            points.push(p);
            times.push(t);
        }
        Ok((rows(&points, d)?, times))
    })
}

/// Starting noise for a sampling run; guided and unguided samplers share it.
pub fn initial_latent(dim: usize, seed: u64) -> Tensor {
    rng::normal_tensor(&mut rng::rng(rng::derive_str(seed, "sample-init")), &[dim])
}

/// Flow time at Euler step `k` of `steps`.
pub fn flow_time(k: usize, steps: usize) -> f64 {
    k as f64 / steps as f64
}

pub fn ddim_sample(net: &DenoiserNet, schedule: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    let mut z = initial_latent(net.latent_dim(), seed);
    for t in (0..schedule.len()).rev() {
        let eps = net.predict(&z, t as f64)?;
        z = ddim_step(schedule, &z, &eps, t, t.checked_sub(1))?;
    }
    Ok(z)
}

pub fn flow_sample(net: &VelocityNet, steps: usize, seed: u64) -> Result<Tensor> {
    let mut z = initial_latent(net.latent_dim(), seed);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let v = net.predict(&z, flow_time(k, steps))?;
        z = euler_step(&z, &v, dt)?;
    }
    Ok(z)
}

/// Unguided sample for either paradigm.
pub fn sample(net: &GenNet, schedule: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    match net.paradigm() {
        Paradigm::Ddim => ddim_sample(net, schedule, seed),
        Paradigm::Flow => flow_sample(net, net.arch.steps, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Pixels → 256-dim latent → pixels, with a sigmoid on the output.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder {
    pub arch: AutoencoderArch,
    pub params: ParamSet,
}

impl TinyAutoencoder {
    pub fn new(seed: u64) -> Self {
        let encoder = Mlp::new("enc", &[PIXELS, 512, AE_LATENT], Activation::Relu);
        let decoder = Mlp::new("dec", &[AE_LATENT, 512, PIXELS], Activation::Relu);
        let mut params = ParamSet::new();
        let mut r = rng::rng(rng::derive_str(seed, "ae-init"));
        encoder.init(&mut params, &mut r);
        decoder.init(&mut params, &mut r);
        Self {
            arch: AutoencoderArch { encoder, decoder },
            params,
        }
    }

    pub fn encode_var<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.arch.encoder.forward(bound, x)
    }

    pub fn decode_var<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.arch.decoder.forward(bound, z)?.sigmoid()
    }
}

/// `D(·)`: latent → image in `[0, 1]`.
#[derive(Debug, Clone)]
pub enum Decoder {
    /// Latent space is pixel space; a fixed smooth squash keeps the output
    /// in range and is the identity on `[0.05, 0.95]`.
    Identity,
    Autoencoder(Box<TinyAutoencoder>),
}

impl Decoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Decoder::Identity => PIXELS,
            Decoder::Autoencoder(_) => AE_LATENT,
        }
    }

    pub fn mode(&self) -> &'static str {
        match self {
            Decoder::Identity => "identity",
            Decoder::Autoencoder(_) => "tiny_autoencoder",
        }
    }

    /// Decode `[batch, latent_dim]` to `[batch, PIXELS]` on `tape`.
    pub fn decode_var<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.latent_dim() {
            return Err(Error::shape("decode", &shape, &[shape.first().copied().unwrap_or(1), self.latent_dim()]));
        }
        match self {
            Decoder::Identity => z.soft_clip(SQUASH_MARGIN),
            Decoder::Autoencoder(ae) => {
                let bound = ae.params.bind(tape, false);
                ae.decode_var(&bound, z)
            }
        }
    }

    /// One latent to a `3×32×32` image.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, z.numel()], z.data().to_vec())?);
        let out = self.decode_var(&tape, x)?.value();
        Tensor::new(IMAGE_SHAPE.to_vec(), out.into_data())
    }

    /// Image to latent: the pixels themselves in identity mode.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if image.numel() != PIXELS {
            return Err(Error::shape("encode", image.shape(), &IMAGE_SHAPE));
        }
        match self {
            Decoder::Identity => Ok(Tensor::from_vec(image.data().to_vec())),
            Decoder::Autoencoder(ae) => {
                let tape = Tape::new();
                let bound = ae.params.bind(&tape, false);
                let x = tape.constant(Tensor::new(vec![1, PIXELS], image.data().to_vec())?);
                Ok(Tensor::from_vec(ae.encode_var(&bound, x)?.value().into_data()))
            }
        }
    }

    /// Identity mode needs no file; autoencoder weights go to `path` plus a
    /// JSON architecture sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Decoder::Autoencoder(ae) = self {
            io::atomic_write(&path.with_extension("json"), &serde_json::to_vec_pretty(&ae.arch)?)?;
            ae.params.save(path)?;
        }
        Ok(())
    }

    pub fn load_autoencoder(path: &Path) -> Result<Self> {
        let arch_path = path.with_extension("json");
        for p in [path, arch_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let arch: AutoencoderArch = serde_json::from_slice(&std::fs::read(&arch_path)?)?;
        let params = ParamSet::load(path)?;
        Ok(Decoder::Autoencoder(Box::new(TinyAutoencoder { arch, params })))
    }
}

/// Reconstruction-MSE training of the tiny autoencoder.
pub fn train_autoencoder(images: &[Tensor], config: &GenTrainConfig) -> Result<(Decoder, Vec<LossRecord>)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientVariety("no training images".into()));
    }
    let mut ae = TinyAutoencoder::new(config.seed);
    let opt = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::rng(rng::derive(rng::derive_str(config.seed, "ae-epoch"), epoch as u64));
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x: Vec<Tensor> = batch.iter().map(|&i| Tensor::from_vec(images[i].data().to_vec())).collect();
            let x = rows(&x, PIXELS)?;
            let tape = Tape::new();
            let bound = ae.params.bind(&tape, true);
            let target = tape.constant(x);
            let recon = ae.decode_var(&bound, ae.encode_var(&bound, target)?)?;
            let loss = recon.sub(target)?.square()?.mean()?;
            sum += loss.item() * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect(&mut grads);
            ae.params.adam_step(&grads, &opt)?;
        }
        curve.push(LossRecord {
            epoch: epoch + 1,
            loss: sum / images.len() as f64,
        });
    }
    Ok((Decoder::Autoencoder(Box::new(ae)), curve))
}
