//! Shape guidance at sampling time: the embedding-distance loss on decoded
//! latents, the normalized latent update, clamping, schedules, and guided
//! DDIM / Euler samplers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::generative::{
    ddim_step, euler_step, flow_time, initial_latent, Decoder, GenNet, NoiseSchedule, Paradigm,
};
use crate::shapeworld::IMAGE_SHAPE;
use crate::teacher::{hpe_distance, EmbeddingNet};
use crate::tensor::Tensor;

/// Gradients at or below this norm are treated as zero and skipped.
pub const GRAD_EPS: f64 = 1e-12;
pub const DEFAULT_CLAMP: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GuidanceSchedule {
    Continuous,
    /// Guide only the first `k` sampler steps.
    StopAfter { k: usize },
    /// Guide steps `a..b` (counted from the start of sampling).
    Window { a: usize, b: usize },
}

impl fmt::Display for GuidanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceSchedule::Continuous => write!(f, "continuous"),
            GuidanceSchedule::StopAfter { k } => write!(f, "stop_after({k})"),
            GuidanceSchedule::Window { a, b } => write!(f, "window({a},{b})"),
        }
    }
}

/// Whether guidance fires on the sampler step that follows `elapsed`
/// completed steps.
pub fn apply_schedule(schedule: GuidanceSchedule, elapsed: usize) -> bool {
    match schedule {
        GuidanceSchedule::Continuous => true,
        GuidanceSchedule::StopAfter { k } => elapsed < k,
        GuidanceSchedule::Window { a, b } => a <= elapsed && elapsed < b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub schedule: GuidanceSchedule,
    /// Step along the raw gradient instead of its unit direction.
    #[serde(default)]
    pub raw_gradient: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            clamp_lo: DEFAULT_CLAMP.0,
            clamp_hi: DEFAULT_CLAMP.1,
            schedule: GuidanceSchedule::Continuous,
            raw_gradient: false,
        }
    }
}

impl GuidanceConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::ConfigInvalid(format!("alpha {} must be finite and ≥ 0", self.alpha)));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::ConfigInvalid(format!(
                "clamp bounds [{}, {}] are empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        let within = match self.schedule {
            GuidanceSchedule::Continuous => true,
            GuidanceSchedule::StopAfter { k } => k <= steps,
            GuidanceSchedule::Window { a, b } => a <= b && b <= steps,
        };
        if !within {
            return Err(Error::ConfigInvalid(format!(
                "schedule {} exceeds the {steps}-step run",
                self.schedule
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_mean: f64,
    pub applied: bool,
    /// L2 norm of the guidance displacement before clamping (0 when not
    /// applied).
    pub displacement: f64,
}

pub fn trajectory_csv(trajectory: &[TrajectorySample]) -> String {
    let mut s = String::from("step,loss,grad_norm,z_min,z_max,z_mean,applied\n");
    for r in trajectory {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.grad_norm, r.z_min, r.z_max, r.z_mean, r.applied
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct SteerResult {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub config: GuidanceConfig,
    pub final_latent: Tensor,
    pub final_image: Tensor,
    pub final_hpe_distance: f64,
    pub trajectory: Vec<TrajectorySample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSummary {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub config: GuidanceConfig,
    pub final_hpe_distance: f64,
    pub steps: usize,
    pub guided_steps: usize,
    pub skipped_steps: usize,
    pub final_loss: f64,
}

impl SteerResult {
    pub fn summary(&self) -> SteerSummary {
        SteerSummary {
            paradigm: self.paradigm,
            seed: self.seed,
            config: self.config,
            final_hpe_distance: self.final_hpe_distance,
            steps: self.trajectory.len(),
            guided_steps: self.trajectory.iter().filter(|s| s.applied).count(),
            skipped_steps: self
                .trajectory
                .iter()
                .filter(|s| !s.applied && apply_schedule(self.config.schedule, s.step))
                .count(),
            final_loss: self.trajectory.last().map_or(f64::NAN, |s| s.loss),
        }
    }
}

/// A steering run that hit a non-finite value; carries the steps logged so
/// far.
#[derive(Debug)]
pub struct SteerAbort {
    pub error: Error,
    pub trajectory: Vec<TrajectorySample>,
}

impl fmt::Display for SteerAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "steering aborted after {} steps: {}", self.trajectory.len(), self.error)
    }
}

impl std::error::Error for SteerAbort {}

/// Everything a guided run reads: frozen nets and the target.
pub struct Guide<'a> {
    pub teacher: &'a EmbeddingNet,
    pub decoder: &'a Decoder,
    pub target_image: &'a Tensor,
    target_embedding: Tensor,
}

impl<'a> Guide<'a> {
    pub fn new(teacher: &'a EmbeddingNet, decoder: &'a Decoder, target_image: &'a Tensor) -> Result<Self> {
        let target_embedding = teacher.embed(target_image)?;
        Ok(Self {
            teacher,
            decoder,
            target_image,
            target_embedding,
        })
    }

    pub fn target_embedding(&self) -> &Tensor {
        &self.target_embedding
    }

    /// `‖F(D(z)) − e_target‖²` and its gradient with respect to `z`.
    pub fn loss_and_grad(&self, z: &Tensor) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let zv = tape.var(Tensor::new(vec![1, z.numel()], z.data().to_vec())?);
        let loss = guidance_loss(&tape, zv, &self.target_embedding, self.teacher, self.decoder)?;
        let value = loss.item();
        let mut grads = tape.backward(loss)?;
        let g = grads.take(zv).expect("latent is a gradient leaf");
        Ok((value, Tensor::new(z.shape().to_vec(), g.into_data())?))
    }

    pub fn final_distance(&self, image: &Tensor) -> Result<f64> {
        hpe_distance(self.teacher, image, self.target_image)
    }
}

/// The guidance loss on `tape` for a `[1, latent_dim]` latent.
pub fn guidance_loss<'t>(
    tape: &'t Tape,
    z: crate::autodiff::Var<'t>,
    target_embedding: &Tensor,
    teacher: &EmbeddingNet,
    decoder: &Decoder,
) -> Result<crate::autodiff::Var<'t>> {
    let image = decoder.decode_var(tape, z)?;
    let bound = teacher.params.bind(tape, false);
    let e = teacher.embed_var(&bound, image)?;
    let target = tape.constant(Tensor::new(vec![1, target_embedding.numel()], target_embedding.data().to_vec())?);
    e.sub(target)?.square()?.sum()
}

/// `z − α·g/‖g‖` (or `z − α·g` with `raw`). Returns `None` when `‖g‖` is at
/// or below [`GRAD_EPS`].
pub fn guided_update(z: &Tensor, grad: &Tensor, alpha: f64, raw: bool) -> Result<Option<Tensor>> {
    let norm = grad.norm();
    if !(norm > GRAD_EPS) {
        return Ok(None);
    }
    let c = if raw { alpha } else { alpha / norm };
    z.zip_with(grad, |a, g| a - c * g).map(Some)
}

pub fn clamp_latent(z: &Tensor, lo: f64, hi: f64) -> Tensor {
    z.map(|v| v.clamp(lo, hi))
}

fn sample_stats(step: usize, loss: f64, grad: &Tensor, z: &Tensor, applied: bool, displacement: f64) -> TrajectorySample {
    TrajectorySample {
        step,
        loss,
        grad_norm: grad.norm(),
        z_min: z.min(),
        z_max: z.max(),
        z_mean: z.mean(),
        applied,
        displacement,
    }
}

/// Outcome of the guidance part of one sampler step.
struct Nudge {
    z: Tensor,
    sample: TrajectorySample,
}

/// Computes the loss at `z` and, if the schedule admits this step, moves
/// `base` by `scale` times the guidance direction and clamps. With `α = 0`
/// the latent is returned untouched.
fn nudge(guide: &Guide<'_>, config: &GuidanceConfig, step: usize, z: &Tensor, base: Tensor, scale: f64) -> Result<Nudge> {
    let (loss, grad) = guide.loss_and_grad(z)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("guidance gradient"));
    }
    if !apply_schedule(config.schedule, step) {
        let sample = sample_stats(step, loss, &grad, &base, false, 0.0);
        return Ok(Nudge { z: base, sample });
    }
    if config.alpha == 0.0 {
        let fired = grad.norm() > GRAD_EPS;
        let sample = sample_stats(step, loss, &grad, &base, fired, 0.0);
        return Ok(Nudge { z: base, sample });
    }
    match guided_update(&base, &grad, scale, config.raw_gradient)? {
        None => {
            let sample = sample_stats(step, loss, &grad, &base, false, 0.0);
            Ok(Nudge { z: base, sample })
        }
        Some(moved) => {
            let displacement = moved.sub(&base)?.norm();
            if !moved.is_finite() {
                return Err(Error::NonFinite("guided update"));
            }
            let z = clamp_latent(&moved, config.clamp_lo, config.clamp_hi);
            let sample = sample_stats(step, loss, &grad, &z, true, displacement);
            Ok(Nudge { z, sample })
        }
    }
}

fn finish(
    guide: &Guide<'_>,
    paradigm: Paradigm,
    seed: u64,
    config: &GuidanceConfig,
    z: Tensor,
    trajectory: Vec<TrajectorySample>,
) -> std::result::Result<SteerResult, SteerAbort> {
    let image = guide
        .decoder
        .decode(&z)
        .and_then(|img| img.reshape(&IMAGE_SHAPE))
        .and_then(|img| guide.final_distance(&img).map(|d| (img, d)));
    match image {
        Ok((final_image, final_hpe_distance)) => Ok(SteerResult {
            paradigm,
            seed,
            config: *config,
            final_latent: z,
            final_image,
            final_hpe_distance,
            trajectory,
        }),
        Err(error) => Err(SteerAbort { error, trajectory }),
    }
}

/// DDIM from `T−1` down to `0`; on guided steps the latent is corrected
/// before the denoiser sees it.
pub fn guided_ddim_sample(
    net: &GenNet,
    schedule: &NoiseSchedule,
    guide: &Guide<'_>,
    config: &GuidanceConfig,
    seed: u64,
) -> std::result::Result<SteerResult, SteerAbort> {
    let mut trajectory = Vec::with_capacity(schedule.len());
    let abort = |error, trajectory| SteerAbort { error, trajectory };
    if let Err(e) = config.validate(schedule.len()) {
        return Err(abort(e, trajectory));
    }
    let mut z = initial_latent(net.latent_dim(), seed);
    for (step, t) in (0..schedule.len()).rev().enumerate() {
        let moved = match nudge(guide, config, step, &z, z.clone(), config.alpha) {
            Ok(n) => n,
            Err(e) => return Err(abort(e, trajectory)),
        };
        trajectory.push(moved.sample);
        let next = net
            .predict(&moved.z, t as f64)
            .and_then(|eps| ddim_step(schedule, &moved.z, &eps, t, t.checked_sub(1)));
        z = match next {
            Ok(z) if z.is_finite() => z,
            Ok(_) => return Err(abort(Error::NonFinite("ddim step"), trajectory)),
            Err(e) => return Err(abort(e, trajectory)),
        };
    }
    finish(guide, Paradigm::Ddim, seed, config, z, trajectory)
}

/// Euler integration from noise to data with the guidance direction acting
/// as an extra velocity: `z ← z + (v − α·ĝ)·dt`, then clamp.
pub fn guided_flow_sample(
    net: &GenNet,
    steps: usize,
    guide: &Guide<'_>,
    config: &GuidanceConfig,
    seed: u64,
) -> std::result::Result<SteerResult, SteerAbort> {
    let mut trajectory = Vec::with_capacity(steps);
    let abort = |error, trajectory| SteerAbort { error, trajectory };
    if let Err(e) = config.validate(steps) {
        return Err(abort(e, trajectory));
    }
    let dt = 1.0 / steps as f64;
    let mut z = initial_latent(net.latent_dim(), seed);
    for k in 0..steps {
        let predicted = net
            .predict(&z, flow_time(k, steps))
            .and_then(|v| euler_step(&z, &v, dt));
        let predicted = match predicted {
            Ok(p) if p.is_finite() => p,
            Ok(_) => return Err(abort(Error::NonFinite("euler step"), trajectory)),
            Err(e) => return Err(abort(e, trajectory)),
        };
        let moved = match nudge(guide, config, k, &z, predicted, config.alpha * dt) {
            Ok(n) => n,
            Err(e) => return Err(abort(e, trajectory)),
        };
        trajectory.push(moved.sample);
        z = moved.z;
    }
    finish(guide, Paradigm::Flow, seed, config, z, trajectory)
}

/// Guided sample for the network's paradigm.
pub fn guided_sample(
    net: &GenNet,
    schedule: &NoiseSchedule,
    guide: &Guide<'_>,
    config: &GuidanceConfig,
    seed: u64,
) -> std::result::Result<SteerResult, SteerAbort> {
    match net.paradigm() {
        Paradigm::Ddim => guided_ddim_sample(net, schedule, guide, config, seed),
        Paradigm::Flow => guided_flow_sample(net, net.arch.steps, guide, config, seed),
    }
}

/// Index of the candidate farthest from `reference` in teacher space: the
/// most shape-conflicting target.
pub fn conflict_target(teacher: &EmbeddingNet, reference: &Tensor, candidates: &[Tensor]) -> Result<usize> {
    let mut best = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = hpe_distance(teacher, reference, c)?;
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::ConfigInvalid("no target candidates".into()))
}

/// Relative reduction of the guided distance against the unguided control.
pub fn relative_gain(control: f64, guided: f64) -> f64 {
    if control == guided {
        0.0
    } else {
        (control - guided) / control
    }
}
