//! Steering runs: single paired runs, parameter sweeps, and the healing
//! experiment. Every run draws its sampler seed from the global seed, so a
//! `(value, seed)` cell is reproducible on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steerlab_core::generative::{sample, Decoder, GenNet, NoiseSchedule, Paradigm};
use steerlab_core::io::write_ppm;
use steerlab_core::shapeworld::{load_image, render_image, ShapeClass, ShapeTag, TextureClass};
use steerlab_core::steer::{
    conflict_target, guided_sample, relative_gain, trajectory_csv, GuidanceConfig, GuidanceSchedule, Guide,
    SteerResult, SteerSummary,
};
use steerlab_core::teacher::EmbeddingNet;
use steerlab_core::{rng, Tensor};

use crate::config::{ExperimentConfig, SweepParam, SweepSpec, TargetSpec};
use crate::error::{LabError, Result};
use crate::svg::{line_plot, Point, Series};
use crate::train::{load_decoder, load_generator, schedule, write_provenance};
use crate::{exec, mean_std, write_json, write_text};

/// Teacher, decoder, schedule, and the requested generators.
pub struct Models {
    pub teacher: EmbeddingNet,
    pub decoder: Decoder,
    pub schedule: NoiseSchedule,
    nets: Vec<GenNet>,
}

impl Models {
    pub fn load(cfg: &ExperimentConfig, paradigms: &[Paradigm]) -> Result<Self> {
        let teacher = EmbeddingNet::load(&cfg.teacher_path()).map_err(LabError::io)?;
        let decoder = load_decoder(cfg)?;
        let nets = paradigms
            .iter()
            .map(|&p| load_generator(cfg, p))
            .collect::<Result<Vec<_>>>()?;
        for net in &nets {
            if net.latent_dim() != decoder.latent_dim() {
                return Err(LabError::Config(format!(
                    "{} generator has latent size {}, decoder expects {}",
                    net.paradigm(),
                    net.latent_dim(),
                    decoder.latent_dim()
                )));
            }
        }
        Ok(Self {
            teacher,
            decoder,
            schedule: schedule(cfg)?,
            nets,
        })
    }

    pub fn net(&self, paradigm: Paradigm) -> &GenNet {
        self.nets
            .iter()
            .find(|n| n.paradigm() == paradigm)
            .expect("generator loaded for this paradigm")
    }

    /// Decoded unguided sample.
    pub fn unguided_image(&self, paradigm: Paradigm, seed: u64) -> Result<Tensor> {
        let z = sample(self.net(paradigm), &self.schedule, seed).map_err(|e| LabError::Steering(e.to_string()))?;
        self.decoder.decode(&z).map_err(|e| LabError::Steering(e.to_string()))
    }

    pub fn run(
        &self,
        paradigm: Paradigm,
        target: &Tensor,
        config: &GuidanceConfig,
        seed: u64,
    ) -> Result<SteerResult, steerlab_core::steer::SteerAbort> {
        let guide = Guide::new(&self.teacher, &self.decoder, target).map_err(|error| {
            steerlab_core::steer::SteerAbort {
                error,
                trajectory: Vec::new(),
            }
        })?;
        guided_sample(self.net(paradigm), &self.schedule, &guide, config, seed)
    }
}

/// Centered solid renders of every shape, the pool conflict targets are
/// drawn from.
pub fn conflict_candidates() -> Vec<Tensor> {
    ShapeTag::ALL
        .iter()
        .map(|&s| {
            render_image(&ShapeClass::centered(s, 0.6), &TextureClass::solid([0.8, 0.2, 0.2]), 7)
                .expect("candidate renders are valid")
                .pixels
        })
        .collect()
}

/// Sampler seed of run `run`.
pub fn sample_seed(cfg: &ExperimentConfig, run: u64) -> u64 {
    rng::derive(rng::derive_str(cfg.seed, "steer-run"), run)
}

/// Target image and a label for it.
pub fn resolve_target(
    models: &Models,
    paradigm: Paradigm,
    spec: &TargetSpec,
    seed: u64,
    candidates: &[Tensor],
) -> Result<(String, Tensor)> {
    match spec {
        TargetSpec::Conflict => {
            let reference = models.unguided_image(paradigm, seed)?;
            let idx = conflict_target(&models.teacher, &reference, candidates).map_err(LabError::io)?;
            Ok((format!("conflict:{}", ShapeTag::ALL[idx]), candidates[idx].clone()))
        }
        TargetSpec::Image { path } => Ok((
            path.display().to_string(),
            load_image(path).map_err(LabError::io)?,
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerRecord {
    pub config_hash: String,
    pub paradigm: Paradigm,
    pub run: u64,
    pub sample_seed: u64,
    pub target: String,
    pub final_hpe_distance: f64,
    pub control_hpe_distance: f64,
    pub relative_gain: f64,
    pub guided: SteerSummary,
    pub control: SteerSummary,
}

pub fn steer_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("steer").join(cfg.steer.paradigm.to_string())
}

/// Guided run plus an α=0 control with the same seed, for every configured
/// run. Writes `run<k>/summary.json`, `trajectory.csv`, and the final image.
pub fn cmd_steer(cfg: &ExperimentConfig) -> Result<Vec<SteerRecord>> {
    let paradigm = cfg.steer.paradigm;
    let models = Models::load(cfg, &[paradigm])?;
    let candidates = conflict_candidates();
    let dir = steer_dir(cfg);
    write_provenance(&dir, "steer", cfg)?;
    let control_cfg = GuidanceConfig {
        alpha: 0.0,
        ..cfg.guidance
    };
    let mut records = Vec::new();
    for &run in &cfg.steer.seeds {
        let seed = sample_seed(cfg, run);
        let (label, target) = resolve_target(&models, paradigm, &cfg.steer.target, seed, &candidates)?;
        let run_dir = dir.join(format!("run{run}"));
        let guided = match models.run(paradigm, &target, &cfg.guidance, seed) {
            Ok(r) => r,
            Err(abort) => {
                write_text(&run_dir.join("trajectory.csv"), &trajectory_csv(&abort.trajectory))?;
                return Err(LabError::Steering(abort.to_string()));
            }
        };
        let control = models
            .run(paradigm, &target, &control_cfg, seed)
            .map_err(|a| LabError::Steering(a.to_string()))?;
        let record = SteerRecord {
            config_hash: cfg.hash(),
            paradigm,
            run,
            sample_seed: seed,
            target: label,
            final_hpe_distance: guided.final_hpe_distance,
            control_hpe_distance: control.final_hpe_distance,
            relative_gain: relative_gain(control.final_hpe_distance, guided.final_hpe_distance),
            guided: guided.summary(),
            control: control.summary(),
        };
        write_text(&run_dir.join("trajectory.csv"), &trajectory_csv(&guided.trajectory))?;
        guided.final_image.save(run_dir.join("final.stlb")).map_err(LabError::io)?;
        write_ppm(&run_dir.join("final.ppm"), &guided.final_image).map_err(LabError::io)?;
        write_ppm(&run_dir.join("target.ppm"), &target).map_err(LabError::io)?;
        write_json(&run_dir.join("summary.json"), &record)?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_hpe_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    /// Finite runs behind the mean.
    pub n: usize,
}

pub const SWEEP_HEADER: &str = "value,seed,final_hpe_distance";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.value, r.seed, r.final_hpe_distance));
    }
    s
}

fn bad_csv(path: &Path, line: usize, why: &str) -> LabError {
    LabError::Config(format!("{}:{line}: {why}", path.display()))
}

/// Inverse of [`sweep_csv`]; `path` only labels errors.
pub fn parse_sweep_csv(text: &str, path: &Path) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(bad_csv(path, 1, "missing sweep header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let parsed = match cols.as_slice() {
                [v, s, d] => v.parse().ok().zip(s.parse().ok()).zip(d.parse().ok()),
                _ => None,
            };
            let ((value, seed), final_hpe_distance) = parsed.ok_or_else(|| bad_csv(path, i + 2, "malformed row"))?;
            Ok(SweepRow {
                value,
                seed,
                final_hpe_distance,
            })
        })
        .collect()
}

/// Mean and standard deviation per value, in order of first appearance.
pub fn aggregate_sweep(rows: &[SweepRow]) -> Vec<SweepPoint> {
    let mut order: Vec<f64> = Vec::new();
    for r in rows {
        if !order.iter().any(|v| v.to_bits() == r.value.to_bits()) {
            order.push(r.value);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let ds: Vec<f64> = rows
                .iter()
                .filter(|r| r.value.to_bits() == value.to_bits())
                .map(|r| r.final_hpe_distance)
                .collect();
            let (mean, std, n) = mean_std(&ds);
            SweepPoint { value, mean, std, n }
        })
        .collect()
}

pub fn sweep_svg(title: &str, x_label: &str, series: &[(String, Vec<SweepPoint>)], note: &str) -> String {
    let series: Vec<Series> = series
        .iter()
        .map(|(label, pts)| Series {
            label: label.clone(),
            points: pts
                .iter()
                .map(|p| Point {
                    x: p.value,
                    y: p.mean,
                    err: p.std,
                })
                .collect(),
        })
        .collect();
    line_plot(title, x_label, "final hpe distance", &series, note)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub spec: SweepSpec,
    pub points: Vec<SweepPoint>,
    pub failed_runs: usize,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

pub fn sweep_dir(cfg: &ExperimentConfig, spec: &SweepSpec) -> PathBuf {
    cfg.out_dir.join("sweep").join(format!("{}_{}", spec.parameter, spec.paradigm))
}

/// Guidance for one sweep cell.
pub fn sweep_guidance(base: &GuidanceConfig, parameter: SweepParam, value: f64) -> GuidanceConfig {
    match parameter {
        SweepParam::Alpha => GuidanceConfig { alpha: value, ..*base },
        SweepParam::GuidedSteps => GuidanceConfig {
            schedule: GuidanceSchedule::StopAfter { k: value as usize },
            ..*base
        },
    }
}

/// Conflict targets for runs `0..n`, computed once per seed.
fn conflict_targets(cfg: &ExperimentConfig, models: &Models, paradigm: Paradigm, n: usize) -> Result<Vec<Tensor>> {
    let candidates = conflict_candidates();
    exec()
        .map_range(n, |run| {
            resolve_target(models, paradigm, &TargetSpec::Conflict, sample_seed(cfg, run as u64), &candidates)
                .map(|(_, t)| t)
        })
        .into_iter()
        .collect()
}

/// `|values| × seeds` steering runs against per-seed conflict targets.
/// Failed runs become NaN rows.
pub fn cmd_sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate(cfg.generator.steps)?;
    let models = Models::load(cfg, &[spec.paradigm])?;
    let targets = conflict_targets(cfg, &models, spec.paradigm, spec.seeds)?;
    let jobs: Vec<(usize, u64)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.seeds as u64).map(move |s| (v, s)))
        .collect();
    let results: BTreeMap<(usize, u64), f64> = exec()
        .map(&jobs, |&(v, run)| {
            let g = sweep_guidance(&cfg.guidance, spec.parameter, spec.values[v]);
            let d = models
                .run(spec.paradigm, &targets[run as usize], &g, sample_seed(cfg, run))
                .map_or(f64::NAN, |r| r.final_hpe_distance);
            ((v, run), d)
        })
        .into_iter()
        .collect();
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|(&(v, seed), &d)| SweepRow {
            value: spec.values[v],
            seed,
            final_hpe_distance: d,
        })
        .collect();
    let dir = sweep_dir(cfg, spec);
    let hash = cfg.hash();
    let points = aggregate_sweep(&rows);
    let csv = dir.join("sweep.csv");
    write_text(&csv, &sweep_csv(&rows))?;
    let svg = dir.join("sweep.svg");
    write_text(
        &svg,
        &sweep_svg(
            &format!("{} sweep ({})", spec.parameter, spec.paradigm),
            &spec.parameter.to_string(),
            &[(spec.paradigm.to_string(), points.clone())],
            &format!("config {hash}"),
        ),
    )?;
    let report = SweepReport {
        config_hash: hash,
        spec: spec.clone(),
        points,
        failed_runs: rows.iter().filter(|r| !r.final_hpe_distance.is_finite()).count(),
        csv,
        svg,
    };
    write_json(&dir.join("summary.json"), &report)?;
    write_provenance(&dir, "sweep", cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealingRow {
    pub paradigm: Paradigm,
    pub protocol: String,
    pub seed: u64,
    pub final_hpe_distance: f64,
}

pub const HEALING_HEADER: &str = "paradigm,protocol,seed,final_hpe_distance";

pub fn healing_csv(rows: &[HealingRow]) -> String {
    let mut s = format!("{HEALING_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.paradigm, r.protocol, r.seed, r.final_hpe_distance));
    }
    s
}

pub fn parse_healing_csv(text: &str, path: &Path) -> Result<Vec<HealingRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEALING_HEADER) {
        return Err(bad_csv(path, 1, "missing healing header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let row = match cols.as_slice() {
                [p, proto, s, d] => p
                    .parse::<Paradigm>()
                    .ok()
                    .zip(s.parse::<u64>().ok())
                    .zip(d.parse::<f64>().ok())
                    .map(|((paradigm, seed), final_hpe_distance)| HealingRow {
                        paradigm,
                        protocol: proto.to_string(),
                        seed,
                        final_hpe_distance,
                    }),
                _ => None,
            };
            row.ok_or_else(|| bad_csv(path, i + 2, "malformed row"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStat {
    pub paradigm: Paradigm,
    pub protocol: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per `(paradigm, protocol)` mean and standard deviation, in order of first
/// appearance.
pub fn aggregate_healing(rows: &[HealingRow]) -> Vec<ProtocolStat> {
    let mut keys: Vec<(Paradigm, &str)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.paradigm, r.protocol.as_str())) {
            keys.push((r.paradigm, &r.protocol));
        }
    }
    keys.into_iter()
        .map(|(paradigm, protocol)| {
            let ds: Vec<f64> = rows
                .iter()
                .filter(|r| r.paradigm == paradigm && r.protocol == protocol)
                .map(|r| r.final_hpe_distance)
                .collect();
            let (mean, std, n) = mean_std(&ds);
            ProtocolStat {
                paradigm,
                protocol: protocol.to_string(),
                mean,
                std,
                n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub paradigm: Paradigm,
    pub early: String,
    pub continuous_mean: f64,
    pub early_mean: f64,
    /// Early-stop mean minus continuous mean.
    pub gap: f64,
    /// Seeds on which the early stop ends farther from the target.
    pub early_worse: usize,
    pub seeds: usize,
    /// Largest per-seed difference between stop_after(T) and continuous.
    pub full_stop_max_diff: f64,
    pub holds: bool,
    pub line: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct HealingReport {
    pub config_hash: String,
    pub stats: Vec<ProtocolStat>,
    pub verdicts: Vec<Verdict>,
    pub failed_runs: usize,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

pub fn healing_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("healing")
}

fn stop_step(fraction: f64, steps: usize) -> usize {
    ((fraction * steps as f64).round() as usize).min(steps)
}

fn protocols(cfg: &ExperimentConfig) -> Vec<GuidanceSchedule> {
    let steps = cfg.generator.steps;
    let mut ks = vec![
        stop_step(cfg.healing.flow_stop, steps),
        stop_step(cfg.healing.ddim_stop, steps),
        steps,
    ];
    ks.sort_unstable();
    ks.dedup();
    let mut out: Vec<GuidanceSchedule> = ks.into_iter().map(|k| GuidanceSchedule::StopAfter { k }).collect();
    out.push(GuidanceSchedule::Continuous);
    out
}

/// Verdicts from healing rows. Flow heals when its early stop ends farther
/// from the target than continuous guidance on at least 80% of seeds; DDIM
/// locks early when its continuous-vs-early gap is below the flow gap.
pub fn healing_verdicts(cfg: &ExperimentConfig, rows: &[HealingRow]) -> Vec<Verdict> {
    let steps = cfg.generator.steps;
    let full = GuidanceSchedule::StopAfter { k: steps }.to_string();
    let cont = GuidanceSchedule::Continuous.to_string();
    let verdict = |paradigm: Paradigm, fraction: f64| {
        let early = GuidanceSchedule::StopAfter {
            k: stop_step(fraction, steps),
        }
        .to_string();
        let per_seed = |proto: &str| -> BTreeMap<u64, f64> {
            rows.iter()
                .filter(|r| r.paradigm == paradigm && r.protocol == proto)
                .map(|r| (r.seed, r.final_hpe_distance))
                .collect()
        };
        let (c, e, f) = (per_seed(&cont), per_seed(&early), per_seed(&full));
        let early_worse = c.iter().filter(|(s, d)| e.get(s).is_some_and(|x| x > d)).count();
        let full_stop_max_diff = c
            .iter()
            .map(|(s, d)| f.get(s).map_or(f64::NAN, |x| (x - d).abs()))
            .fold(0.0, f64::max);
        let continuous_mean = mean_std(&c.values().copied().collect::<Vec<_>>()).0;
        let early_mean = mean_std(&e.values().copied().collect::<Vec<_>>()).0;
        Verdict {
            paradigm,
            early,
            continuous_mean,
            early_mean,
            gap: early_mean - continuous_mean,
            early_worse,
            seeds: c.len(),
            full_stop_max_diff,
            holds: false,
            line: String::new(),
        }
    };
    let mut flow = verdict(Paradigm::Flow, cfg.healing.flow_stop);
    let mut ddim = verdict(Paradigm::Ddim, cfg.healing.ddim_stop);
    flow.holds = flow.gap > 0.0 && flow.early_worse * 5 >= flow.seeds * 4;
    flow.line = format!(
        "flow: {} ({} mean {:.4} vs continuous {:.4}; early stop worse on {}/{} seeds)",
        if flow.holds { "healing" } else { "no healing" },
        flow.early,
        flow.early_mean,
        flow.continuous_mean,
        flow.early_worse,
        flow.seeds
    );
    ddim.holds = ddim.gap.abs() < flow.gap.abs();
    ddim.line = format!(
        "ddim: {} (|continuous - {}| = {:.4}, flow gap {:.4})",
        if ddim.holds { "early locking" } else { "no early locking" },
        ddim.early,
        ddim.gap.abs(),
        flow.gap.abs()
    );
    vec![flow, ddim]
}

/// Early-stop and continuous guidance on both paradigms, per-seed conflict
/// targets.
pub fn cmd_healing(cfg: &ExperimentConfig) -> Result<HealingReport> {
    let paradigms = [Paradigm::Flow, Paradigm::Ddim];
    let seeds = cfg.healing.seeds;
    if seeds < 3 {
        return Err(LabError::Config(format!("healing needs at least 3 seeds, got {seeds}")));
    }
    let models = Models::load(cfg, &paradigms)?;
    let targets: Vec<Vec<Tensor>> = paradigms
        .iter()
        .map(|&p| conflict_targets(cfg, &models, p, seeds))
        .collect::<Result<_>>()?;
    let schedules = protocols(cfg);
    let mut jobs = Vec::new();
    for p in 0..paradigms.len() {
        for (k, _) in schedules.iter().enumerate() {
            for run in 0..seeds as u64 {
                jobs.push((p, k, run));
            }
        }
    }
    let results: BTreeMap<(usize, usize, u64), f64> = exec()
        .map(&jobs, |&(p, k, run)| {
            let g = GuidanceConfig {
                schedule: schedules[k],
                ..cfg.guidance
            };
            let d = models
                .run(paradigms[p], &targets[p][run as usize], &g, sample_seed(cfg, run))
                .map_or(f64::NAN, |r| r.final_hpe_distance);
            ((p, k, run), d)
        })
        .into_iter()
        .collect();
    let rows: Vec<HealingRow> = results
        .iter()
        .map(|(&(p, k, seed), &d)| HealingRow {
            paradigm: paradigms[p],
            protocol: schedules[k].to_string(),
            seed,
            final_hpe_distance: d,
        })
        .collect();
    let dir = healing_dir(cfg);
    let hash = cfg.hash();
    let stats = aggregate_healing(&rows);
    let verdicts = healing_verdicts(cfg, &rows);
    let csv = dir.join("healing.csv");
    write_text(&csv, &healing_csv(&rows))?;
    let svg = dir.join("healing.svg");
    write_text(&svg, &healing_svg(cfg, &stats, &hash))?;
    let report = HealingReport {
        config_hash: hash,
        stats,
        verdicts,
        failed_runs: rows.iter().filter(|r| !r.final_hpe_distance.is_finite()).count(),
        csv,
        svg,
    };
    write_json(&dir.join("summary.json"), &report)?;
    write_provenance(&dir, "healing", cfg)?;
    Ok(report)
}

/// Mean distance against the number of guided steps, one line per paradigm.
/// Continuous guidance sits at the full step count.
pub fn healing_svg(cfg: &ExperimentConfig, stats: &[ProtocolStat], hash: &str) -> String {
    let steps = cfg.generator.steps as f64;
    let series: Vec<(String, Vec<SweepPoint>)> = [Paradigm::Flow, Paradigm::Ddim]
        .iter()
        .map(|&p| {
            let mut pts: Vec<SweepPoint> = stats
                .iter()
                .filter(|s| s.paradigm == p && s.protocol != GuidanceSchedule::Continuous.to_string())
                .filter_map(|s| {
                    let k = s.protocol.strip_prefix("stop_after(")?.strip_suffix(')')?.parse::<f64>().ok()?;
                    Some(SweepPoint {
                        value: k,
                        mean: s.mean,
                        std: s.std,
                        n: s.n,
                    })
                })
                .collect();
            pts.sort_by(|a, b| a.value.total_cmp(&b.value));
            if let Some(c) = stats
                .iter()
                .find(|s| s.paradigm == p && s.protocol == GuidanceSchedule::Continuous.to_string())
            {
                pts.retain(|q| q.value != steps);
                pts.push(SweepPoint {
                    value: steps,
                    mean: c.mean,
                    std: c.std,
                    n: c.n,
                });
            }
            (p.to_string(), pts)
        })
        .collect();
    sweep_svg("early stop vs continuous guidance", "guided steps", &series, &format!("config {hash}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_round_trips_byte_for_byte() {
        let rows = vec![
            SweepRow {
                value: 2.5,
                seed: 0,
                final_hpe_distance: 0.123456789012345,
            },
            SweepRow {
                value: 10.0,
                seed: 3,
                final_hpe_distance: f64::NAN,
            },
        ];
        let text = sweep_csv(&rows);
        let back = parse_sweep_csv(&text, Path::new("x")).unwrap();
        assert_eq!(sweep_csv(&back), text);
        let points = aggregate_sweep(&back);
        assert_eq!(points.len(), 2);
        assert_eq!(points[1].n, 0);
    }

    #[test]
    fn healing_csv_round_trips_byte_for_byte() {
        let rows = vec![HealingRow {
            paradigm: Paradigm::Flow,
            protocol: "stop_after(10)".into(),
            seed: 4,
            final_hpe_distance: 1.5e-7,
        }];
        let text = healing_csv(&rows);
        assert_eq!(healing_csv(&parse_healing_csv(&text, Path::new("x")).unwrap()), text);
        assert!(parse_healing_csv("paradigm,protocol\n", Path::new("x")).is_err());
    }

    #[test]
    fn verdicts_follow_the_seed_counts() {
        let cfg = ExperimentConfig::default();
        let mut rows = Vec::new();
        for seed in 0..10 {
            for (p, early, cont) in [(Paradigm::Flow, "stop_after(10)", 1.0), (Paradigm::Ddim, "stop_after(30)", 1.0)] {
                let e = if p == Paradigm::Flow { 2.0 } else { 1.1 };
                for (proto, d) in [(early, e), ("continuous", cont), ("stop_after(50)", cont)] {
                    rows.push(HealingRow {
                        paradigm: p,
                        protocol: proto.into(),
                        seed,
                        final_hpe_distance: d,
                    });
                }
            }
        }
        let v = healing_verdicts(&cfg, &rows);
        assert!(v[0].holds && v[1].holds);
        assert_eq!(v[0].early_worse, 10);
        assert_eq!(v[0].full_stop_max_diff, 0.0);
    }
}
