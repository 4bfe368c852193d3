//! Acceptance gate. Trains the default-scale pipeline in a temporary
//! directory and prints one PASS/FAIL line per criterion, followed by lines
//! for the invariants that sit outside the numbered list. A FAIL line is a
//! measured outcome, not a harness error: the process exits nonzero only if
//! the pipeline itself breaks.

#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use steerlab_core::autodiff::Tape;
use steerlab_core::generative::{
    ddim_sample, flow_sample, sample, train_denoiser, train_velocity, GenTrainConfig, NoiseSchedule, Paradigm,
};
use steerlab_core::shapeworld::{render_image, ShapeClass, ShapeTag, Split, TextureClass, Triplet};
use steerlab_core::steer::{guided_sample, GuidanceConfig, Guide};
use steerlab_core::teacher::{
    evaluate, triplet_loss, triplet_margin, EmbeddingNet, DEFAULT_MARGIN, DEFAULT_WIDTHS,
};
use steerlab_core::{rng, Tensor};
use steerlab_lab::config::{SweepParam, SweepSpec};
use steerlab_lab::runs::{self, Models, SweepPoint};
use steerlab_lab::{exec, train, ExperimentConfig};

#[derive(Default)]
struct Gate {
    criteria: Vec<(usize, bool)>,
}

impl Gate {
    fn criterion(&mut self, id: usize, pass: bool, detail: String) {
        println!("{} criterion {id}: {detail}", verdict(pass));
        self.criteria.push((id, pass));
    }

    fn invariant(&self, name: &str, pass: bool, detail: String) {
        println!("{} invariant {name}: {detail}", verdict(pass));
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn point(points: &[SweepPoint], value: f64) -> SweepPoint {
    *points.iter().find(|p| p.value == value).expect("swept value")
}

fn gradients(gate: &mut Gate) {
    let t0 = Instant::now();
    let mut worst_op = (0.0f64, "");
    for c in gradcases::op_cases() {
        let e = gradcases::worst_op_error(&c);
        if e > worst_op.0 {
            worst_op = (e, c.name);
        }
    }
    let mut worst_composed = (0.0f64, "");
    for (label, decoder, teacher, lo, hi) in gradcases::guidance_cases() {
        let e = gradcases::worst_guidance_error(&decoder, &teacher, label, lo, hi);
        if e > worst_composed.0 {
            worst_composed = (e, label);
        }
    }
    let took = t0.elapsed();
    gate.criterion(
        1,
        worst_op.0 < gradcases::OP_TOL && worst_composed.0 < gradcases::COMPOSED_TOL && took.as_secs() < 60,
        format!(
            "{} ops x {} cases worst rel err {:.2e} ({}), composed worst {:.2e} ({}), {}",
            gradcases::op_cases().len(),
            gradcases::CASES,
            worst_op.0,
            worst_op.1,
            worst_composed.0,
            worst_composed.1,
            secs(took)
        ),
    );
}

fn triplet_suite(gate: &mut Gate) {
    let tape_loss = |a: &[f64], p: &[f64], n: &[f64]| {
        let tape = Tape::new();
        let row = |v: &[f64]| tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
        triplet_loss(row(a), row(p), row(n), DEFAULT_MARGIN).unwrap().item()
    };
    let e = [0.6, 0.8, 0.0];
    let worked = triplet_margin(0.1, 0.9, 0.2) == 0.0
        && triplet_margin(0.5, 0.4, 0.2) == 0.5 - 0.4 + 0.2
        && tape_loss(&e, &e, &e) == DEFAULT_MARGIN;

    let mut r = rng::rng(77);
    let unit = |r: &mut rng::Rng| {
        let v: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut violations = 0;
    let mut zeros = 0;
    for _ in 0..10_000 {
        let (a, p, n) = (unit(&mut r), unit(&mut r), unit(&mut r));
        let loss = tape_loss(&a, &p, &n);
        let (d_ap, d_an) = (dist(&a, &p), dist(&a, &n));
        let hand = (d_ap - d_an + DEFAULT_MARGIN).max(0.0);
        let boundary = (d_ap + DEFAULT_MARGIN - d_an).abs() < 1e-12;
        let zero_ok = boundary || (loss == 0.0) == (d_ap + DEFAULT_MARGIN <= d_an);
        if loss < 0.0 || (loss - hand).abs() > 1e-12 || !zero_ok {
            violations += 1;
        }
        zeros += (loss == 0.0) as usize;
    }
    gate.criterion(
        3,
        worked && violations == 0,
        format!("worked cases (0, 0.3, margin) exact: {worked}; 10000 random triples, {violations} violations, {zeros} in the zero set"),
    );
}

fn overfit(gate: &mut Gate) {
    let render = |s, c| {
        let img = render_image(&ShapeClass::centered(s, 0.6), &TextureClass::solid(c), 3).unwrap();
        Tensor::from_vec(img.pixels.data().to_vec())
    };
    let config = GenTrainConfig {
        epochs: 100,
        hidden: 64,
        time_dim: 16,
        lr: 2e-3,
        ..GenTrainConfig::default()
    };
    let schedule = NoiseSchedule::default();
    let x0 = render(ShapeTag::Diamond, [0.85, 0.3, 0.2]);
    let data = vec![x0.clone(); 32];
    let (ddim, _) = train_denoiser(&data, &schedule, &config).unwrap();
    let (flow, _) = train_velocity(&data, &config).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        worst = worst.max(ddim_sample(&ddim, &schedule, seed).unwrap().mse(&x0));
        worst = worst.max(flow_sample(&flow, 50, seed).unwrap().mse(&x0));
    }
    gate.criterion(9, worst < 0.01, format!("one-image oracle, DDIM and Euler flow, 4 seeds: worst MSE {worst:.2e}"));

    // A single image has zero per-pixel variance, so the preconditioned head
    // returns it exactly; two distinct images need the network.
    let pair = [render(ShapeTag::Diamond, [0.85, 0.3, 0.2]), render(ShapeTag::Ring, [0.2, 0.45, 0.8])];
    let data: Vec<Tensor> = (0..32).map(|i| pair[i % 2].clone()).collect();
    let config = GenTrainConfig {
        epochs: 300,
        hidden: 128,
        ..config
    };
    let (ddim, _) = train_denoiser(&data, &schedule, &config).unwrap();
    let (flow, _) = train_velocity(&data, &config).unwrap();
    let nearest = |z: Tensor| pair.iter().map(|x| z.mse(x)).fold(f64::INFINITY, f64::min);
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        worst = worst.max(nearest(ddim_sample(&ddim, &schedule, seed).unwrap()));
        worst = worst.max(nearest(flow_sample(&flow, 50, seed).unwrap()));
    }
    gate.invariant(
        "two-image overfit",
        worst < 0.01,
        format!("nearest-image MSE worst {worst:.2e} (bound 0.01)"),
    );
}

fn teacher_law(gate: &mut Gate, cfg: &ExperimentConfig) {
    let t0 = Instant::now();
    let teacher = train::cmd_train_teacher(cfg).unwrap();
    let baseline = train::cmd_train_baseline(cfg).unwrap();
    let ds = train::load_dataset(cfg).unwrap();
    let sampler = ds.sampler(Split::Val).unwrap();
    let random = EmbeddingNet::metric(&DEFAULT_WIDTHS, rng::derive_str(cfg.seed, "random-net"));
    // Chance: three distinct images drawn independently, roles assigned at random.
    let val = ds.manifest.ids(Split::Val);
    let mut r = rng::rng(rng::derive_str(cfg.seed, "random-net-triplets"));
    let unstructured: Vec<Triplet> = (0..10_000)
        .map(|_| loop {
            let [a, p, n] = [0; 3].map(|_| val[r.gen_range(0..val.len())]);
            if a != p && a != n && p != n {
                break Triplet { anchor: a, positive: p, negative: n };
            }
        })
        .collect();
    let chance = evaluate(&random, &ds.images, &unstructured, exec()).unwrap().accuracy;
    let took = t0.elapsed();
    let shaped: Vec<_> = (0..10_000).map(|_| sampler.sample(&mut r)).collect();
    let shaped_acc = evaluate(&random, &ds.images, &shaped, exec()).unwrap().accuracy;
    let gap = teacher.eval.accuracy - baseline.eval.accuracy;
    gate.criterion(
        2,
        gap >= 0.15 && (chance - 1.0 / 3.0).abs() <= 0.02 && took.as_secs() < 300,
        format!(
            "teacher {:.3}, texture baseline {:.3}, gap {:.1} pp; random net {:.3} over 10000 random triplets; {}",
            teacher.eval.accuracy,
            baseline.eval.accuracy,
            100.0 * gap,
            chance,
            secs(took)
        ),
    );
    // Random features keep some pixel-space geometry, so on shape triplets
    // an untrained net lands above chance.
    gate.invariant(
        "random net on shape triplets",
        (shaped_acc - 1.0 / 3.0).abs() <= 0.02,
        format!("{shaped_acc:.3} over 10000 val shape triplets (chance 0.333 ± 0.02)"),
    );
}

fn norm_law(gate: &mut Gate, cfg: &ExperimentConfig, models: &Models) {
    let candidates = runs::conflict_candidates();
    let mut worst: f64 = 0.0;
    let mut applied = 0;
    let mut clamp_ok = true;
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        let dt = 1.0 / cfg.generator.steps as f64;
        for seed in 0..2 {
            let s = runs::sample_seed(cfg, seed);
            let (_, target) =
                runs::resolve_target(models, paradigm, &cfg.steer.target, s, &candidates).unwrap();
            for alpha in [0.0, 2.5, 5.0, 10.0] {
                let res = models.run(paradigm, &target, &GuidanceConfig::with_alpha(alpha), s).unwrap();
                let expected = match paradigm {
                    Paradigm::Ddim => alpha,
                    Paradigm::Flow => alpha * dt,
                };
                for t in &res.trajectory {
                    if alpha > 0.0 && t.grad_norm > 0.0 {
                        worst = worst.max((t.displacement - expected).abs());
                        applied += t.applied as usize;
                        clamp_ok &= t.z_min >= -5.0 && t.z_max <= 5.0;
                    }
                }
            }
        }
    }
    gate.criterion(
        4,
        worst <= 1e-6 && clamp_ok && applied > 0,
        format!("{applied} guided steps at alpha in {{2.5, 5, 10}} (alpha 0 also run), worst |norm - law| {worst:.2e}, clamp held: {clamp_ok}"),
    );
}

fn sweep(cfg: &ExperimentConfig, paradigm: Paradigm, parameter: SweepParam, values: Vec<f64>, seeds: usize) -> Vec<SweepPoint> {
    let spec = SweepSpec {
        parameter,
        values,
        seeds,
        paradigm,
    };
    runs::cmd_sweep(cfg, &spec).unwrap().points
}

fn curve(points: &[SweepPoint]) -> String {
    points
        .iter()
        .map(|p| format!("{}: {:.4}±{:.4}", p.value, p.mean, p.std))
        .collect::<Vec<_>>()
        .join(", ")
}

fn efficacy_and_scale(gate: &mut Gate, cfg: &ExperimentConfig) {
    let alphas = vec![0.0, 2.5, 5.0, 10.0];
    let t0 = Instant::now();
    let ddim = sweep(cfg, Paradigm::Ddim, SweepParam::Alpha, alphas.clone(), 5);
    let flow = sweep(cfg, Paradigm::Flow, SweepParam::Alpha, alphas, 5);
    let took = t0.elapsed();
    let drop = |pts: &[SweepPoint]| 1.0 - point(pts, 2.5).mean / point(pts, 0.0).mean;
    let (dd, fd) = (drop(&ddim), drop(&flow));
    gate.criterion(
        5,
        dd >= 0.40 && fd >= 0.40 && took.as_secs() < 300,
        format!(
            "alpha 2.5 vs 0 over 5 seeds: ddim {:.4} vs {:.4} ({:.1}% lower), flow {:.4} vs {:.4} ({:.1}% lower); {}",
            point(&ddim, 2.5).mean,
            point(&ddim, 0.0).mean,
            100.0 * dd,
            point(&flow, 2.5).mean,
            point(&flow, 0.0).mean,
            100.0 * fd,
            secs(took)
        ),
    );

    let argmin = ddim.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap();
    let interior = argmin.value == 2.5 || argmin.value == 5.0;
    gate.criterion(
        6,
        interior && point(&ddim, 10.0).mean > argmin.mean,
        format!("ddim alpha curve [{}]; minimum at {}", curve(&ddim), argmin.value),
    );
    let fmin = flow.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap();
    gate.invariant(
        "flow scale curve (not a numbered criterion)",
        fmin.value == 2.5 || fmin.value == 5.0,
        format!("flow alpha curve [{}]; minimum at {}", curve(&flow), fmin.value),
    );

    let steps = sweep(
        cfg,
        Paradigm::Ddim,
        SweepParam::GuidedSteps,
        vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0],
        5,
    );
    let full = point(&steps, 50.0).mean;
    let best_early = steps.iter().filter(|p| p.value < 50.0).map(|p| p.mean).fold(f64::INFINITY, f64::min);
    gate.invariant(
        "guided-steps sweet spot",
        best_early <= full * 1.05,
        format!("ddim guided_steps curve [{}]; best before 50 {:.4} vs 50 steps {:.4}", curve(&steps), best_early, full),
    );
}

fn healing(gate: &mut Gate, cfg: &ExperimentConfig) {
    let t0 = Instant::now();
    let report = runs::cmd_healing(cfg).unwrap();
    let took = t0.elapsed();
    let flow = &report.verdicts[0];
    let ddim = &report.verdicts[1];
    gate.criterion(
        7,
        flow.early_worse >= 8 && ddim.gap.abs() < flow.gap.abs() && took.as_secs() < 600,
        format!(
            "flow {} worse than continuous on {}/{} seeds (gap {:.4}); ddim |continuous - {}| {:.4} vs flow gap {:.4}; {}",
            flow.early,
            flow.early_worse,
            flow.seeds,
            flow.gap,
            ddim.early,
            ddim.gap.abs(),
            flow.gap.abs(),
            secs(took)
        ),
    );
    let equiv = flow.full_stop_max_diff.max(ddim.full_stop_max_diff);
    gate.invariant(
        "stop_after(T) equals continuous",
        equiv <= 1e-6,
        format!("max per-seed difference {equiv:.2e}"),
    );
}

fn sanity(cfg: &ExperimentConfig, models: &Models, gate: &Gate) {
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        for run in 0..5 {
            let seed = runs::sample_seed(cfg, run);
            let target = models.unguided_image(paradigm, seed).unwrap();
            let d = models.run(paradigm, &target, &cfg.guidance, seed).unwrap().final_hpe_distance;
            if d > worst {
                worst = d;
                worst_at = format!("{paradigm} run {run}");
            }
        }
    }
    gate.invariant(
        "monotone target",
        worst <= 1e-3,
        format!("target = own unguided output, alpha {}: worst final distance {worst:.4} ({worst_at}), bound 1e-3", cfg.guidance.alpha),
    );

    let ds = train::load_dataset(cfg).unwrap();
    let mean = ds.mean_image(Split::Train);
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        let n = 32;
        let mut acc = vec![0.0; mean.numel()];
        for run in 0..n {
            let img = models.unguided_image(paradigm, runs::sample_seed(cfg, 1000 + run)).unwrap();
            acc.iter_mut().zip(img.data()).for_each(|(a, v)| *a += v / n as f64);
        }
        let dev = acc.iter().zip(mean.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        gate.invariant(
            &format!("{paradigm} sample mean"),
            dev <= 0.15,
            format!("max per-pixel |mean of {n} samples - training mean| {dev:.3}, bound 0.15"),
        );
    }
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        seed: 9,
        ..ExperimentConfig::default()
    };
    cfg.dataset.n_images = 60;
    cfg.dataset.train_triplets = 100;
    cfg.dataset.val_triplets = 50;
    cfg.teacher.epochs = 2;
    cfg.teacher.triplets_per_epoch = 64;
    cfg.generator.epochs = 2;
    cfg.generator.hidden = 32;
    cfg.generator.time_dim = 8;
    cfg.steer.seeds = vec![0, 1];
    cfg.resolve().unwrap()
}

fn tiny_pipeline(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = tiny_config(out);
    train::gen_data(&cfg, None).unwrap();
    train::cmd_train_teacher(&cfg).unwrap();
    let mut files = Vec::new();
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        train::cmd_train_gen(&cfg, paradigm).unwrap();
        cfg.steer.paradigm = paradigm;
        for r in runs::cmd_steer(&cfg).unwrap() {
            let rel = format!("steer/{paradigm}/run{}/summary.json", r.run);
            files.push((rel.clone(), std::fs::read(out.join(&rel)).unwrap()));
        }
    }
    files
}

fn determinism(gate: &mut Gate, cfg: &ExperimentConfig, models: &Models) {
    let mut identical = 0;
    let mut total = 0;
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        let net = models.net(paradigm);
        for run in 0..5 {
            let seed = runs::sample_seed(cfg, run);
            let target = models.unguided_image(paradigm, runs::sample_seed(cfg, run + 100)).unwrap();
            let guide = Guide::new(&models.teacher, &models.decoder, &target).unwrap();
            let guided = guided_sample(net, &models.schedule, &guide, &GuidanceConfig::with_alpha(0.0), seed).unwrap();
            let plain = sample(net, &models.schedule, seed).unwrap();
            total += 1;
            identical += (guided.final_latent.data() == plain.data()) as usize;
        }
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = tiny_pipeline(a.path());
    let second = tiny_pipeline(b.path());
    let same = first == second && !first.is_empty();
    gate.criterion(
        8,
        identical == total && same,
        format!(
            "alpha 0 bit-identical on {identical}/{total} trained runs; pipeline re-run: {} summary JSONs byte-identical: {same}",
            first.len()
        ),
    );
}

fn main() {
    let started = Instant::now();
    let mut gate = Gate::default();
    gradients(&mut gate);
    triplet_suite(&mut gate);
    overfit(&mut gate);

    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    }
    .resolve()
    .expect("default config is valid");
    println!(
        "pipeline: {} images, teacher {} epochs, generators {} epochs, {} threads",
        cfg.dataset.n_images,
        cfg.teacher.epochs,
        cfg.generator.epochs,
        steerlab_lab::init_pool().unwrap()
    );
    train::gen_data(&cfg, None).unwrap();
    teacher_law(&mut gate, &cfg);
    let t0 = Instant::now();
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        train::cmd_train_gen(&cfg, paradigm).unwrap();
    }
    println!("generators trained in {}", secs(t0.elapsed()));
    let models = Models::load(&cfg, &[Paradigm::Ddim, Paradigm::Flow]).unwrap();
    norm_law(&mut gate, &cfg, &models);
    efficacy_and_scale(&mut gate, &cfg);
    healing(&mut gate, &cfg);
    determinism(&mut gate, &cfg, &models);
    sanity(&cfg, &models, &gate);

    gate.criteria.sort();
    for &(id, pass) in &gate.criteria {
        println!("summary criterion {id}: {}", verdict(pass));
    }
    let passed = gate.criteria.iter().filter(|c| c.1).count();
    println!(
        "acceptance: {passed}/{} criteria pass, {} total",
        gate.criteria.len(),
        secs(started.elapsed())
    );
}
