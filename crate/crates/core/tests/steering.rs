use steerlab_core::generative::{
    ddim_sample, flow_sample, Decoder, GenNet, GenTrainConfig, NoiseSchedule, Paradigm,
};
use steerlab_core::shapeworld::{render_image, ShapeClass, ShapeTag, TextureClass, PIXELS};
use steerlab_core::steer::{
    apply_schedule, guided_sample, guided_update, GuidanceConfig, GuidanceSchedule, Guide,
};
use steerlab_core::teacher::{hpe_distance, EmbeddingNet, DEFAULT_WIDTHS};
use steerlab_core::{rng, Tensor};

fn small_gen(paradigm: Paradigm) -> (GenNet, NoiseSchedule) {
    let config = GenTrainConfig {
        hidden: 32,
        time_dim: 8,
        ..GenTrainConfig::default()
    };
    let schedule = NoiseSchedule::default();
    let net = match paradigm {
        Paradigm::Ddim => GenNet::denoiser(PIXELS, &schedule, &config),
        Paradigm::Flow => GenNet::new(Paradigm::Flow, PIXELS, &config),
    };
    (net, schedule)
}

fn target() -> Tensor {
    render_image(&ShapeClass::centered(ShapeTag::Cross, 0.7), &TextureClass::solid([0.2, 0.3, 0.9]), 1)
        .unwrap()
        .pixels
}

#[test]
fn normalized_update_has_norm_alpha() {
    let mut r = rng::rng(4);
    for alpha in [0.5, 2.5, 5.0, 10.0] {
        let z = rng::normal_tensor(&mut r, &[PIXELS]);
        let g = rng::normal_tensor(&mut r, &[PIXELS]).scale(1e-6);
        let moved = guided_update(&z, &g, alpha, false).unwrap().unwrap();
        assert!((moved.sub(&z).unwrap().norm() - alpha).abs() < 1e-9);
    }
    let z = Tensor::ones(&[4]);
    assert_eq!(guided_update(&z, &Tensor::zeros(&[4]), 2.5, false).unwrap(), None);
}

#[test]
fn guided_runs_obey_norm_law_and_clamp() {
    let teacher = EmbeddingNet::metric(&DEFAULT_WIDTHS, 2);
    let target = target();
    let guide = Guide::new(&teacher, &Decoder::Identity, &target).unwrap();
    for paradigm in [Paradigm::Ddim, Paradigm::Flow] {
        let (net, schedule) = small_gen(paradigm);
        let dt = 1.0 / net.arch.steps as f64;
        for alpha in [2.5, 5.0, 10.0] {
            let config = GuidanceConfig::with_alpha(alpha);
            let res = guided_sample(&net, &schedule, &guide, &config, 3).unwrap();
            let expected = match paradigm {
                Paradigm::Ddim => alpha,
                Paradigm::Flow => alpha * dt,
            };
            for s in &res.trajectory {
                assert!(s.grad_norm > 0.0);
                assert!(s.applied);
                assert!((s.displacement - expected).abs() < 1e-6, "{paradigm} step {}", s.step);
                assert!(s.z_min >= -5.0 && s.z_max <= 5.0);
            }
            let d = hpe_distance(&teacher, &res.final_image, &target).unwrap();
            assert_eq!(d, res.final_hpe_distance);
        }
    }
}

#[test]
fn zero_alpha_matches_unguided_bit_for_bit() {
    let teacher = EmbeddingNet::metric(&DEFAULT_WIDTHS, 2);
    let target = target();
    let guide = Guide::new(&teacher, &Decoder::Identity, &target).unwrap();
    for seed in 0..3 {
        let (ddim, schedule) = small_gen(Paradigm::Ddim);
        let guided = guided_sample(&ddim, &schedule, &guide, &GuidanceConfig::with_alpha(0.0), seed).unwrap();
        assert_eq!(guided.final_latent.data(), ddim_sample(&ddim, &schedule, seed).unwrap().data());

        let (flow, _) = small_gen(Paradigm::Flow);
        let guided = guided_sample(&flow, &schedule, &guide, &GuidanceConfig::with_alpha(0.0), seed).unwrap();
        assert_eq!(guided.final_latent.data(), flow_sample(&flow, 50, seed).unwrap().data());
    }
}

#[test]
fn schedules_gate_the_prescribed_steps() {
    let teacher = EmbeddingNet::metric(&DEFAULT_WIDTHS, 2);
    let target = target();
    let guide = Guide::new(&teacher, &Decoder::Identity, &target).unwrap();
    let (net, schedule) = small_gen(Paradigm::Flow);
    let run = |s: GuidanceSchedule| {
        let config = GuidanceConfig {
            schedule: s,
            ..GuidanceConfig::default()
        };
        guided_sample(&net, &schedule, &guide, &config, 1).unwrap()
    };
    for s in [
        GuidanceSchedule::StopAfter { k: 10 },
        GuidanceSchedule::StopAfter { k: 0 },
        GuidanceSchedule::Window { a: 5, b: 20 },
        GuidanceSchedule::Continuous,
    ] {
        let res = run(s);
        let applied = res.trajectory.iter().filter(|t| t.applied).count();
        let expected = (0..50).filter(|&k| apply_schedule(s, k)).count();
        assert_eq!(applied, expected, "{s}");
        assert_eq!(res.summary().guided_steps, expected);
    }
    let full = run(GuidanceSchedule::StopAfter { k: 50 });
    let cont = run(GuidanceSchedule::Continuous);
    assert_eq!(full.final_latent, cont.final_latent);
    let none = run(GuidanceSchedule::StopAfter { k: 0 });
    assert_eq!(none.final_latent.data(), flow_sample(&net, 50, 1).unwrap().data());
}

#[test]
fn overlong_schedule_is_rejected() {
    let teacher = EmbeddingNet::metric(&DEFAULT_WIDTHS, 2);
    let target = target();
    let guide = Guide::new(&teacher, &Decoder::Identity, &target).unwrap();
    let (net, schedule) = small_gen(Paradigm::Ddim);
    let config = GuidanceConfig {
        schedule: GuidanceSchedule::StopAfter { k: 51 },
        ..GuidanceConfig::default()
    };
    assert!(guided_sample(&net, &schedule, &guide, &config, 0).is_err());
}
