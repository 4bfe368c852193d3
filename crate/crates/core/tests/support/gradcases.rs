//! Finite-difference gradient cases shared by the gradcheck tests and the
//! acceptance gate.

use rand::Rng as _;
use steerlab_core::autodiff::{concat, Tape, Var};
use steerlab_core::generative::{Decoder, TinyAutoencoder};
use steerlab_core::rng::{self, Rng};
use steerlab_core::steer::Guide;
use steerlab_core::teacher::{EmbeddingNet, DEFAULT_WIDTHS};
use steerlab_core::Tensor;

pub const H: f64 = 1e-5;
pub const CASES: usize = 100;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

pub type Build = for<'t> fn(&[Var<'t>]) -> Var<'t>;
pub type Gen = fn(&mut Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub seed: u64,
    pub gen: Gen,
    pub build: Build,
}

fn case(name: &'static str, seed: u64, gen: Gen, build: Build) -> OpCase {
    OpCase {
        name,
        seed,
        gen,
        build,
    }
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.2..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar probe `Σ w ⊙ f(inputs)` so every output element contributes.
fn probe(inputs: &[Tensor], weights: &Tensor, f: Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&vars).value();
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between the tape gradient and central differences
/// over `CASES` random inputs.
pub fn worst_op_error(c: &OpCase) -> f64 {
    let (name, seed, gen, f) = (c.name, c.seed, c.gen, c.build);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let mut r = rng::rng(rng::derive(rng::derive_str(seed, name), case as u64));
        let inputs = gen(&mut r);
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let out = f(&vars);
        let weights = rng::normal_tensor(&mut r, out.shape().as_slice());
        let root = out
            .mul(tape.constant(weights.clone()))
            .unwrap()
            .sum()
            .unwrap();
        let mut grads = tape.backward(root).unwrap();

        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.take(vars[k]).unwrap();
            let mut numeric = vec![0.0; x.numel()];
            for i in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= H;
                numeric[i] = (probe(&plus, &weights, f) - probe(&minus, &weights, f)) / (2.0 * H);
            }
            worst = worst.max(rel_err(analytic.data(), &numeric));
        }
    }
    worst
}

fn mat(r: &mut Rng) -> Tensor {
    let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
    uniform(r, &[m, n], -2.0, 2.0)
}

fn pair(r: &mut Rng) -> Vec<Tensor> {
    let a = mat(r);
    let b = uniform(r, a.shape(), -2.0, 2.0);
    vec![a, b]
}

/// One entry per differentiable op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", 1, pair, |v| v[0].add(v[1]).unwrap()),
        case("sub", 2, pair, |v| v[0].sub(v[1]).unwrap()),
        case("mul", 3, pair, |v| v[0].mul(v[1]).unwrap()),
        case(
            "div",
            4,
            |r| {
                let a = mat(r);
                let b = away_from_zero(r, a.shape());
                vec![a, b]
            },
            |v| v[0].div(v[1]).unwrap(),
        ),
        case(
            "broadcast",
            5,
            |r| vec![mat(r), away_from_zero(r, &[])],
            |v| {
                v[0].mul(v[1])
                    .unwrap()
                    .add(v[1])
                    .unwrap()
                    .div(v[1])
                    .unwrap()
            },
        ),
        case("scale", 6, |r| vec![mat(r)], |v| v[0].scale(-1.7).unwrap()),
        case(
            "matmul",
            7,
            |r| {
                let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
                vec![
                    uniform(r, &[m, k], -1.0, 1.0),
                    uniform(r, &[k, n], -1.0, 1.0),
                ]
            },
            |v| v[0].matmul(v[1]).unwrap(),
        ),
        case(
            "add_row",
            8,
            |r| {
                let a = mat(r);
                let b = uniform(r, &[a.shape()[1]], -1.0, 1.0);
                vec![a, b]
            },
            |v| v[0].add_row(v[1]).unwrap(),
        ),
        case(
            "relu",
            9,
            |r| vec![away_from_zero(r, &[3, 4])],
            |v| v[0].relu().unwrap(),
        ),
        case("tanh", 10, |r| vec![mat(r)], |v| v[0].tanh().unwrap()),
        case(
            "sigmoid",
            11,
            |r| vec![uniform(r, &[3, 3], -4.0, 4.0)],
            |v| v[0].sigmoid().unwrap(),
        ),
        case(
            "soft_clip",
            12,
            |r| vec![uniform(r, &[4, 4], -0.3, 1.3)],
            |v| v[0].soft_clip(0.05).unwrap(),
        ),
        case("square", 13, |r| vec![mat(r)], |v| v[0].square().unwrap()),
        case(
            "sqrt",
            14,
            |r| vec![uniform(r, &[3, 3], 0.3, 3.0)],
            |v| v[0].sqrt().unwrap(),
        ),
        case(
            "sum",
            15,
            |r| vec![mat(r)],
            |v| v[0].sum().unwrap().add(v[0].mean().unwrap()).unwrap(),
        ),
        case(
            "sum_rows",
            16,
            |r| vec![mat(r)],
            |v| v[0].sum_rows().unwrap(),
        ),
        case(
            "l2norm",
            17,
            |r| vec![away_from_zero(r, &[3, 5])],
            |v| v[0].l2norm().unwrap(),
        ),
        case(
            "normalize_rows",
            18,
            |r| vec![away_from_zero(r, &[3, 5])],
            |v| v[0].normalize_rows().unwrap(),
        ),
        case("concat", 19, pair, |v| {
            let c = concat(&[v[0], v[1]], 1).unwrap();
            let s = c.shape();
            let flat = c.reshape(&[s[0] * s[1]]).unwrap();
            flat.slice(0, 1, s[0] * s[1]).unwrap()
        }),
        case(
            "cross_entropy",
            20,
            |r| vec![uniform(r, &[4, 5], -3.0, 3.0)],
            |v| v[0].cross_entropy(&[0, 4, 2, 2]).unwrap(),
        ),
    ]
}

/// Directional derivatives of the guidance loss with respect to the latent.
pub fn worst_guidance_error(
    decoder: &Decoder,
    teacher: &EmbeddingNet,
    label: &str,
    lo: f64,
    hi: f64,
) -> f64 {
    let dim = decoder.latent_dim();
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let mut r = rng::rng(rng::derive(rng::derive_str(31, label), case as u64));
        let target = uniform(&mut r, &[3, 32, 32], 0.0, 1.0);
        let guide = Guide::new(teacher, decoder, &target).unwrap();
        let z = uniform(&mut r, &[dim], lo, hi);
        let u = rng::normal_tensor(&mut r, &[dim]);
        let u = u.scale(1.0 / u.norm());
        let (_, grad) = guide.loss_and_grad(&z).unwrap();
        let analytic = grad.dot(&u);
        let loss_at = |s: f64| guide.loss_and_grad(&z.add(&u.scale(s)).unwrap()).unwrap().0;
        let numeric = (loss_at(H) - loss_at(-H)) / (2.0 * H);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// The two decoder modes: label, decoder, teacher, and latent sampling range.
pub fn guidance_cases() -> Vec<(&'static str, Decoder, EmbeddingNet, f64, f64)> {
    vec![
        (
            "identity",
            Decoder::Identity,
            EmbeddingNet::metric(&DEFAULT_WIDTHS, 5),
            -0.1,
            1.1,
        ),
        (
            "autoencoder",
            Decoder::Autoencoder(Box::new(TinyAutoencoder::new(7))),
            EmbeddingNet::metric(&DEFAULT_WIDTHS, 6),
            -1.0,
            1.0,
        ),
    ]
}
