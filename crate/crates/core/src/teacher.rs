//! The shape teacher: an MLP embedding trained with a triplet margin loss,
//! odd-one-out evaluation, the squared embedding distance used for guidance,
//! and a texture-classifier baseline evaluated the same way.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io;
use crate::nn::{Activation, Mlp};
use crate::optim::{AdamConfig, Bound, ParamSet};
use crate::rng::{self, Rng};
use crate::shapeworld::{hflip, Dataset, ShapeTag, Split, Triplet, PIXELS};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
pub const DEFAULT_WIDTHS: [usize; 4] = [PIXELS, 256, 128, EMBED_DIM];

/// Margin of the triplet loss.
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EmbeddingKind {
    /// The network output is the embedding.
    Metric,
    /// The network ends in a `classes`-way linear head; the embedding is the
    /// activation feeding that head.
    Classifier { classes: usize },
}

/// Fixed map applied to pixels before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    /// `u = 2x - 1`, so the gray background sits at zero.
    Centered,
    /// `sqrt(u² + ε²) - ε` with `u = 2x - 1`: a smoothed distance from
    /// the background. Fills are drawn in a color and its complement about
    /// gray, so the raw sign of `u` carries texture, not shape.
    #[default]
    Magnitude,
}

pub const FRONTEND_EPS: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Architecture {
    pub mlp: Mlp,
    pub kind: EmbeddingKind,
    #[serde(default)]
    pub frontend: Frontend,
}

/// Image → unit-norm embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl EmbeddingNet {
    pub fn metric(widths: &[usize], seed: u64) -> Self {
        let mlp = Mlp::new("embed", widths, Activation::Tanh);
        Self::init(mlp, EmbeddingKind::Metric, seed)
    }

    /// Embedding widths followed by a linear head over `classes` labels.
    pub fn classifier(widths: &[usize], classes: usize, seed: u64) -> Self {
        let mut w = widths.to_vec();
        w.push(classes);
        let mlp = Mlp::new("embed", &w, Activation::Tanh);
        Self::init(mlp, EmbeddingKind::Classifier { classes }, seed)
    }

    fn init(mlp: Mlp, kind: EmbeddingKind, seed: u64) -> Self {
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut rng::rng(seed));
        Self {
            arch: Architecture {
                mlp,
                kind,
                frontend: Frontend::default(),
            },
            params,
        }
    }

    pub fn embed_dim(&self) -> usize {
        let w = &self.arch.mlp.widths;
        match self.arch.kind {
            EmbeddingKind::Metric => w[w.len() - 1],
            EmbeddingKind::Classifier { .. } => w[w.len() - 2],
        }
    }

    /// Unnormalized network output and the unit-norm embedding of a
    /// `[batch, PIXELS]` input.
    fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let u = x.scale(2.0)?.add(tape.constant(Tensor::scalar(-1.0)))?;
        let x = match self.arch.frontend {
            Frontend::Centered => u,
            Frontend::Magnitude => {
                let eps = FRONTEND_EPS;
                u.square()?
                    .add(tape.constant(Tensor::scalar(eps * eps)))?
                    .sqrt()?
                    .add(tape.constant(Tensor::scalar(-eps)))?
            }
        };
        let (pen, out) = self.arch.mlp.forward_split(bound, x)?;
        let emb = match self.arch.kind {
            EmbeddingKind::Metric => out,
            EmbeddingKind::Classifier { .. } => pen,
        };
        Ok((out, emb.normalize_rows()?))
    }

    /// Embed a batch of flattened images on `tape`; rows are unit norm.
    pub fn embed_var<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(bound, x).map(|(_, e)| e)
    }

    /// Embed one image of any shape with `PIXELS` elements.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let out = self.embed_batch(&[image])?;
        Ok(Tensor::from_vec(out.into_data()))
    }

    /// Embed several images at once; returns `[n, embed_dim]`.
    pub fn embed_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(flatten_batch(images)?);
        Ok(self.embed_var(&bound, x)?.value())
    }

    /// Embeddings for every image, computed in chunks.
    pub fn embed_all(&self, images: &[Tensor], exec: Exec) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[Tensor]> = images.chunks(CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            self.embed_batch(&refs)
        });
        let mut out = Vec::with_capacity(images.len());
        for part in parts {
            let part = part?;
            let d = part.shape()[1];
            out.extend(part.data().chunks_exact(d).map(|r| Tensor::from_vec(r.to_vec())));
        }
        Ok(out)
    }

    /// Writes the parameter checkpoint at `path` and the architecture as JSON
    /// next to it (`path` with extension `json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(
            &path.with_extension("json"),
            &serde_json::to_vec_pretty(&self.arch)?,
        )?;
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch_path = path.with_extension("json");
        for p in [path, arch_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let arch: Architecture = serde_json::from_slice(&std::fs::read(&arch_path)?)?;
        let params = ParamSet::load(path)?;
        Ok(Self { arch, params })
    }
}

pub(crate) fn flatten_batch(images: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * PIXELS);
    for img in images {
        if img.numel() != PIXELS {
            return Err(Error::shape("embed", img.shape(), &[PIXELS]));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), PIXELS], data)
}

/// `max(0, d_ap - d_an + margin)` for precomputed distances.
pub fn triplet_margin(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Row-wise Euclidean distance between two `[batch, d]` embeddings.
pub fn euclidean<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.sub(b)?.square()?.sum_rows()?.sqrt()
}

/// Mean triplet margin loss over a batch of `(anchor, positive, negative)`
/// embeddings, each `[batch, d]`.
pub fn triplet_loss<'t>(a: Var<'t>, p: Var<'t>, n: Var<'t>, margin: f64) -> Result<Var<'t>> {
    let tape = a.tape();
    let gamma = tape.constant(Tensor::scalar(margin));
    euclidean(a, p)?
        .sub(euclidean(a, n)?)?
        .add(gamma)?
        .relu()?
        .mean()
}

/// Squared Euclidean distance between the embeddings of two images.
pub fn hpe_distance(net: &EmbeddingNet, a: &Tensor, b: &Tensor) -> Result<f64> {
    let e = net.embed_batch(&[a, b])?;
    let d = e.shape()[1];
    Ok(e.data()[..d]
        .iter()
        .zip(&e.data()[d..])
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// The negative is the odd one out iff the anchor–positive pair is strictly
/// the closest of the three pairs.
pub fn negative_is_odd(d_ap: f64, d_an: f64, d_pn: f64) -> bool {
    d_an > d_ap && d_pn > d_ap
}

fn dist(a: &Tensor, b: &Tensor) -> f64 {
    a.squared_distance(b).sqrt()
}

/// Fraction of triplets whose negative is judged the odd one out.
pub fn odd_one_out_accuracy(
    net: &EmbeddingNet,
    images: &[Tensor],
    triplets: &[Triplet],
    exec: Exec,
) -> Result<f64> {
    Ok(evaluate(net, images, triplets, exec)?.accuracy)
}

/// Odd-one-out accuracy from precomputed embeddings.
pub fn accuracy_from_embeddings(emb: &[Tensor], triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::EmptyTripletSet);
    }
    let hits = triplets
        .iter()
        .filter(|t| {
            let (a, p, n) = (&emb[t.anchor], &emb[t.positive], &emb[t.negative]);
            negative_is_odd(dist(a, p), dist(a, n), dist(p, n))
        })
        .count();
    Ok(hits as f64 / triplets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub triplets: usize,
    pub accuracy: f64,
    pub mean_d_ap: f64,
    pub mean_d_an: f64,
    /// Accuracy keyed by `"<anchor shape>/<negative shape>"`; only filled
    /// when shape labels are supplied.
    pub per_shape_pair: BTreeMap<String, f64>,
}

/// Evaluate `triplets` over `images`, embedding only the referenced images.
pub fn evaluate(
    net: &EmbeddingNet,
    images: &[Tensor],
    triplets: &[Triplet],
    exec: Exec,
) -> Result<EvalReport> {
    evaluate_labeled(net, images, triplets, None, exec)
}

pub fn evaluate_labeled(
    net: &EmbeddingNet,
    images: &[Tensor],
    triplets: &[Triplet],
    shapes: Option<&dyn Fn(usize) -> ShapeTag>,
    exec: Exec,
) -> Result<EvalReport> {
    if triplets.is_empty() {
        return Err(Error::EmptyTripletSet);
    }
    let mut used: Vec<usize> = triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    used.sort_unstable();
    used.dedup();
    let subset: Vec<Tensor> = used.iter().map(|&i| images[i].clone()).collect();
    let emb = net.embed_all(&subset, exec)?;
    let slot: BTreeMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let e = |i: usize| &emb[slot[&i]];

    let mut hits = 0usize;
    let (mut sum_ap, mut sum_an) = (0.0, 0.0);
    let mut pairs: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in triplets {
        let (d_ap, d_an, d_pn) = (
            dist(e(t.anchor), e(t.positive)),
            dist(e(t.anchor), e(t.negative)),
            dist(e(t.positive), e(t.negative)),
        );
        let ok = negative_is_odd(d_ap, d_an, d_pn);
        hits += ok as usize;
        sum_ap += d_ap;
        sum_an += d_an;
        if let Some(shape_of) = shapes {
            let key = format!("{}/{}", shape_of(t.anchor), shape_of(t.negative));
            let entry = pairs.entry(key).or_default();
            entry.0 += ok as usize;
            entry.1 += 1;
        }
    }
    let n = triplets.len() as f64;
    Ok(EvalReport {
        triplets: triplets.len(),
        accuracy: hits as f64 / n,
        mean_d_ap: sum_ap / n,
        mean_d_an: sum_an / n,
        per_shape_pair: pairs
            .into_iter()
            .map(|(k, (h, c))| (k, h as f64 / c as f64))
            .collect(),
    })
}

/// Evaluate against a dataset's own triplets, with per-shape-pair accuracy.
pub fn evaluate_dataset(
    net: &EmbeddingNet,
    dataset: &Dataset,
    split: Split,
    exec: Exec,
) -> Result<EvalReport> {
    let m = &dataset.manifest;
    let shape_of = |id: usize| m.shape_of(id);
    evaluate_labeled(net, &dataset.images, m.triplets(split), Some(&shape_of), exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub triplets_per_epoch: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
    /// Mirror each training image left-right with probability 1/2. Every
    /// shape tag is symmetric about the vertical axis, so labels survive.
    #[serde(default)]
    pub hflip: bool,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            triplets_per_epoch: 1024,
            seed: 1,
            widths: DEFAULT_WIDTHS.to_vec(),
            hflip: true,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::ConfigInvalid(format!("margin {} must be positive", self.margin)));
        }
        if self.batch_size == 0 || self.widths.len() < 2 || self.widths[0] != PIXELS {
            return Err(Error::ConfigInvalid(
                "batch_size must be positive and widths must start at the pixel count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

fn triplet_refs<'a>(images: &'a [Tensor], batch: &[Triplet]) -> Vec<&'a Tensor> {
    batch
        .iter()
        .map(|t| &images[t.anchor])
        .chain(batch.iter().map(|t| &images[t.positive]))
        .chain(batch.iter().map(|t| &images[t.negative]))
        .collect()
}

/// Loss over `refs` laid out as all anchors, then positives, then negatives.
fn triplet_loss_on<'t>(
    net: &EmbeddingNet,
    tape: &'t Tape,
    bound: &Bound<'t>,
    refs: &[&Tensor],
    margin: f64,
) -> Result<Var<'t>> {
    let b = refs.len() / 3;
    let x = tape.constant(flatten_batch(refs)?);
    let e = net.embed_var(bound, x)?;
    triplet_loss(e.slice(0, 0, b)?, e.slice(0, b, 2 * b)?, e.slice(0, 2 * b, 3 * b)?, margin)
}

fn maybe_flip(images: Vec<&Tensor>, enabled: bool, r: &mut Rng) -> Vec<Tensor> {
    images
        .into_iter()
        .map(|img| {
            if enabled && r.gen_bool(0.5) {
                hflip(img)
            } else {
                img.clone()
            }
        })
        .collect()
}

/// Mean triplet loss over `triplets`, without gradients.
pub fn mean_triplet_loss(
    net: &EmbeddingNet,
    images: &[Tensor],
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::EmptyTripletSet);
    }
    let mut total = 0.0;
    for chunk in triplets.chunks(128) {
        let tape = Tape::new();
        let bound = net.params.bind(&tape, false);
        let loss = triplet_loss_on(net, &tape, &bound, &triplet_refs(images, chunk), margin)?;
        total += loss.item() * chunk.len() as f64;
    }
    Ok(total / triplets.len() as f64)
}

/// Train the shape teacher on triplets sampled afresh each epoch from the
/// training split. Validation uses the manifest's fixed validation triplets.
pub fn train_teacher(
    dataset: &Dataset,
    config: &TeacherTrainConfig,
    exec: Exec,
) -> Result<(EmbeddingNet, Vec<EpochRecord>)> {
    config.validate()?;
    let sampler = dataset.sampler(Split::Train)?;
    let val = dataset.manifest.triplets(Split::Val);
    if val.is_empty() {
        return Err(Error::InsufficientVariety("no validation triplets".into()));
    }
    let mut net = EmbeddingNet::metric(&config.widths, rng::derive_str(config.seed, "teacher-init"));
    let opt = adam(config.lr);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::rng(rng::derive(rng::derive_str(config.seed, "teacher-epoch"), epoch as u64));
        let triplets: Vec<Triplet> = (0..config.triplets_per_epoch)
            .map(|_| sampler.sample(&mut r))
            .collect();
        let mut sum = 0.0;
        for batch in triplets.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = net.params.bind(&tape, true);
            let imgs = maybe_flip(triplet_refs(&dataset.images, batch), config.hflip, &mut r);
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let loss = triplet_loss_on(&net, &tape, &bound, &refs, config.margin)?;
            sum += loss.item() * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect(&mut grads);
            net.params.adam_step(&grads, &opt)?;
        }
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: sum / triplets.len().max(1) as f64,
            val_loss: mean_triplet_loss(&net, &dataset.images, val, config.margin)?,
            val_acc: odd_one_out_accuracy(&net, &dataset.images, val, exec)?,
        });
    }
    Ok((net, curve))
}

/// Train a texture classifier with the teacher's trunk plus a linear head.
/// Its penultimate activations serve as the baseline embedding. The
/// reported validation accuracy is odd-one-out accuracy on the same shape
/// triplets the teacher is scored on.
pub fn train_texture_baseline(
    dataset: &Dataset,
    config: &TeacherTrainConfig,
    exec: Exec,
) -> Result<(EmbeddingNet, Vec<EpochRecord>)> {
    config.validate()?;
    let m = &dataset.manifest;
    dataset.sampler(Split::Train)?;
    let val_triplets = m.triplets(Split::Val);
    if val_triplets.is_empty() || m.val.is_empty() {
        return Err(Error::InsufficientVariety("no validation split".into()));
    }
    let classes = &m.config.textures;
    let label = |id: usize| {
        classes
            .iter()
            .position(|&t| t == m.texture_of(id))
            .expect("texture belongs to the dataset config")
    };
    let mut net = EmbeddingNet::classifier(
        &config.widths,
        classes.len(),
        rng::derive_str(config.seed, "baseline-init"),
    );
    let opt = adam(config.lr);
    let ce = |net: &EmbeddingNet,
              ids: &[usize],
              r: Option<&mut Rng>|
     -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
        let grad = r.is_some();
        let tape = Tape::new();
        let bound = net.params.bind(&tape, grad);
        let refs: Vec<&Tensor> = ids.iter().map(|&i| &dataset.images[i]).collect();
        let x = match r {
            Some(r) => {
                let imgs = maybe_flip(refs, config.hflip, r);
                tape.constant(flatten_batch(&imgs.iter().collect::<Vec<_>>())?)
            }
            None => tape.constant(flatten_batch(&refs)?),
        };
        let (logits, _) = net.forward(&bound, x)?;
        let labels: Vec<usize> = ids.iter().map(|&i| label(i)).collect();
        let loss = logits.cross_entropy(&labels)?;
        let value = loss.item();
        if !grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, Some(bound.collect(&mut grads))))
    };
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order = m.train.clone();
    for epoch in 0..config.epochs {
        let mut r = rng::rng(rng::derive(rng::derive_str(config.seed, "baseline-epoch"), epoch as u64));
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = ce(&net, batch, Some(&mut r))?;
            sum += loss * batch.len() as f64;
            net.params.adam_step(&grads.expect("requested"), &opt)?;
        }
        let mut val_loss = 0.0;
        for chunk in m.val.chunks(128) {
            val_loss += ce(&net, chunk, None)?.0 * chunk.len() as f64;
        }
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: sum / order.len() as f64,
            val_loss: val_loss / m.val.len() as f64,
            val_acc: odd_one_out_accuracy(&net, &dataset.images, val_triplets, exec)?,
        });
    }
    Ok((net, curve))
}

/// Loss curve as CSV with header `epoch,train_loss,val_loss,val_acc`.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in curve {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_acc));
    }
    s
}
