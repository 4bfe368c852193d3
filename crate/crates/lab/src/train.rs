//! Dataset generation and the training commands.

use std::path::{Path, PathBuf};

use serde::Serialize;
use steerlab_core::generative::{
    loss_csv, train_autoencoder, train_denoiser, train_velocity, Decoder, GenNet, NoiseSchedule, Paradigm,
    BETA_END, BETA_START,
};
use steerlab_core::shapeworld::{export_triplets, Dataset, Split};
use steerlab_core::teacher::{curve_csv, evaluate_dataset, train_teacher, train_texture_baseline, EvalReport};
use steerlab_core::Tensor;

use crate::config::{DecoderMode, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::{exec, write_json, write_text};

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
}

/// Write `run.json` into `dir`: the command, the config, and its hash.
pub fn write_provenance(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            command,
            config_hash: cfg.hash(),
            config: cfg,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct DataOutcome {
    pub config_hash: String,
    pub dir: PathBuf,
    pub images: usize,
    pub train_triplets: usize,
    pub val_triplets: usize,
    pub exported: Option<PathBuf>,
}

/// Build the dataset, save it under `data/`, and optionally export the
/// validation triplets as a CSV of image paths.
pub fn gen_data(cfg: &ExperimentConfig, export: Option<&Path>) -> Result<DataOutcome> {
    let ds = steerlab_core::shapeworld::build_dataset(&cfg.dataset, exec()).map_err(LabError::io)?;
    let dir = cfg.data_dir();
    ds.save(&dir, true).map_err(LabError::io)?;
    if let Some(csv) = export {
        let root = std::path::absolute(&dir)?;
        export_triplets(&ds.manifest, ds.manifest.triplets(Split::Val), &root, csv).map_err(LabError::io)?;
    }
    write_provenance(&dir, "gen-data", cfg)?;
    Ok(DataOutcome {
        config_hash: cfg.hash(),
        dir,
        images: ds.images.len(),
        train_triplets: ds.manifest.triplets(Split::Train).len(),
        val_triplets: ds.manifest.triplets(Split::Val).len(),
        exported: export.map(Path::to_path_buf),
    })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data_dir()).map_err(LabError::io)
}

#[derive(Debug, Clone, Serialize)]
pub struct TeacherOutcome {
    pub kind: String,
    pub config_hash: String,
    pub epochs: usize,
    pub final_val_acc: f64,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
    pub curve_csv: PathBuf,
}

fn finish_teacher(
    cfg: &ExperimentConfig,
    kind: &str,
    ds: &Dataset,
    trained: (steerlab_core::teacher::EmbeddingNet, Vec<steerlab_core::teacher::EpochRecord>),
    checkpoint: PathBuf,
) -> Result<TeacherOutcome> {
    let (net, curve) = trained;
    let dir = cfg.model_dir();
    let curve_path = dir.join(format!("{kind}_loss.csv"));
    write_text(&curve_path, &curve_csv(&curve))?;
    let eval = evaluate_dataset(&net, ds, Split::Val, exec()).map_err(LabError::io)?;
    net.save(&checkpoint).map_err(LabError::io)?;
    let out = TeacherOutcome {
        kind: kind.to_string(),
        config_hash: cfg.hash(),
        epochs: curve.len(),
        final_val_acc: curve.last().map_or(f64::NAN, |r| r.val_acc),
        eval,
        checkpoint,
        curve_csv: curve_path,
    };
    write_json(&dir.join(format!("{kind}_eval.json")), &out)?;
    Ok(out)
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<TeacherOutcome> {
    let ds = load_dataset(cfg)?;
    let trained = train_teacher(&ds, &cfg.teacher, exec()).map_err(LabError::training)?;
    finish_teacher(cfg, "teacher", &ds, trained, cfg.teacher_path())
}

pub fn cmd_train_baseline(cfg: &ExperimentConfig) -> Result<TeacherOutcome> {
    let ds = load_dataset(cfg)?;
    let trained = train_texture_baseline(&ds, &cfg.teacher, exec()).map_err(LabError::training)?;
    finish_teacher(cfg, "baseline", &ds, trained, cfg.baseline_path())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenOutcome {
    pub paradigm: Paradigm,
    pub decoder: DecoderMode,
    pub config_hash: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub curve_csv: PathBuf,
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.generator.steps, BETA_START, BETA_END).map_err(LabError::io)
}

/// The configured decoder. The autoencoder must already be trained.
pub fn load_decoder(cfg: &ExperimentConfig) -> Result<Decoder> {
    match cfg.decoder {
        DecoderMode::Identity => Ok(Decoder::Identity),
        DecoderMode::Autoencoder => Decoder::load_autoencoder(&cfg.autoencoder_path()).map_err(LabError::io),
    }
}

/// Training latents for the generators; trains and saves the autoencoder on
/// first use.
fn training_latents(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Tensor>> {
    let images: Vec<Tensor> = ds.manifest.train.iter().map(|&i| ds.images[i].clone()).collect();
    let decoder = match cfg.decoder {
        DecoderMode::Identity => Decoder::Identity,
        DecoderMode::Autoencoder => {
            let path = cfg.autoencoder_path();
            if path.exists() {
                load_decoder(cfg)?
            } else {
                let (dec, curve) = train_autoencoder(&images, &cfg.generator).map_err(LabError::training)?;
                write_text(&cfg.model_dir().join("autoencoder_loss.csv"), &loss_csv(&curve))?;
                dec.save(&path).map_err(LabError::io)?;
                dec
            }
        }
    };
    images
        .iter()
        .map(|img| {
            let z = decoder.encode(img).map_err(LabError::training)?;
            Ok(Tensor::from_vec(z.data().to_vec()))
        })
        .collect()
}

pub fn cmd_train_gen(cfg: &ExperimentConfig, paradigm: Paradigm) -> Result<GenOutcome> {
    let ds = load_dataset(cfg)?;
    let latents = training_latents(cfg, &ds)?;
    let (net, curve) = match paradigm {
        Paradigm::Ddim => train_denoiser(&latents, &schedule(cfg)?, &cfg.generator),
        Paradigm::Flow => train_velocity(&latents, &cfg.generator),
    }
    .map_err(LabError::training)?;
    let dir = cfg.model_dir();
    let curve_path = dir.join(format!("{paradigm}_loss.csv"));
    write_text(&curve_path, &loss_csv(&curve))?;
    let checkpoint = cfg.generator_path(paradigm);
    net.save(&checkpoint).map_err(LabError::io)?;
    let out = GenOutcome {
        paradigm,
        decoder: cfg.decoder,
        config_hash: cfg.hash(),
        epochs: curve.len(),
        final_loss: curve.last().map_or(f64::NAN, |r| r.loss),
        checkpoint,
        curve_csv: curve_path,
    };
    write_json(&dir.join(format!("{paradigm}_train.json")), &out)?;
    Ok(out)
}

/// Load a generator checkpoint and check it against the configured paradigm.
pub fn load_generator(cfg: &ExperimentConfig, paradigm: Paradigm) -> Result<GenNet> {
    let path = cfg.generator_path(paradigm);
    let net = GenNet::load(&path).map_err(LabError::io)?;
    if net.paradigm() != paradigm {
        return Err(LabError::Config(format!(
            "{} holds a {} generator, expected {paradigm}",
            path.display(),
            net.paradigm()
        )));
    }
    Ok(net)
}
