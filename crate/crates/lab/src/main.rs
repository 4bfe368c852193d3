use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerlab_core::generative::Paradigm;
use steerlab_core::steer::GuidanceSchedule;
use steerlab_lab::config::{SweepParam, TargetSpec};
use steerlab_lab::{init_pool, report, runs, train, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Shape-guided steering of toy diffusion and flow generators")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and its triplets.
    GenData {
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        /// Also write the validation triplets as a CSV of image paths.
        #[arg(long)]
        export_triplets: Option<PathBuf>,
    },
    /// Train the triplet shape teacher.
    TrainTeacher {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the texture-classifier baseline.
    TrainBaseline {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a generator.
    TrainGen {
        #[arg(long)]
        paradigm: Paradigm,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Guided runs with automatic alpha=0 controls.
    Steer {
        #[arg(long)]
        paradigm: Option<Paradigm>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Guide only the first k sampler steps.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Target image (PPM or STLB) instead of a conflict target.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Sweep alpha or the number of guided steps.
    Sweep {
        #[arg(long)]
        param: Option<SweepParam>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        paradigm: Option<Paradigm>,
    },
    /// Early-stop vs continuous guidance on both paradigms.
    Healing {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Aggregate run directories into a markdown report.
    Report {
        #[arg(required = false)]
        dirs: Vec<PathBuf>,
        /// Report directory; defaults to <out>/report.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = init_pool()?;
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData {
            n_images,
            val_fraction,
            export_triplets,
        } => {
            if let Some(n) = n_images {
                cfg.dataset.n_images = n;
            }
            if let Some(f) = val_fraction {
                cfg.dataset.val_fraction = f;
            }
            let cfg = cfg.resolve()?;
            print_json(&train::gen_data(&cfg, export_triplets.as_deref())?)
        }
        Command::TrainTeacher { epochs } => {
            if let Some(e) = epochs {
                cfg.teacher.epochs = e;
            }
            let out = train::cmd_train_teacher(&cfg.resolve()?)?;
            println!("teacher val accuracy {:.4}", out.eval.accuracy);
            print_json(&out)
        }
        Command::TrainBaseline { epochs } => {
            if let Some(e) = epochs {
                cfg.teacher.epochs = e;
            }
            let out = train::cmd_train_baseline(&cfg.resolve()?)?;
            println!("baseline val accuracy {:.4}", out.eval.accuracy);
            print_json(&out)
        }
        Command::TrainGen { paradigm, epochs } => {
            if let Some(e) = epochs {
                cfg.generator.epochs = e;
            }
            print_json(&train::cmd_train_gen(&cfg.resolve()?, paradigm)?)
        }
        Command::Steer {
            paradigm,
            alpha,
            stop_after,
            seeds,
            target,
        } => {
            if let Some(p) = paradigm {
                cfg.steer.paradigm = p;
            }
            if let Some(a) = alpha {
                cfg.guidance.alpha = a;
            }
            if let Some(k) = stop_after {
                cfg.guidance.schedule = GuidanceSchedule::StopAfter { k };
            }
            if let Some(s) = seeds {
                cfg.steer.seeds = s;
            }
            if let Some(path) = target {
                cfg.steer.target = TargetSpec::Image { path };
            }
            for r in runs::cmd_steer(&cfg.resolve()?)? {
                println!(
                    "{} run {} target {}: final hpe_distance {:.6}, control {:.6}, gain {:.1}%",
                    r.paradigm,
                    r.run,
                    r.target,
                    r.final_hpe_distance,
                    r.control_hpe_distance,
                    100.0 * r.relative_gain
                );
            }
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            seeds,
            paradigm,
        } => {
            let mut spec = cfg.sweep.clone();
            if let Some(p) = param {
                spec.parameter = p;
                if values.is_none() && p == SweepParam::GuidedSteps {
                    spec.values = vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
                }
            }
            if let Some(v) = values {
                spec.values = v;
            }
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(p) = paradigm {
                spec.paradigm = p;
            }
            eprintln!("sweep: {} runs on {threads} threads", spec.values.len() * spec.seeds);
            let report = runs::cmd_sweep(&cfg.resolve()?, &spec)?;
            for p in &report.points {
                println!("{} = {}: mean {:.4} ± {:.4} (n={})", spec.parameter, p.value, p.mean, p.std, p.n);
            }
            println!("wrote {} and {}", report.csv.display(), report.svg.display());
            Ok(())
        }
        Command::Healing { seeds } => {
            if let Some(s) = seeds {
                cfg.healing.seeds = s;
            }
            let report = runs::cmd_healing(&cfg.resolve()?)?;
            for s in &report.stats {
                println!("{} {}: mean {:.4} ± {:.4}", s.paradigm, s.protocol, s.mean, s.std);
            }
            for v in &report.verdicts {
                println!("{}", v.line);
            }
            Ok(())
        }
        Command::Report { dirs, to } => {
            let out = to.unwrap_or_else(|| cfg.out_dir.join("report"));
            let bundle = report::cmd_report(&dirs, &out)?;
            println!("wrote {}", bundle.markdown.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
