use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewshot_seg::attention::BranchMode;
use fewshot_seg::checks::{self, render_table, CheckRow};
use fewshot_seg::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredModel};
use fewshot_seg::io::config::{parse_config, Config};
use fewshot_seg::io::dataset::{read_dataset, write_dataset};
use fewshot_seg::io::report::{ablate_csv, ablate_table, eval_csv, loss_csv, write_bytes};
use fewshot_seg::io::tensor_file::{read_tensor, write_tensor};
use fewshot_seg::model::segment;
use fewshot_seg::phantom::gen_phantoms;
use fewshot_seg::training::eval::{run_ablation, train_folds, ModelSegmenter, ABLATION_BLOCKS};
use fewshot_seg::training::{evaluate, Setting};
use fewshot_seg::{Error, Result};

#[derive(Parser)]
#[command(name = "fewshot-seg", version, about = "Few-shot segmentation on synthetic phantoms")]
struct Cli {
    /// Flat `key = value` configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train cross-validation models and write a checkpoint plus loss curves.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cv: CvArgs,
    },
    /// Score a checkpoint and write the per-fold report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one query mask from an annotated support image.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stored model name, e.g. `fold0`; defaults to the first one.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        support: PathBuf,
        /// u8 mask or label map; nonzero is foreground unless `--class` is given.
        #[arg(long)]
        support_mask: PathBuf,
        #[arg(long)]
        class: Option<u8>,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tape implementations against loop-level oracles.
    OracleCheck {
        #[arg(long, default_value_t = checks::ORACLE_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep block counts and branch modes.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_BLOCKS)]
        blocks: Vec<usize>,
    },
}

#[derive(Args)]
struct CvArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: u8,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    log::info!("config fingerprint {}", cfg.fingerprint());
    Ok(cfg)
}

fn check_table(rows: &[CheckRow]) -> Result<()> {
    print!("{}", render_table(rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::Report(format!("{failed} of {} checks failed", rows.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let scans = gen_phantoms(&cfg.phantom)?;
            write_dataset(&out, &scans)?;
            log::info!("wrote {} scans to {}", scans.len(), out.display());
        }
        Command::Train { data, out, cv } => {
            let cfg = load_config(cli.config.as_deref())?;
            let setting = Setting::from_number(cv.setting).expect("clap restricts the range");
            let scans = read_dataset(&data)?;
            let trained = train_folds(
                &scans,
                setting,
                cv.folds,
                cfg.phantom.texture_noise,
                &cfg.model,
                &cfg.train,
                &cfg.episode,
                |m| {
                    let last = m.outcome.curve.last().map_or(f64::NAN, |p| p.loss);
                    log::info!("{} done, final loss {last:.5}, {} redraws", m.name(), m.outcome.redraws);
                },
            )?;
            let ckpt = Checkpoint {
                config: cfg,
                setting,
                folds: cv.folds,
                models: trained
                    .iter()
                    .map(|m| StoredModel {
                        fold: m.fold,
                        group: m.group,
                        params: m.outcome.params.clone(),
                    })
                    .collect(),
            };
            save_checkpoint(&out, &ckpt)?;
            for m in &trained {
                write_bytes(&out.join(format!("loss_{}.csv", m.name())), &loss_csv(&m.outcome.curve)?)?;
            }
            log::info!("checkpoint written to {}", out.display());
        }
        Command::Eval { data, checkpoint, out } => {
            if cli.config.is_some() {
                log::warn!("--config is ignored by eval; the checkpoint carries its configuration");
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let fp = ckpt.config.fingerprint();
            log::info!("config fingerprint {fp}");
            let scans = read_dataset(&data)?;
            let segmenter = ModelSegmenter {
                cfg: ckpt.config.model,
                models: ckpt.models.iter().map(|m| (m.fold, m.group, &m.params)).collect(),
            };
            let report = evaluate(&scans, ckpt.setting, ckpt.folds, &segmenter, &fp)?;
            write_bytes(&out, &eval_csv(&report)?)?;
            for (c, d) in &report.per_class {
                println!("{:<8} {d:>7.2}", fewshot_seg::phantom::class_name(*c));
            }
            println!("{:<8} {:>7.2}", "mean", report.mean);
        }
        Command::Segment {
            checkpoint,
            model,
            support,
            support_mask,
            class,
            query,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            log::info!("config fingerprint {}", ckpt.config.fingerprint());
            let stored = match &model {
                None => &ckpt.models[0],
                Some(name) => ckpt
                    .models
                    .iter()
                    .find(|m| &m.name() == name)
                    .ok_or_else(|| Error::Report(format!("checkpoint has no model `{name}`")))?,
            };
            let s = read_tensor::<f32>(&support)?;
            let q = read_tensor::<f32>(&query)?;
            let labels = read_tensor::<u8>(&support_mask)?;
            let mask = match class {
                Some(c) => labels.map(|v| u8::from(v == c)),
                None => labels.map(|v| u8::from(v != 0)),
            };
            let pred = segment(&stored.params, &ckpt.config.model, &s, &mask, &q)?;
            write_tensor(&out, &pred)?;
            log::info!("{} foreground pixels written to {}", pred.data().iter().filter(|&&v| v == 1).count(), out.display());
        }
        Command::Gradcheck { seed } => {
            load_config(cli.config.as_deref())?;
            check_table(&checks::gradcheck_suite(seed)?)?;
        }
        Command::OracleCheck { instances, seed } => {
            load_config(cli.config.as_deref())?;
            check_table(&checks::oracle_suite(instances, seed)?)?;
        }
        Command::Ablate {
            data,
            out,
            folds,
            blocks,
        } => {
            let cfg = load_config(cli.config.as_deref())?;
            let scans = read_dataset(&data)?;
            let modes = [BranchMode::TwoBranch, BranchMode::SingleBranch];
            let rows = run_ablation(
                &scans,
                folds,
                cfg.phantom.texture_noise,
                &cfg.model,
                &cfg.train,
                &cfg.episode,
                &blocks,
                &modes,
                |r| log::info!("n_blocks {} {}: mean {:.2}", r.n_blocks, r.mode, r.mean),
            )?;
            print!("{}", ablate_table(&rows));
            write_bytes(&out, &ablate_csv(&rows)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
