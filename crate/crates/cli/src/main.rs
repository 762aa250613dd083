use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lowlight_core::datasets::list_images;
use lowlight_core::imaging::{load_image, save_image};
use lowlight_core::metrics::{self, MetricReport, MetricRow, NiqeModel, NIQE_BLOCK};
use lowlight_core::tad::{BackendSpec, PromptPair};
use lowlight_core::trainer::{read_checkpoint_info, Trainer, TrainingConfig};
use lowlight_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lowlight", version, about = "Train, run and evaluate the low-light enhancer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data>/low` and `<data>/high`.
    Train {
        /// TOML training configuration; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint saved with the same architecture.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance every image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected positional-encoding levels; must match the checkpoint.
        #[arg(long)]
        pe_levels: Option<usize>,
    },
    /// Enhance a directory and write per-image quality metrics as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        low: PathBuf,
        /// Reference images matched by file name, for PSNR and SSIM.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// NIQE pristine model as JSON; the bundled model is used otherwise.
        #[arg(long)]
        niqe_model: Option<PathBuf>,
        /// Backend for the semantic score, `stub:<seed>` or `pretrained:<dir>`.
        /// Defaults to the checkpoint's training backend.
        #[arg(long)]
        vl_backend: Option<BackendSpec>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out, resume } => train(config.as_deref(), &data, &out, resume.as_deref()),
        Command::Infer { ckpt, input, out, pe_levels } => infer(&ckpt, &input, &out, pe_levels),
        Command::Eval { ckpt, low, reference, report, niqe_model, vl_backend } => {
            eval(&ckpt, &low, reference.as_deref(), &report, niqe_model.as_deref(), vl_backend)
        }
    }
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    let corpus = cfg.open_corpus(data)?;
    eprintln!(
        "training on {} low / {} high images, {} epochs",
        corpus.low_paths().len(),
        corpus.high_paths().len(),
        cfg.epochs
    );
    let mut trainer = Trainer::new(cfg)?;
    if let Some(ckpt) = resume {
        trainer.restore_checkpoint(ckpt)?;
        eprintln!("resumed at epoch {}, step {}", trainer.epoch(), trainer.step());
    }
    trainer.fit(&corpus, out, |r| {
        if r.step % 50 == 0 {
            eprintln!("step {:>7}  total {:.4}  adv_d {:.4}", r.step, r.total, r.adv_d);
        }
    })
}

/// Loads a checkpoint for inference. Text guidance plays no part in
/// inference, so a stub backend stands in for whatever was trained with.
fn load_for_inference(ckpt: &Path, pe_levels: Option<usize>) -> Result<Trainer> {
    let info = read_checkpoint_info(ckpt)?;
    if let Some(l) = pe_levels {
        if l != info.config.pe_levels {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained with pe_levels {}, requested {l}",
                info.config.pe_levels
            )));
        }
    }
    let backend = BackendSpec::Stub(0).build(&candle_core::Device::Cpu)?;
    Trainer::load_checkpoint_with_backend(ckpt, backend)
}

fn output_name(path: &Path) -> PathBuf {
    PathBuf::from(path.file_stem().unwrap_or_default()).with_extension("png")
}

fn infer(ckpt: &Path, input: &Path, out: &Path, pe_levels: Option<usize>) -> Result<()> {
    let trainer = load_for_inference(ckpt, pe_levels)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    for path in list_images(input)? {
        let enhanced = trainer.infer(&load_image(&path)?)?;
        let target = out.join(output_name(&path));
        save_image(&enhanced, &target)?;
        eprintln!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

fn eval(
    ckpt: &Path,
    low: &Path,
    reference: Option<&Path>,
    report: &Path,
    niqe_model: Option<&Path>,
    vl_backend: Option<BackendSpec>,
) -> Result<()> {
    let trainer = load_for_inference(ckpt, None)?;
    let cfg = trainer.config().clone();
    let backend = vl_backend.unwrap_or(cfg.vl_backend.clone()).build(&candle_core::Device::Cpu)?;
    let prompts = PromptPair::new(backend.as_ref(), &cfg.prompt_low, &cfg.prompt_high)?;
    let owned_model;
    let niqe_model = match niqe_model {
        Some(p) => {
            owned_model = NiqeModel::from_file(p)?;
            &owned_model
        }
        None => NiqeModel::bundled(),
    };

    let mut rows = Vec::new();
    for path in list_images(low)? {
        let original = load_image(&path)?;
        let enhanced = trainer.infer(&original)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut row = MetricRow {
            name: name.clone(),
            loe: Some(metrics::loe(&enhanced, &original)?),
            semantic_score: Some(metrics::semantic_score(backend.as_ref(), &enhanced, &prompts)?),
            ..MetricRow::default()
        };
        if enhanced.height() >= NIQE_BLOCK && enhanced.width() >= NIQE_BLOCK {
            row.niqe = Some(metrics::niqe(&enhanced, niqe_model)?);
        }
        if let Some(dir) = reference {
            let ref_path = dir.join(&name);
            if ref_path.is_file() {
                let target = load_image(&ref_path)?;
                row.psnr = Some(metrics::psnr(&enhanced, &target)?);
                row.ssim = Some(metrics::ssim(&enhanced, &target)?);
            } else {
                eprintln!("no reference for {name}");
            }
        }
        rows.push(row);
    }
    let report_data = MetricReport { rows };
    report_data.write_csv(report)?;
    let mean = report_data.mean();
    eprintln!(
        "{} images  psnr {:?}  ssim {:?}  loe {:?}  niqe {:?}  semantic {:?}",
        report_data.rows.len(),
        mean.psnr,
        mean.ssim,
        mean.loe,
        mean.niqe,
        mean.semantic_score
    );
    Ok(())
}
