//! `asr`: batch drivers for dataset synthesis, training, evaluation and
//! figure rendering. Every command writes a manifest and the effective
//! config next to its outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use asr_core::checkpoint::load_checkpoint;
use asr_core::config::{Manifest, RunConfig};
use asr_core::constraints::{f1_pairwise_overlap, f_containment};
use asr_core::data::{histogram, read_dataset, synth_dataset, write_dataset, DatasetExample, DatasetSpec, GlyphBank};
use asr_core::error::{AsrError, Result};
use asr_core::metrics::evaluate;
use asr_core::model::AsrModel;
use asr_core::render::{generation_grid, reconstruct, reconstruction_grid, GridOptions, RgbImage};
use asr_core::training::{RunPaths, Trainer};

/// Stream offset separating evaluation and rendering draws from training.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Parser)]
#[command(name = "asr", version, about = "Structurally regularized multi-object scene models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train and test archives.
    Synth(Common),
    /// Train a model and log per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset archive; the configured test set is synthesized when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw a reconstruction or generation grid.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Reconstruct)]
        mode: Mode,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Reconstruct,
    Generate,
}

fn exit_code(e: &AsrError) -> u8 {
    match e {
        AsrError::Config(_) | AsrError::Infeasible { .. } => 2,
        AsrError::Numeric(_) | AsrError::Contract(_) => 3,
        AsrError::Io { .. } | AsrError::Corrupt { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, &c.set)?,
        None => RunConfig::from_toml("", &c.set)?,
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            Manifest::new("synth", &cfg).write(&c.out, &cfg)?;
            for (name, spec) in [("train", &cfg.data.train), ("test", &cfg.data.test)] {
                let data = synthesize(spec)?;
                audit(name, spec, &data)?;
                let path = c.out.join(format!("{name}.asrd"));
                write_dataset(&path, &data, spec.canvas_size, spec.seed)?;
                let h: Vec<String> = histogram(&data).iter().map(|(k, v)| format!("{k}:{v}")).collect();
                println!("{name}: {} images -> {} (counts {})", data.len(), path.display(), h.join(" "));
            }
            Ok(())
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let train = dataset(cfg.data.train_archive.as_deref(), &cfg.data.train, cfg.model.canvas_size)?;
            let test = dataset(cfg.data.test_archive.as_deref(), &cfg.data.test, cfg.model.canvas_size)?;
            Manifest::new("train", &cfg).write(&common.out, &cfg)?;
            let constraints = cfg.constraint_set()?;
            let mut trainer = match resume {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    if ck.model.config != cfg.effective_model() {
                        return Err(AsrError::Config(format!("checkpoint {} was trained with a different model config", p.display())));
                    }
                    Trainer::resume(ck, constraints, cfg.train.clone())?
                }
                None => Trainer::new(AsrModel::new(cfg.effective_model(), cfg.train.seed)?, constraints, cfg.train.clone())?,
            };
            let rows = trainer.train(&train, &test, Some(&RunPaths { dir: common.out.clone() }))?;
            if let Some(r) = rows.last() {
                println!("{}", asr_core::training::LOG_HEADER);
                println!("{}", r.csv());
            }
            Ok(())
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let test = dataset(data.as_deref(), &cfg.data.test, ck.model.config.canvas_size)?;
            Manifest::new("eval", &cfg).write(&common.out, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(EVAL_STREAM);
            let report = evaluate(&ck.model, &test, &cfg.eval, &mut rng)?;
            let csv = common.out.join("eval.csv");
            std::fs::write(&csv, report.to_csv()).map_err(|e| AsrError::io(&csv, e))?;
            let summary = report.summary(cfg.variant.name());
            let sp = common.out.join("summary.txt");
            std::fs::write(&sp, &summary).map_err(|e| AsrError::io(&sp, e))?;
            print!("{summary}");
            Ok(())
        }
        Command::Render { common, checkpoint, mode, n, data } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            Manifest::new("render", &cfg).write(&common.out, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(EVAL_STREAM + 1);
            let opts = GridOptions::default();
            let (img, name) = match mode {
                Mode::Generate => (generation_grid(&ck.model, n, &mut rng, &opts), "generate.png"),
                Mode::Reconstruct => {
                    let set = dataset(data.as_deref(), &cfg.data.test, ck.model.config.canvas_size)?;
                    let n = if n > set.len() {
                        eprintln!("warning: {n} images requested, dataset has {}; rendering all", set.len());
                        set.len()
                    } else {
                        n
                    };
                    let originals: Vec<_> = set[..n].iter().map(|e| e.image.clone()).collect();
                    let refs: Vec<_> = originals.iter().collect();
                    let recons = reconstruct(&ck.model, &refs, &mut rng)?;
                    (reconstruction_grid(&originals, &recons, &opts), "reconstruct.png")
                }
            };
            let path = common.out.join(name);
            write_png(&path, &img)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn synthesize(spec: &DatasetSpec) -> Result<Vec<DatasetExample>> {
    let bank = GlyphBank::load(&spec.source, spec.glyph_size)?;
    synth_dataset(spec, &bank)
}

/// Read an archive, or synthesize from the dataset settings when no archive is given.
fn dataset(archive: Option<&Path>, spec: &DatasetSpec, canvas_size: usize) -> Result<Vec<DatasetExample>> {
    let data = match archive {
        Some(p) => {
            let (header, data) = read_dataset(p)?;
            if header.canvas_size != canvas_size {
                return Err(AsrError::Config(format!(
                    "{} holds {}px canvases, the model expects {canvas_size}px",
                    p.display(),
                    header.canvas_size
                )));
            }
            data
        }
        None => synthesize(spec)?,
    };
    if data.is_empty() {
        return Err(AsrError::Config("dataset is empty".into()));
    }
    Ok(data)
}

/// Non-overlap datasets must have zero overlap and containment everywhere,
/// and every dataset must match its requested histogram.
fn audit(name: &str, spec: &DatasetSpec, data: &[DatasetExample]) -> Result<()> {
    if histogram(data) != spec.histogram() {
        return Err(AsrError::Contract(format!("{name}: count histogram differs from the requested counts")));
    }
    if spec.non_overlap {
        for (i, e) in data.iter().enumerate() {
            let (l, r, t, b) = f_containment(&e.boxes, spec.canvas_size as f64);
            let f1 = f1_pairwise_overlap(&e.boxes);
            if f1 != 0.0 || l + r + t + b != 0.0 {
                return Err(AsrError::Contract(format!("{name}: example {i} fails the layout audit (overlap {f1})")));
            }
        }
        println!("{name}: layout audit passed");
    }
    Ok(())
}

fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| AsrError::Contract("image buffer has the wrong length".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| AsrError::io(path, std::io::Error::other(e.to_string())))
}
