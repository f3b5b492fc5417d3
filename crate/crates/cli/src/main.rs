//! caption-forge command line: data generation, stage-by-stage training,
//! single-image captioning, the HTTP service, and the latency benchmark.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use caption_forge_core::confidence::ConfidenceTrainConfig;
use caption_forge_core::dmsm::DmsmTrainConfig;
use caption_forge_core::entity::default_gallery;
use caption_forge_core::lm::LmConfig;
use caption_forge_core::pipeline::{
    coco_vocabulary, extract_vision_features, train_confidence_model, train_detector,
    train_language_model, train_ranker, web_vocabulary, Pipeline, PipelineConfig,
};
use caption_forge_core::png_io::read_png;
use caption_forge_core::synth;
use caption_forge_core::vision::{NetConfig, TrainConfig, VisionNet};
use caption_forge_core::{bench, service, F};

const CONFIG_ENV: &str = "CAPTION_FORGE_CONFIG";
const DEFAULT_CONFIG_PATH: &str = "caption-forge.json";

#[derive(Parser)]
#[command(name = "caption-forge", version, about = "Desk-scale image captioning pipeline")]
struct Cli {
    /// Pipeline config file (JSON). Falls back to $CAPTION_FORGE_CONFIG,
    /// then ./caption-forge.json, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data generation and training.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (images, index file, glyph gallery).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Probability that an example carries an entity glyph.
        #[arg(long, default_value_t = 0.25)]
        glyph_prob: f64,
    },
    /// Train both concept detectors and write their checkpoints.
    TrainVision {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the caption language model.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the multimodal semantic ranker (needs the vision checkpoint).
    TrainDmsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the confidence model (needs vision, lm, and dmsm checkpoints).
    TrainConfidence {
        #[arg(long)]
        data: PathBuf,
        /// Corpus examples to turn into positive/negative pairs.
        #[arg(long, default_value_t = 600)]
        max_examples: usize,
    },
    /// Caption one PNG image; prints a single-line JSON result.
    Caption { image: PathBuf },
    /// Serve POST /v1/caption and GET /v1/health.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Measure per-stage and end-to-end latency percentiles.
    Bench {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Emit the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let config = resolve_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { n, out, glyph_prob } => {
            let corpus = synth::generate_corpus::<F>(seed, n, glyph_prob)?;
            synth::save_corpus(&out, &corpus)?;
            default_gallery::<F>().save(&out.join("gallery.json"))?;
            println!(
                "wrote {n} examples to {} (index.txt, gallery.json)",
                out.display()
            );
        }
        Command::TrainVision { data, epochs } => {
            let corpus = synth::load_corpus::<F>(&data)?;
            let mut train_config = TrainConfig::desk_default();
            train_config.seed = seed.wrapping_add(2);
            if let Some(epochs) = epochs {
                train_config.epochs = epochs;
            }
            let (net_a, report_a) = train_detector(
                &corpus,
                &NetConfig::desk_default(),
                coco_vocabulary(),
                &train_config,
                seed,
            )?;
            save_with_parents(&config.vision_a, |p| net_a.save(p))?;
            println!(
                "vision_a: loss {:.4} -> {:.4}, saved {}",
                report_a.epoch_losses.first().unwrap_or(&0.0),
                report_a.epoch_losses.last().unwrap_or(&0.0),
                config.vision_a.display()
            );
            let (net_b, report_b) = train_detector(
                &corpus,
                &NetConfig::desk_default(),
                web_vocabulary(),
                &train_config,
                seed.wrapping_add(1),
            )?;
            save_with_parents(&config.vision_b, |p| net_b.save(p))?;
            println!(
                "vision_b: loss {:.4} -> {:.4}, saved {}",
                report_b.epoch_losses.first().unwrap_or(&0.0),
                report_b.epoch_losses.last().unwrap_or(&0.0),
                config.vision_b.display()
            );
            ensure_gallery(&config)?;
        }
        Command::TrainLm { data, epochs } => {
            let corpus = synth::load_corpus::<F>(&data)?;
            let mut lm_config = LmConfig::desk_default();
            if let Some(epochs) = epochs {
                lm_config.epochs = epochs;
            }
            let (lm, report) = train_language_model(&corpus, &lm_config)?;
            save_with_parents(&config.lm, |p| lm.save(p))?;
            println!(
                "lm: log-likelihood {:.4} -> {:.4}, saved {}",
                report.log_likelihood.first().unwrap_or(&0.0),
                report.log_likelihood.last().unwrap_or(&0.0),
                config.lm.display()
            );
            ensure_gallery(&config)?;
        }
        Command::TrainDmsm { data, epochs } => {
            let corpus = synth::load_corpus::<F>(&data)?;
            let vision = VisionNet::<F>::load(&config.vision_a)?;
            let features = extract_vision_features(&vision, &corpus)?;
            let mut dmsm_config = DmsmTrainConfig::desk_default();
            dmsm_config.dim = config.embedding_dim;
            dmsm_config.seed = seed.wrapping_add(3);
            if let Some(epochs) = epochs {
                dmsm_config.epochs = epochs;
            }
            let (model, report) = train_ranker(&features, &corpus, &dmsm_config)?;
            save_with_parents(&config.dmsm, |p| model.save(p))?;
            println!(
                "dmsm: loss {:.4} -> {:.4}, saved {}",
                report.epoch_losses.first().unwrap_or(&0.0),
                report.epoch_losses.last().unwrap_or(&0.0),
                config.dmsm.display()
            );
            ensure_gallery(&config)?;
        }
        Command::TrainConfidence { data, max_examples } => {
            let corpus = synth::load_corpus::<F>(&data)?;
            let vision = VisionNet::<F>::load(&config.vision_a)?;
            let lm = caption_forge_core::lm::LanguageModel::<F>::load(&config.lm)?;
            let dmsm = caption_forge_core::dmsm::DmsmModel::<F>::load(&config.dmsm)?;
            let features = extract_vision_features(&vision, &corpus)?;
            let (model, report) = train_confidence_model(
                &features,
                &corpus,
                &lm,
                &dmsm,
                &ConfidenceTrainConfig::desk_default(),
                max_examples,
                seed.wrapping_add(4),
            )?;
            save_with_parents(&config.confidence, |p| model.save(p))?;
            println!(
                "confidence: loss {:.4} after {} iterations, saved {}",
                report.final_loss,
                report.iterations,
                config.confidence.display()
            );
            ensure_gallery(&config)?;
        }
        Command::Caption { image } => {
            let pipeline = Pipeline::load(config)?;
            let tensor = read_png::<F>(&image)?;
            let result = pipeline.caption_image(&tensor)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::Serve { addr } => {
            let pipeline = Arc::new(Pipeline::load(config)?);
            let handle = service::serve(pipeline, addr.as_str())?;
            println!("serving on http://{}/v1/caption", handle.addr());
            loop {
                std::thread::park();
            }
        }
        Command::Bench { n, warmup, json } => {
            let pipeline = Pipeline::load(config)?;
            let report = bench::bench(&pipeline, n, warmup, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render_table());
            }
        }
    }
    Ok(())
}

fn resolve_config(flag: Option<&Path>) -> Result<PipelineConfig, Box<dyn std::error::Error>> {
    if let Some(path) = flag {
        return Ok(PipelineConfig::load(path)?);
    }
    if let Ok(path) = std::env::var(CONFIG_ENV) {
        return Ok(PipelineConfig::load(Path::new(&path))?);
    }
    let default_path = Path::new(DEFAULT_CONFIG_PATH);
    if default_path.exists() {
        return Ok(PipelineConfig::load(default_path)?);
    }
    Ok(PipelineConfig::default())
}

fn save_with_parents<E: std::error::Error + Send + Sync + 'static>(
    path: &Path,
    save: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), Box<dyn std::error::Error>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save(path)?;
    Ok(())
}

/// Write the default glyph gallery to the configured path if missing.
fn ensure_gallery(config: &PipelineConfig) -> Result<(), Box<dyn std::error::Error>> {
    if !config.gallery.exists() {
        save_with_parents(&config.gallery, |p| default_gallery::<F>().save(p))?;
    }
    Ok(())
}
