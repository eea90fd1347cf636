//! Command-line surface: corpus generation, training, evaluation, single-image
//! prediction and the gradient check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions, DEFAULT_TOLERANCE};
use crate::image::RgbImage;
use crate::model::{Example, Model};
use crate::synthdata::{
    generate_corpus, infer_noun_span, load_corpus, mask_key_object, save_corpus, GenConfig, Sample,
    Vocabulary, CLS_ID, PAD_ID,
};
use crate::train::{evaluate, TrainOptions, Trainer, CHECKPOINT_DIR};

/// Overlay tint and opacity for `predict`.
const OVERLAY_RGB: [u8; 3] = [255, 0, 64];
const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(
    name = "refseg",
    version,
    about = "Referring image segmentation on a synthetic shapes corpus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    GenData(GenDataArgs),
    /// Train a model on a corpus, writing checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Segment one image for one expression.
    Predict(PredictArgs),
    /// Finite-difference check of the analytic gradients on the micro config.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat JSON model config; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint` instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Keep a checkpoint directory for every epoch.
    #[arg(long)]
    pub keep_all_checkpoints: bool,
    /// Log every optimizer step as well as every epoch.
    #[arg(long)]
    pub log_steps: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PPM image with the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub expression: String,
    #[arg(long, default_value = "mask.pgm")]
    pub mask_out: PathBuf,
    #[arg(long, default_value = "overlay.ppm")]
    pub overlay_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Print the JSON report instead of the text summary.
    #[arg(long)]
    pub json: bool,
    /// Fault injection: add OFFSET to the analytic gradient of NAME.
    #[arg(long, num_args = 2, value_names = ["NAME", "OFFSET"])]
    pub corrupt: Option<Vec<String>>,
}

/// Run one command, writing human-readable output to `out`. Returns whether
/// the command succeeded; only a failed gradient check returns `false`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out).map(|()| true),
        Command::Train(a) => train(&a, out).map(|()| true),
        Command::Eval(a) => eval(&a, out).map(|()| true),
        Command::Predict(a) => predict(&a, out).map(|()| true),
        Command::Gradcheck(a) => run_gradcheck(&a, out),
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be positive".into()));
    }
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out)?;
    }
    let corpus = generate_corpus(&GenConfig {
        image_size: a.size,
        count: a.n,
        seed: a.seed,
        ..GenConfig::default()
    })?;
    save_corpus(&a.out, &corpus)?;
    writeln!(out, "wrote {} samples to {}", corpus.len(), a.out.display())?;
    Ok(())
}

fn check_corpus(corpus: &[Sample], config: &ModelConfig, dir: &Path) -> Result<()> {
    for s in corpus {
        if s.size() != (config.image_size, config.image_size) {
            return Err(Error::Config(format!(
                "{}: sample {} is {}x{} but the model expects {}x{}",
                dir.display(),
                s.id,
                s.image.width,
                s.image.height,
                config.image_size,
                config.image_size
            )));
        }
        if s.tokens.len() != config.max_tokens {
            return Err(Error::Config(format!(
                "{}: sample {} has {} tokens but the model expects {}",
                dir.display(),
                s.id,
                s.tokens.len(),
                config.max_tokens
            )));
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let mut trainer = if a.resume {
        Trainer::resume(&a.out.join(CHECKPOINT_DIR))?
    } else {
        let config = match &a.config {
            Some(path) => ModelConfig::load(path)?,
            None => ModelConfig::default(),
        };
        Trainer::new(Model::new(config)?)
    };
    check_corpus(&corpus, &trainer.model.config, &a.data)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        stop_after: a.stop_after,
        keep_all_checkpoints: a.keep_all_checkpoints,
        log_steps: a.log_steps,
    };
    let history = trainer.train(&corpus, &opts)?;
    for s in &history {
        writeln!(
            out,
            "epoch {:>4}  L_fg {:.5}  L_bg {:.5}  L_re {:.5}  L_total {:.5}  train mIoU {:.4}",
            s.epoch + 1,
            s.l_fg,
            s.l_bg,
            s.l_re,
            s.l_total,
            s.train_miou
        )?;
    }
    writeln!(
        out,
        "{} epochs complete; checkpoint in {}",
        trainer.progress.epoch,
        a.out.join(CHECKPOINT_DIR).display()
    )?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _, _) = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data)?;
    check_corpus(&corpus, &model.config, &a.data)?;
    let (report, _) = evaluate(&model, &corpus)?;
    let json = report.to_json() + "\n";
    if let Some(path) = &a.report {
        fs::write(path, &json)?;
    }
    if a.json {
        out.write_all(json.as_bytes())?;
    } else {
        out.write_all(report.to_table().as_bytes())?;
    }
    Ok(())
}

/// Token ids and masked token ids for free text, using the key-object span
/// inferred from the words.
pub fn encode_expression(text: &str, max_tokens: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    let vocab = Vocabulary::default();
    let tokens = vocab.tokenize(text, max_tokens);
    if tokens.iter().all(|&t| t == PAD_ID || t == CLS_ID) {
        return Err(Error::Usage(format!(
            "expression {text:?} contains no words"
        )));
    }
    let masked = mask_key_object(&tokens, infer_noun_span(&tokens, &vocab))?;
    Ok((tokens, masked))
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _, _) = load_checkpoint(&a.checkpoint)?;
    let image = RgbImage::load(&a.image)?;
    let size = model.config.image_size;
    if (image.width, image.height) != (size, size) {
        return Err(Error::Usage(format!(
            "{} is {}x{} but the model expects {size}x{size}",
            a.image.display(),
            image.width,
            image.height
        )));
    }
    let (tokens, masked_tokens) = encode_expression(&a.expression, model.config.max_tokens)?;
    let pred = model.predict(&Example {
        image: image.to_tensor(),
        tokens,
        masked_tokens,
    })?;
    pred.mask.save(&a.mask_out)?;
    image
        .overlay(&pred.mask, OVERLAY_RGB, OVERLAY_ALPHA)?
        .save(&a.overlay_out)?;
    writeln!(out, "foreground pixels: {}", pred.mask.count())?;
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let corrupt = match a.corrupt.as_deref() {
        None => None,
        Some([name, offset]) => {
            let offset = offset.parse().map_err(|_| {
                Error::Usage(format!("--corrupt offset {offset:?} is not a number"))
            })?;
            Some((name.clone(), offset))
        }
        Some(_) => unreachable!("clap enforces two values"),
    };
    let report = gradcheck(&GradcheckOptions {
        seed: a.seed,
        samples: a.samples,
        tolerance: a.tolerance,
        corrupt,
        ..GradcheckOptions::default()
    })?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        out.write_all(report.to_text().as_bytes())?;
    }
    Ok(report.pass)
}
