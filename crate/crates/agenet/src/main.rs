//! `agenet` command-line tool: dataset preparation, training, evaluation,
//! prediction and attention-map export behind one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad input/config,
//! 3 unsupported operation. Every flag can also be set through an `AAG_`
//! environment variable (e.g. `AAG_DATASET`, `AAG_LR`).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use agenet::data::{
    census_display, load_batch, scan_dataset, split_dataset, BucketScheme, Gender, SampleRecord,
    SplitManifest,
};
use agenet::error::{Error, Result};
use agenet::eval::{confusion_to_csv, evaluate, export_attention_maps, report_to_csv};
use agenet::model::{
    build_model, ensemble_predict, BackboneKind, MultiTaskModel, MultiTaskModelSpec, Prediction,
};
use agenet::scalar::Scalar;
use agenet::train::{load_checkpoint, train, Adam, TrainConfig};
use agenet::weights::load_model;

const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Parser)]
#[command(
    name = "agenet",
    version,
    about = "Age and gender estimation from face images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset directory, report a census and write the split manifest
    Prepare(PrepareArgs),
    /// Train a backbone and write weight files plus an epoch log
    Train(TrainArgs),
    /// Evaluate one weight file (single model) or several (ensemble)
    Eval(EvalArgs),
    /// Predict gender and age bucket for ad-hoc images
    Predict(PredictArgs),
    /// Export attention masks as PGM/PPM images
    ExportAttention(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModelChoice {
    AttentionNet,
    ResnetLite,
}

impl From<ModelChoice> for BackboneKind {
    fn from(m: ModelChoice) -> BackboneKind {
        match m {
            ModelChoice::AttentionNet => BackboneKind::AttentionNet,
            ModelChoice::ResnetLite => BackboneKind::ResnetLite,
        }
    }
}

#[derive(Args, Serialize)]
struct PrepareArgs {
    /// Dataset directory of UTK-style-named images
    #[arg(long, env = "AAG_DATASET")]
    dataset: PathBuf,
    /// Output directory for census and split manifest
    #[arg(long, env = "AAG_OUT")]
    out: PathBuf,
    /// Split seed
    #[arg(long, env = "AAG_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, env = "AAG_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "AAG_OUT")]
    out: PathBuf,
    /// Backbone to train
    #[arg(long, env = "AAG_MODEL", value_enum, default_value_t = ModelChoice::AttentionNet)]
    model: ModelChoice,
    #[arg(long, env = "AAG_EPOCHS", default_value_t = 100)]
    epochs: usize,
    #[arg(long, env = "AAG_BATCH_SIZE", default_value_t = 16)]
    batch_size: usize,
    #[arg(long, env = "AAG_LR", default_value_t = 0.005)]
    lr: f64,
    #[arg(long, env = "AAG_SEED", default_value_t = 0)]
    seed: u64,
    /// Square input resolution; must be divisible by 32
    #[arg(long, env = "AAG_INPUT_SIZE", default_value_t = 64)]
    input_size: usize,
    /// Use only the first N scanned records (before splitting)
    #[arg(long, env = "AAG_SUBSET")]
    subset: Option<usize>,
    #[arg(long, env = "AAG_PRECISION", value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Stop age-loss gradients from reaching the gender head
    #[arg(long, env = "AAG_DETACH_GENDER")]
    detach_gender: bool,
    /// Feed the gender head's probabilities into the age branch
    #[arg(long, env = "AAG_GENDER_AUGMENTATION", default_value_t = true, action = clap::ArgAction::Set)]
    gender_augmentation: bool,
    /// Weight on the age-bucket loss term
    #[arg(long, env = "AAG_LAMBDA_AGE", default_value_t = 1.0)]
    lambda_age: f64,
    /// Disable horizontal-flip augmentation
    #[arg(long, env = "AAG_NO_AUGMENT")]
    no_augment: bool,
    /// Resume from a checkpoint written by a previous run
    #[arg(long, env = "AAG_RESUME")]
    resume: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long, env = "AAG_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "AAG_OUT")]
    out: PathBuf,
    /// One weight file for a single model, two or more for an ensemble
    #[arg(long, env = "AAG_WEIGHTS", num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    #[arg(long, env = "AAG_BATCH_SIZE", default_value_t = 16)]
    batch_size: usize,
    /// Split seed; must match the seed used for training
    #[arg(long, env = "AAG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "AAG_SUBSET")]
    subset: Option<usize>,
    #[arg(long, env = "AAG_PRECISION", value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long, env = "AAG_WEIGHTS", num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    /// Image files to classify
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, env = "AAG_PRECISION", value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Also write the prediction lines to this NDJSON file
    #[arg(long, env = "AAG_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    /// Weight file of an attention-net model
    #[arg(long, env = "AAG_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, env = "AAG_OUT")]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, env = "AAG_PRECISION", value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => match args.precision {
            Precision::F32 => cmd_train::<f32>(args),
            Precision::F64 => cmd_train::<f64>(args),
        },
        Command::Eval(args) => match args.precision {
            Precision::F32 => cmd_eval::<f32>(args),
            Precision::F64 => cmd_eval::<f64>(args),
        },
        Command::Predict(args) => match args.precision {
            Precision::F32 => cmd_predict::<f32>(args),
            Precision::F64 => cmd_predict::<f64>(args),
        },
        Command::ExportAttention(args) => match args.precision {
            Precision::F32 => cmd_export_attention::<f32>(args),
            Precision::F64 => cmd_export_attention::<f64>(args),
        },
    }
}

/// Writes the fully resolved arguments next to the command's outputs so a
/// rerun can reproduce them.
fn write_config<T: Serialize>(dir: &Path, name: &str, command: &str, args: &T) -> Result<()> {
    let wrapped = serde_json::json!({ "command": command, "args": args });
    std::fs::write(dir.join(name), serde_json::to_string_pretty(&wrapped)? + "\n")?;
    Ok(())
}

fn scan_and_split(
    dataset: &Path,
    seed: u64,
    subset: Option<usize>,
) -> Result<(agenet::data::DatasetSplit, agenet::data::Census)> {
    let scheme = BucketScheme::default();
    let (mut records, census) = scan_dataset(dataset, &scheme)?;
    if let Some(n) = subset {
        records.truncate(n);
    }
    let split = split_dataset(&records, seed, SPLIT_RATIOS)?;
    Ok((split, census))
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let scheme = BucketScheme::default();
    let (records, census) = scan_dataset(&args.dataset, &scheme)?;
    let split = split_dataset(&records, args.seed, SPLIT_RATIOS)?;
    let manifest = SplitManifest::from_split(&split);

    let census_json = serde_json::json!({
        "total": census.total,
        "male": census.male,
        "female": census.female,
        "skipped": census.skipped,
        "per_bucket": census_display(&census, &scheme),
    });
    std::fs::write(
        args.out.join("census.json"),
        serde_json::to_string_pretty(&census_json)? + "\n",
    )?;
    std::fs::write(
        args.out.join("split.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_config(&args.out, "prepare.config.json", "prepare", &args)?;
    println!(
        "scanned {} images ({} male, {} female, {} skipped); split {}/{}/{}",
        census.total,
        census.male,
        census.female,
        census.skipped,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_train<S: Scalar>(args: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        lambda_age: args.lambda_age,
        seed: args.seed,
        eval_every: 1,
        augment: !args.no_augment,
    };
    config.validate()?;

    let (split, _) = scan_and_split(&args.dataset, args.seed, args.subset)?;
    write_config(&args.out, "train.config.json", "train", &args)?;

    let (model, mut adam, start_epoch, initial_best) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint::<S>(path)?;
            if ckpt.config_hash != config.hash() {
                return Err(Error::Config(
                    "checkpoint was written under a different training config".into(),
                ));
            }
            println!("resuming from epoch {}", ckpt.epoch);
            (ckpt.model, ckpt.adam, ckpt.epoch, ckpt.best_metric)
        }
        None => {
            let mut spec =
                MultiTaskModelSpec::new(args.model.into(), args.input_size, BucketScheme::default().num_buckets);
            spec.gender_augmentation = args.gender_augmentation;
            spec.detach_gender_input = args.detach_gender;
            let model = build_model::<S>(&spec, args.seed)?;
            let adam = Adam::new(&model.trainable_params());
            (model, adam, 0, f64::NEG_INFINITY)
        }
    };

    println!(
        "training {} ({} parameters) on {} images, validating on {}",
        model.spec.backbone,
        model.param_count(),
        split.train.len(),
        split.val.len()
    );
    let outcome = train(
        &model,
        &mut adam,
        start_epoch,
        initial_best,
        &split.train,
        &split.val,
        &config,
        Some(&args.out),
    )?;
    if let Some(last) = outcome.records.last() {
        println!(
            "done: {} epochs, final train loss {:.4}, best val metric {:.4} at epoch {}",
            outcome.records.len(),
            last.train_loss,
            outcome.best_metric,
            outcome.best_epoch
        );
    }
    Ok(())
}

fn cmd_eval<S: Scalar>(args: EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let models: Vec<MultiTaskModel<S>> =
        args.weights.iter().map(|p| load_model::<S>(p)).collect::<Result<_>>()?;
    let refs: Vec<&MultiTaskModel<S>> = models.iter().collect();
    let (split, _) = scan_and_split(&args.dataset, args.seed, args.subset)?;
    if split.test.is_empty() {
        return Err(Error::Data("test partition is empty".into()));
    }
    let report = evaluate(&refs, &split.test, args.batch_size)?;

    let scheme = BucketScheme::default();
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(args.out.join("metrics.csv"), report_to_csv(&report))?;
    std::fs::write(
        args.out.join("confusion_gender.csv"),
        confusion_to_csv(&report.confusion_gender, None),
    )?;
    std::fs::write(
        args.out.join("confusion_age.csv"),
        confusion_to_csv(&report.confusion_age, Some(&scheme)),
    )?;
    write_config(&args.out, "eval.config.json", "eval", &args)?;
    println!(
        "{} on {} test images: gender acc {:.4}, age acc {:.4}, aabd {:.4}",
        if models.len() == 1 { "single model" } else { "ensemble" },
        report.sample_count,
        report.gender_accuracy,
        report.age_bucket_accuracy,
        report.aabd
    );
    Ok(())
}

/// Wraps an ad-hoc image path in a placeholder record so the standard batch
/// decoder (resize + normalization) applies; the labels are never read.
fn adhoc_record(path: &Path) -> SampleRecord {
    SampleRecord { path: path.to_path_buf(), age_years: 1, gender: Gender::Male, bucket: 0 }
}

fn predict_one<S: Scalar>(
    models: &[MultiTaskModel<S>],
    path: &Path,
) -> Result<Prediction> {
    let batch = load_batch::<S>(&[adhoc_record(path)], models[0].spec.input_size, false, 0)?;
    let members: Vec<Vec<Prediction>> =
        models.iter().map(|m| m.predict(&batch.images)).collect::<Result<_>>()?;
    Ok(if members.len() == 1 {
        members.into_iter().next().unwrap().remove(0)
    } else {
        ensemble_predict(&members)?.remove(0)
    })
}

fn cmd_predict<S: Scalar>(args: PredictArgs) -> Result<()> {
    let models: Vec<MultiTaskModel<S>> =
        args.weights.iter().map(|p| load_model::<S>(p)).collect::<Result<_>>()?;
    for m in &models[1..] {
        if m.spec.num_age_buckets != models[0].spec.num_age_buckets
            || m.spec.input_size != models[0].spec.input_size
        {
            return Err(Error::Config(
                "ensemble members disagree on bucket count or input size".into(),
            ));
        }
    }
    let scheme = BucketScheme::default();
    let mut lines = Vec::new();
    let mut successes = 0usize;
    for path in &args.images {
        let line = match predict_one(&models, path) {
            Ok(p) => {
                successes += 1;
                let g = p.gender_class();
                let a = p.age_class();
                serde_json::json!({
                    "file": path.display().to_string(),
                    "gender": { "label": if g == 0 { "male" } else { "female" }, "prob": p.gender_probs[g] },
                    "age": { "label": scheme.display_label(a), "prob": p.age_probs[a] },
                })
            }
            Err(e) => serde_json::json!({
                "file": path.display().to_string(),
                "error": e.to_string(),
            }),
        };
        println!("{}", serde_json::to_string(&line)?);
        lines.push(line);
    }
    if let Some(out) = &args.out {
        let mut text = String::new();
        for l in &lines {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        std::fs::write(out, text)?;
    }
    if successes == 0 {
        return Err(Error::Data("no image could be classified".into()));
    }
    Ok(())
}

fn cmd_export_attention<S: Scalar>(args: ExportArgs) -> Result<()> {
    let model = load_model::<S>(&args.weights)?;
    std::fs::create_dir_all(&args.out)?;
    write_config(&args.out, "export-attention.config.json", "export-attention", &args)?;
    let size = model.spec.input_size;
    let mut written = 0usize;
    for path in &args.images {
        let batch = load_batch::<S>(&[adhoc_record(path)], size, false, 0)?;
        let taps = model.attention_taps(&batch.images)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let files = export_attention_maps(&taps, &[id], &args.out, size)?;
        written += files.len();
    }
    println!(
        "wrote {} attention maps for {} images to {}",
        written,
        args.images.len(),
        args.out.display()
    );
    Ok(())
}
