//! Single-binary command-line interface.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric divergence.
//! Every run is deterministic given the seed, the config, and the input
//! files; the env var `DIFFCAP_SEED` overrides the config seed, and a
//! `--seed` flag (where present) overrides both. Commands with an `--out`
//! directory record a run manifest there before doing any real work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_base, load_tensors};
use crate::config::Config;
use crate::data::{self, load_dataset, read_cdlf, CaptionRecord, FeatureFile};
use crate::denoiser::{CondFeatures, Denoiser};
use crate::error::{Error, Result};
use crate::infer::{bleu4, generate, score_tokens};
use crate::rng::derive_rng;
use crate::textcodec::{EmbeddingTable, Vocab};
use crate::training::{fit, restore_from_tensors, AdamW, FitArgs};

#[derive(Parser)]
#[command(
    name = "diffcap",
    version,
    about = "Train and run a conditional diffusion caption model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic caption corpus (captions, features, vocab, split)
    MakeToyData(MakeToyDataArgs),
    /// Train a model from a config file; artifacts land under --out
    Train(TrainArgs),
    /// Generate captions for feature rows selected by key
    Generate(GenerateArgs),
    /// Generate for a whole dataset and score corpus BLEU-4
    Evaluate(EvaluateArgs),
    /// Print the noise schedule as CSV rows of t, beta, alpha_bar
    InspectSchedule(InspectScheduleArgs),
}

#[derive(Args)]
struct MakeToyDataArgs {
    /// Number of scenes (one feature row each)
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    /// Captions written per scene
    #[arg(long, default_value_t = 1)]
    captions_per_scene: usize,
    /// Feature vector dimension
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON; relative data paths resolve against its directory
    #[arg(long)]
    config: PathBuf,
    /// Output directory (checkpoints/, metrics.csv, manifest.json)
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint base to restore weights and optimizer state from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint base (accepts the .bin or .json path too)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file; defaults to the config's data.features
    #[arg(long)]
    features: Option<PathBuf>,
    /// Comma-separated keys; dataset keys with --dataset, else row indices
    #[arg(long)]
    keys: String,
    /// Dataset JSONL mapping keys to feature rows
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the config's refinement stage count
    #[arg(long)]
    stages: Option<usize>,
    /// Output directory (captions.jsonl, manifest.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset JSONL to caption and score against
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (report.json, sentences.csv, manifest.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InspectScheduleArgs {
    #[arg(long)]
    config: PathBuf,
    /// Also write schedule.csv and a manifest into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse and dispatch; returns the process exit code so tests can drive
/// the binary in-process.
pub fn run<I: Iterator<Item = String>>(args: I) -> i32 {
    let argv = std::iter::once("diffcap".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_divergence() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeToyData(args) => cmd_make_toy_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::InspectSchedule(args) => cmd_inspect_schedule(args),
    }
}

/// Written into --out before the command does real work; never touched
/// again afterwards.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config: Config,
    /// Content hash (sha-256 hex) per referenced data file.
    dataset_hashes: BTreeMap<String, String>,
    started_unix: u64,
    outputs: Vec<String>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn hash_files(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for path in paths {
        hashes.insert(path.display().to_string(), file_hash(path)?);
    }
    Ok(hashes)
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn manifest(
    command: &str,
    seed: u64,
    config: &Config,
    data_files: &[&Path],
    outputs: &[&Path],
) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        seed,
        config: config.clone(),
        dataset_hashes: hash_files(data_files)?,
        started_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    })
}

/// Config seed unless DIFFCAP_SEED or a --seed flag says otherwise; the
/// flag wins over the environment.
fn effective_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("DIFFCAP_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::config("DIFFCAP_SEED", format!("`{text}` is not a u64"))),
        Err(_) => Ok(config_seed),
    }
}

fn cmd_make_toy_data(args: MakeToyDataArgs) -> Result<()> {
    let corpus = data::make_toy_corpus(
        &args.out,
        args.scenes,
        args.captions_per_scene,
        args.dim,
        args.seed,
    )?;
    let config = Config::default();
    let mut m = manifest(
        "make-toy-data",
        args.seed,
        &config,
        &[&corpus.jsonl, &corpus.features, &corpus.vocab, &corpus.split],
        &[&corpus.jsonl, &corpus.features, &corpus.vocab, &corpus.split],
    )?;
    m.config.data.jsonl = corpus.jsonl.clone();
    m.config.data.features = corpus.features.clone();
    m.config.data.vocab = corpus.vocab.clone();
    m.config.data.split = Some(corpus.split.clone());
    write_manifest(&args.out, &m)?;
    println!(
        "wrote {} scenes to {}",
        args.scenes,
        args.out.display()
    );
    Ok(())
}

/// Model, embedding table, and vocab built from a config, optionally
/// restored from a checkpoint.
struct LoadedModel {
    model: Denoiser,
    table: EmbeddingTable,
    vocab: Vocab,
}

fn build_model(config: &Config, seed: u64, checkpoint: Option<&Path>) -> Result<LoadedModel> {
    let vocab = Vocab::read(&config.data.vocab)?;
    let mut model_cfg = config.model.clone();
    if model_cfg.vocab == 0 {
        model_cfg.vocab = vocab.len();
    } else if model_cfg.vocab != vocab.len() {
        return Err(Error::config(
            "model.vocab",
            format!(
                "configured {} but vocab file has {} tokens",
                model_cfg.vocab,
                vocab.len()
            ),
        ));
    }
    let d_word = model_cfg.d_word;
    let mut model = Denoiser::new(model_cfg, &mut derive_rng(seed, "init.model", 0))?;
    let mut table =
        EmbeddingTable::init_random(vocab.len(), d_word, &mut derive_rng(seed, "init.embed", 0));
    table.frozen = !config.embedding.trainable;
    if let Some(path) = checkpoint {
        let tensors = load_tensors(&checkpoint_base(path))?;
        let mut opt = AdamW::new();
        restore_from_tensors(&mut model, &mut table, &mut opt, &tensors)?;
    }
    Ok(LoadedModel { model, table, vocab })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = Config::from_path(&args.config)?;
    config.training.seed = effective_seed(config.training.seed, args.seed)?;
    config.validate()?;
    let seed = config.training.seed;

    let (records, features) = load_dataset(&config.data.jsonl, &config.data.features)?;
    let (train, val) = match &config.data.split {
        Some(path) => data::apply_split(&records, &data::read_split(path)?)?,
        None => data::split(&records, config.data.val_fraction, seed)?,
    };

    let LoadedModel {
        mut model,
        mut table,
        vocab,
    } = build_model(&config, seed, None)?;
    let mut opt = AdamW::new();
    if let Some(path) = &args.resume {
        let tensors = load_tensors(&checkpoint_base(path))?;
        restore_from_tensors(&mut model, &mut table, &mut opt, &tensors)?;
    }

    let schedule = config.build_schedule()?;
    let diff = config.diffusion_settings();
    let gen = config.gen_config();
    let train_cfg = config.train_config();

    let mut data_files: Vec<&Path> = vec![&config.data.jsonl, &config.data.features, &config.data.vocab];
    if let Some(split) = &config.data.split {
        data_files.push(split);
    }
    let m = manifest(
        "train",
        seed,
        &config,
        &data_files,
        &[
            &args.out.join("checkpoints"),
            &args.out.join("metrics.csv"),
            &args.out.join("steps.csv"),
        ],
    )?;
    write_manifest(&args.out, &m)?;

    let fit_args = FitArgs {
        train: &train,
        val: &val,
        features: &features,
        vocab: &vocab,
        schedule: &schedule,
        diff: &diff,
        gen: &gen,
        out_dir: &args.out,
    };
    let report = fit(&fit_args, &mut model, &mut table, &mut opt, &train_cfg)?;
    let last_bleu = report.metrics.last().map(|m| m.val_bleu4).unwrap_or(0.0);
    println!(
        "trained {} epoch(s){}; best epoch {}; last val BLEU-4 {:.4}; checkpoint {}",
        report.epochs_run,
        if report.stopped_early { " (early stop)" } else { "" },
        report.best_epoch,
        last_bleu,
        report.final_checkpoint.display()
    );
    Ok(())
}

/// Keys name dataset records when --dataset is given, else feature rows.
fn resolve_keys(
    keys: &str,
    dataset: Option<&[CaptionRecord]>,
    features: &FeatureFile,
) -> Result<Vec<(String, u32)>> {
    let mut resolved = Vec::new();
    for key in keys.split(',').map(str::trim).filter(|k| !k.is_empty()) {
        let row = match dataset {
            Some(records) => {
                records
                    .iter()
                    .find(|r| r.key == key)
                    .ok_or_else(|| Error::argument(format!("unknown key `{key}`")))?
                    .feature_row
            }
            None => key
                .parse::<u32>()
                .map_err(|_| Error::argument(format!("key `{key}` is not a feature row index")))?,
        };
        if row as usize >= features.count() {
            return Err(Error::FeatureRowOutOfRange {
                key: key.to_string(),
                row,
                count: features.count() as u32,
            });
        }
        resolved.push((key.to_string(), row));
    }
    if resolved.is_empty() {
        return Err(Error::argument("--keys named no keys"));
    }
    Ok(resolved)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut config = Config::from_path(&args.config)?;
    config.training.seed = effective_seed(config.training.seed, args.seed)?;
    if let Some(stages) = args.stages {
        config.infer.stages = stages;
    }
    let seed = config.training.seed;

    let features_path = args.features.clone().unwrap_or_else(|| config.data.features.clone());
    let features = read_cdlf(&features_path)?;
    let records = match &args.dataset {
        Some(path) => Some(load_dataset(path, &features_path)?.0),
        None => None,
    };
    let resolved = resolve_keys(&args.keys, records.as_deref(), &features)?;

    let loaded = build_model(&config, seed, Some(&args.checkpoint))?;
    let schedule = config.build_schedule()?;
    let gen = config.gen_config();

    let mut data_files: Vec<&Path> = vec![&features_path, &config.data.vocab];
    if let Some(path) = &args.dataset {
        data_files.push(path);
    }
    let captions_path = args.out.join("captions.jsonl");
    let m = manifest("generate", seed, &config, &data_files, &[&captions_path])?;
    write_manifest(&args.out, &m)?;

    #[derive(Serialize)]
    struct CaptionLine<'a> {
        key: &'a str,
        feature_row: u32,
        caption: String,
    }

    let mut lines = String::new();
    for (i, (key, row)) in resolved.iter().enumerate() {
        let cond = CondFeatures::image(features.row_f64(*row as usize));
        let mut rng = derive_rng(seed, "gen.cli", i as u64);
        let caption = generate(
            &cond,
            &loaded.model,
            &schedule,
            &loaded.table,
            &loaded.vocab,
            &gen,
            config.diffusion.noise_coeff,
            &mut rng,
        )?;
        let line = CaptionLine {
            key,
            feature_row: *row,
            caption,
        };
        lines.push_str(
            &serde_json::to_string(&line).map_err(|e| Error::parse(&captions_path, e.to_string()))?,
        );
        lines.push('\n');
    }
    fs::write(&captions_path, lines).map_err(|e| Error::io(&captions_path, e))?;
    println!("wrote {} caption(s) to {}", resolved.len(), captions_path.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config = Config::from_path(&args.config)?;
    config.training.seed = effective_seed(config.training.seed, args.seed)?;
    let seed = config.training.seed;

    let (records, features) = load_dataset(&args.dataset, &config.data.features)?;
    if records.is_empty() {
        return Err(Error::argument("dataset has no records to evaluate"));
    }
    let loaded = build_model(&config, seed, Some(&args.checkpoint))?;
    let schedule = config.build_schedule()?;
    let gen = config.gen_config();

    let report_path = args.out.join("report.json");
    let sentences_path = args.out.join("sentences.csv");
    let m = manifest(
        "evaluate",
        seed,
        &config,
        &[&args.dataset, &config.data.features, &config.data.vocab],
        &[&report_path, &sentences_path],
    )?;
    write_manifest(&args.out, &m)?;

    let mut candidates = Vec::with_capacity(records.len());
    let mut references = Vec::with_capacity(records.len());
    let mut sentences = String::from("key,sentence_bleu4,candidate_len,caption\n");
    for (i, record) in records.iter().enumerate() {
        let cond = CondFeatures::image(features.row_f64(record.feature_row as usize));
        let mut rng = derive_rng(seed, "eval.gen", i as u64);
        let caption = generate(
            &cond,
            &loaded.model,
            &schedule,
            &loaded.table,
            &loaded.vocab,
            &gen,
            config.diffusion.noise_coeff,
            &mut rng,
        )?;
        let cand = score_tokens(&caption);
        let refs: Vec<Vec<String>> = record.captions.iter().map(|c| score_tokens(c)).collect();
        let sentence = bleu4(std::slice::from_ref(&cand), std::slice::from_ref(&refs))?.bleu4;
        sentences.push_str(&format!(
            "{},{},{},{}\n",
            record.key,
            sentence,
            cand.len(),
            caption.replace(',', " ")
        ));
        candidates.push(cand);
        references.push(refs);
    }
    let report = bleu4(&candidates, &references)?;

    #[derive(Serialize)]
    struct Report {
        bleu4: f64,
        n: usize,
        brevity_penalty: f64,
    }
    let json = serde_json::to_string_pretty(&Report {
        bleu4: report.bleu4,
        n: report.n,
        brevity_penalty: report.brevity_penalty,
    })
    .map_err(|e| Error::parse(&report_path, e.to_string()))?;
    fs::write(&report_path, json.clone() + "\n").map_err(|e| Error::io(&report_path, e))?;
    fs::write(&sentences_path, sentences).map_err(|e| Error::io(&sentences_path, e))?;
    println!("{json}");
    Ok(())
}

fn cmd_inspect_schedule(args: InspectScheduleArgs) -> Result<()> {
    let config = Config::from_path(&args.config)?;
    let schedule = config.build_schedule()?;
    let mut csv = String::from("t,beta,alpha_bar\n");
    for t in 1..=schedule.t_max {
        csv.push_str(&format!("{},{},{}\n", t, schedule.beta(t), schedule.alpha_bar(t)));
    }
    print!("{csv}");
    if let Some(out) = &args.out {
        let csv_path = out.join("schedule.csv");
        let m = manifest("inspect-schedule", config.training.seed, &config, &[], &[&csv_path])?;
        write_manifest(out, &m)?;
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(())
}
