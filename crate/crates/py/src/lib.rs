//! Python bindings: noise-schedule math, BLEU scoring, the toy corpus
//! generator, and a config-driven session mirroring the CLI subcommands.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use diffcap_core::checkpoint::{checkpoint_base, load_tensors};
use diffcap_core::config::Config;
use diffcap_core::data;
use diffcap_core::denoiser::{CondFeatures, Denoiser};
use diffcap_core::infer;
use diffcap_core::rng::derive_rng;
use diffcap_core::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use diffcap_core::textcodec::{self, EmbeddingTable, Vocab};
use diffcap_core::training::{fit, restore_from_tensors, AdamW, FitArgs};

fn err(e: diffcap_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Precomputed β_t, α_t, ᾱ_t tables plus the accelerated step subset.
#[pyclass]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    #[new]
    #[pyo3(signature = (kind="linear", t_max=1000, beta_start=1e-4, beta_end=0.02, subset=None))]
    fn new(
        kind: &str,
        t_max: usize,
        beta_start: f64,
        beta_end: f64,
        subset: Option<usize>,
    ) -> PyResult<Self> {
        let kind = match kind {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown schedule kind `{other}` (expected `linear` or `cosine`)"
                )))
            }
        };
        let mut inner = build_schedule(kind, t_max, beta_start, beta_end).map_err(err)?;
        if let Some(count) = subset {
            inner = inner.with_subset(count).map_err(err)?;
        }
        Ok(Schedule { inner })
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind).to_lowercase()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.beta(t))
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.alpha(t))
    }

    /// ᾱ_t with ᾱ_0 ≡ 1.
    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check(t, 0)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Accelerated generation steps, ascending, last element = T.
    fn subset_steps(&self) -> Vec<usize> {
        self.inner.step_subset.clone()
    }

    /// Stage timesteps for `stages`-pass inference, descending from T.
    fn stage_timesteps(&self, stages: usize) -> PyResult<Vec<usize>> {
        infer::stage_timesteps(&self.inner, stages).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule(kind='{}', t_max={}, subset={})",
            self.kind(),
            self.inner.t_max,
            self.inner.step_subset.len()
        )
    }

    fn __len__(&self) -> usize {
        self.inner.t_max
    }
}

impl Schedule {
    fn check(&self, t: usize, low: usize) -> PyResult<()> {
        if t < low || t > self.inner.t_max {
            return Err(PyValueError::new_err(format!(
                "timestep {t} outside [{low}, {}]",
                self.inner.t_max
            )));
        }
        Ok(())
    }
}

/// Corpus BLEU-4 plus the brevity penalty and corpus size behind it.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct BleuScore {
    bleu4: f64,
    brevity_penalty: f64,
    n: usize,
}

#[pymethods]
impl BleuScore {
    fn __repr__(&self) -> String {
        format!(
            "BleuScore(bleu4={:.4}, brevity_penalty={:.4}, n={})",
            self.bleu4, self.brevity_penalty, self.n
        )
    }
}

impl From<infer::BleuReport> for BleuScore {
    fn from(r: infer::BleuReport) -> Self {
        BleuScore {
            bleu4: r.bleu4,
            brevity_penalty: r.brevity_penalty,
            n: r.n,
        }
    }
}

/// Corpus BLEU-4 over sentence strings; candidate i is scored against
/// references[i]. No smoothing: any zero n-gram precision zeroes the score.
#[pyfunction]
fn bleu4(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<BleuScore> {
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| infer::score_tokens(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| infer::score_tokens(r)).collect())
        .collect();
    infer::bleu4(&cands, &refs).map(BleuScore::from).map_err(err)
}

/// Collapse runs of consecutive duplicate tokens to one token.
#[pyfunction]
fn dedup_consecutive(tokens: Vec<String>) -> Vec<String> {
    textcodec::dedup_consecutive(&tokens)
}

/// Lowercased whitespace-delimited tokens, as used for BLEU.
#[pyfunction]
fn score_tokens(text: &str) -> Vec<String> {
    infer::score_tokens(text)
}

/// Paths of the files a toy corpus run wrote.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct ToyCorpusPaths {
    jsonl: String,
    features: String,
    vocab: String,
    split: String,
}

#[pymethods]
impl ToyCorpusPaths {
    fn __repr__(&self) -> String {
        format!("ToyCorpusPaths(jsonl='{}')", self.jsonl)
    }
}

/// Write a synthetic caption corpus (captions, features, vocab, split).
#[pyfunction]
#[pyo3(signature = (out_dir, scenes=16, captions_per_scene=1, dim=16, seed=0))]
fn make_toy_corpus(
    out_dir: PathBuf,
    scenes: usize,
    captions_per_scene: usize,
    dim: usize,
    seed: u64,
) -> PyResult<ToyCorpusPaths> {
    let corpus =
        data::make_toy_corpus(&out_dir, scenes, captions_per_scene, dim, seed).map_err(err)?;
    Ok(ToyCorpusPaths {
        jsonl: corpus.jsonl.display().to_string(),
        features: corpus.features.display().to_string(),
        vocab: corpus.vocab.display().to_string(),
        split: corpus.split.display().to_string(),
    })
}

/// One epoch row of the training metrics table.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct EpochRow {
    epoch: usize,
    lr: f64,
    lambda_value: f64,
    train_l_simple_prime: f64,
    train_l_r: f64,
    val_l_simple_prime: f64,
    val_l_r: f64,
    val_bleu4: f64,
}

#[pymethods]
impl EpochRow {
    fn __repr__(&self) -> String {
        format!(
            "EpochRow(epoch={}, val_l_simple_prime={:.4}, val_l_r={:.4}, val_bleu4={:.4})",
            self.epoch, self.val_l_simple_prime, self.val_l_r, self.val_bleu4
        )
    }
}

/// What a training run did and where it left its weights.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct TrainSummary {
    epochs_run: usize,
    stopped_early: bool,
    best_epoch: usize,
    final_checkpoint: String,
    last_val_bleu4: f64,
    metrics: Vec<EpochRow>,
}

#[pymethods]
impl TrainSummary {
    fn __repr__(&self) -> String {
        format!(
            "TrainSummary(epochs_run={}, stopped_early={}, best_epoch={}, last_val_bleu4={:.4})",
            self.epochs_run, self.stopped_early, self.best_epoch, self.last_val_bleu4
        )
    }
}

fn build_model(
    config: &Config,
    seed: u64,
    checkpoint: Option<&Path>,
) -> PyResult<(Denoiser, EmbeddingTable, Vocab)> {
    let vocab = Vocab::read(&config.data.vocab).map_err(err)?;
    let mut model_cfg = config.model.clone();
    if model_cfg.vocab == 0 {
        model_cfg.vocab = vocab.len();
    } else if model_cfg.vocab != vocab.len() {
        return Err(PyValueError::new_err(format!(
            "config says vocab {} but vocab file has {} tokens",
            model_cfg.vocab,
            vocab.len()
        )));
    }
    let d_word = model_cfg.d_word;
    // same init streams as the CLI so both frontends build the same model
    let mut model =
        Denoiser::new(model_cfg, &mut derive_rng(seed, "init.model", 0)).map_err(err)?;
    let mut table =
        EmbeddingTable::init_random(vocab.len(), d_word, &mut derive_rng(seed, "init.embed", 0));
    table.frozen = !config.embedding.trainable;
    if let Some(path) = checkpoint {
        let tensors = load_tensors(&checkpoint_base(path)).map_err(err)?;
        let mut opt = AdamW::new();
        restore_from_tensors(&mut model, &mut table, &mut opt, &tensors).map_err(err)?;
    }
    Ok((model, table, vocab))
}

/// Config-driven driver over one loaded run configuration; the train,
/// generate, and evaluate methods mirror the CLI subcommands and share
/// their rng streams, so both frontends produce identical outputs for
/// the same seed.
#[pyclass]
struct Session {
    config: Config,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (config_path, seed=None))]
    fn new(config_path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let mut config = Config::from_path(&config_path).map_err(err)?;
        if let Some(seed) = seed {
            config.training.seed = seed;
        }
        config.validate().map_err(err)?;
        Ok(Session { config })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.config.training.seed
    }

    /// Train per the config; checkpoints and metrics land in `out_dir`.
    fn train(&self, out_dir: PathBuf) -> PyResult<TrainSummary> {
        let config = &self.config;
        let seed = config.training.seed;
        let (records, features) =
            data::load_dataset(&config.data.jsonl, &config.data.features).map_err(err)?;
        let (train, val) = match &config.data.split {
            Some(path) => {
                data::apply_split(&records, &data::read_split(path).map_err(err)?).map_err(err)?
            }
            None => data::split(&records, config.data.val_fraction, seed).map_err(err)?,
        };
        let (mut model, mut table, vocab) = build_model(config, seed, None)?;
        let mut opt = AdamW::new();
        let schedule = config.build_schedule().map_err(err)?;
        let diff = config.diffusion_settings();
        let gen = config.gen_config();
        let train_cfg = config.train_config();
        let fit_args = FitArgs {
            train: &train,
            val: &val,
            features: &features,
            vocab: &vocab,
            schedule: &schedule,
            diff: &diff,
            gen: &gen,
            out_dir: &out_dir,
        };
        let report = fit(&fit_args, &mut model, &mut table, &mut opt, &train_cfg).map_err(err)?;
        Ok(TrainSummary {
            epochs_run: report.epochs_run,
            stopped_early: report.stopped_early,
            best_epoch: report.best_epoch,
            final_checkpoint: report.final_checkpoint.display().to_string(),
            last_val_bleu4: report.metrics.last().map(|m| m.val_bleu4).unwrap_or(0.0),
            metrics: report
                .metrics
                .iter()
                .map(|m| EpochRow {
                    epoch: m.epoch,
                    lr: m.lr,
                    lambda_value: m.lambda,
                    train_l_simple_prime: m.train_l_simple_prime,
                    train_l_r: m.train_l_r,
                    val_l_simple_prime: m.val_l_simple_prime,
                    val_l_r: m.val_l_r,
                    val_bleu4: m.val_bleu4,
                })
                .collect(),
        })
    }

    /// Caption the given feature rows with a trained checkpoint.
    fn generate(&self, checkpoint: PathBuf, rows: Vec<u32>) -> PyResult<Vec<String>> {
        let config = &self.config;
        let seed = config.training.seed;
        let features = data::read_cdlf(&config.data.features).map_err(err)?;
        let (model, table, vocab) = build_model(config, seed, Some(&checkpoint))?;
        let schedule = config.build_schedule().map_err(err)?;
        let gen = config.gen_config();
        let mut captions = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if *row as usize >= features.count() {
                return Err(PyValueError::new_err(format!(
                    "feature row {row} out of range (file has {} rows)",
                    features.count()
                )));
            }
            let cond = CondFeatures::image(features.row_f64(*row as usize));
            let mut rng = derive_rng(seed, "gen.cli", i as u64);
            let caption = infer::generate(
                &cond,
                &model,
                &schedule,
                &table,
                &vocab,
                &gen,
                config.diffusion.noise_coeff,
                &mut rng,
            )
            .map_err(err)?;
            captions.push(caption);
        }
        Ok(captions)
    }

    /// Caption every record of a dataset and score corpus BLEU-4 against
    /// its reference captions.
    fn evaluate(&self, checkpoint: PathBuf, dataset: PathBuf) -> PyResult<BleuScore> {
        let config = &self.config;
        let seed = config.training.seed;
        let (records, features) =
            data::load_dataset(&dataset, &config.data.features).map_err(err)?;
        if records.is_empty() {
            return Err(PyValueError::new_err("dataset has no records to evaluate"));
        }
        let (model, table, vocab) = build_model(config, seed, Some(&checkpoint))?;
        let schedule = config.build_schedule().map_err(err)?;
        let gen = config.gen_config();
        let mut candidates = Vec::with_capacity(records.len());
        let mut references = Vec::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let cond = CondFeatures::image(features.row_f64(record.feature_row as usize));
            let mut rng = derive_rng(seed, "eval.gen", i as u64);
            let caption = infer::generate(
                &cond,
                &model,
                &schedule,
                &table,
                &vocab,
                &gen,
                config.diffusion.noise_coeff,
                &mut rng,
            )
            .map_err(err)?;
            candidates.push(infer::score_tokens(&caption));
            references.push(
                record
                    .captions
                    .iter()
                    .map(|c| infer::score_tokens(c))
                    .collect::<Vec<_>>(),
            );
        }
        infer::bleu4(&candidates, &references)
            .map(BleuScore::from)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(seed={}, t_max={}, stages={})",
            self.config.training.seed, self.config.schedule.t_max, self.config.infer.stages
        )
    }
}

#[pymodule]
fn diffcap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schedule>()?;
    m.add_class::<BleuScore>()?;
    m.add_class::<ToyCorpusPaths>()?;
    m.add_class::<EpochRow>()?;
    m.add_class::<TrainSummary>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(dedup_consecutive, m)?)?;
    m.add_function(wrap_pyfunction!(score_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_corpus, m)?)?;
    Ok(())
}
