//! Dataset ingestion (captions + precomputed condition features), the
//! synthetic toy corpus, and train/validation splitting.
//!
//! Condition features arrive through a fixed binary format so any
//! external extractor can produce them; nothing here depends on how the
//! vectors were computed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::textcodec::Vocab;

pub const CDLF_MAGIC: [u8; 4] = *b"CDLF";
pub const MAX_CAPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub key: String,
    pub captions: Vec<String>,
    pub feature_row: u32,
}

/// Decoded feature file; rows are stored as written (32-bit) so writing
/// them back round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub rows: Array2<f32>,
}

impl FeatureFile {
    pub fn count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// One feature vector widened for model arithmetic.
    pub fn row_f64(&self, i: usize) -> Array1<f64> {
        self.rows.row(i).mapv(|v| v as f64)
    }
}

/// Layout: magic "CDLF", count u32 LE, dim u32 LE, then count·dim f32 LE.
pub fn write_cdlf(path: &Path, rows: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * rows.len());
    buf.extend_from_slice(&CDLF_MAGIC);
    buf.extend_from_slice(&(rows.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.ncols() as u32).to_le_bytes());
    for v in rows.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cdlf(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 12,
            actual: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CDLF_MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * count * dim;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut rows = Array2::zeros((count, dim));
    for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        rows[(i / dim.max(1), i % dim.max(1))] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(FeatureFile { rows })
}

/// One JSON object per line: {"key", "captions", "feature_row"}.
pub fn load_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::parse(path, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load and cross-validate the caption/feature pair.
pub fn load_dataset(jsonl_path: &Path, feature_path: &Path) -> Result<(Vec<CaptionRecord>, FeatureFile)> {
    let records = load_jsonl(jsonl_path)?;
    let features = read_cdlf(feature_path)?;
    for rec in &records {
        if rec.captions.is_empty() || rec.captions.len() > MAX_CAPTIONS {
            return Err(Error::parse(
                jsonl_path,
                format!(
                    "record `{}` has {} captions; expected 1..={MAX_CAPTIONS}",
                    rec.key,
                    rec.captions.len()
                ),
            ));
        }
        if rec.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::parse(
                jsonl_path,
                format!("record `{}` has an empty caption", rec.key),
            ));
        }
        if rec.feature_row as usize >= features.count() {
            return Err(Error::FeatureRowOutOfRange {
                key: rec.key.clone(),
                row: rec.feature_row,
                count: features.count() as u32,
            });
        }
    }
    Ok((records, features))
}

/// File names produced for a toy corpus.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub jsonl: PathBuf,
    pub features: PathBuf,
    pub split: PathBuf,
    pub vocab: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

const DETERMINERS: [&str; 5] = ["a", "the", "one", "some", "this"];
const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "brown", "gray", "gold"];
const ANIMALS: [&str; 8] = ["dog", "cat", "bird", "horse", "fish", "bear", "fox", "owl"];
const VERBS: [&str; 8] = ["runs", "sleeps", "jumps", "swims", "waits", "eats", "plays", "hides"];

/// All words the toy templates can emit, in fixed order.
pub fn toy_vocab() -> Vocab {
    let mut words: Vec<&str> = Vec::new();
    words.extend_from_slice(&DETERMINERS);
    words.extend_from_slice(&COLORS);
    words.extend_from_slice(&ANIMALS);
    words.extend_from_slice(&VERBS);
    Vocab::new(&words).expect("toy word lists are distinct")
}

/// Scene caption variants: "<det> <color> <animal> <verb>" with slots
/// chosen by mixed-radix digits of the scene index, so every scene up to
/// 512 gets a distinct caption set.
pub fn toy_captions(scene: usize, captions_per_scene: usize) -> Vec<String> {
    let color = COLORS[scene % COLORS.len()];
    let animal = ANIMALS[(scene / COLORS.len()) % ANIMALS.len()];
    let verb = VERBS[(scene / (COLORS.len() * ANIMALS.len())) % VERBS.len()];
    (0..captions_per_scene)
        .map(|j| format!("{} {color} {animal} {verb}", DETERMINERS[j]))
        .collect()
}

/// Orthogonal-ish unit scene vectors: Gaussian draws run through
/// Gram-Schmidt while directions remain, plain normalization after.
fn scene_vectors(num_scenes: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = derive_rng(seed, "toy.features", 0);
    let mut rows = Array2::zeros((num_scenes, dim));
    for i in 0..num_scenes {
        let mut v: Array1<f64> =
            Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        if i < dim {
            for j in 0..i {
                let prev = rows.row(j).to_owned();
                let proj = v.dot(&prev);
                v -= &(prev * proj);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            v /= norm;
        }
        rows.row_mut(i).assign(&v);
    }
    rows
}

/// Write data.jsonl, features.cdlf, split.json and vocab.txt under
/// `out_dir`; byte-identical across runs for a fixed seed.
pub fn make_toy_corpus(
    out_dir: &Path,
    num_scenes: usize,
    captions_per_scene: usize,
    dim: usize,
    seed: u64,
) -> Result<ToyCorpus> {
    if num_scenes < 2 {
        return Err(Error::argument("toy corpus needs at least 2 scenes"));
    }
    if captions_per_scene == 0 || captions_per_scene > MAX_CAPTIONS {
        return Err(Error::argument(format!(
            "captions per scene must be 1..={MAX_CAPTIONS}"
        )));
    }
    if dim == 0 {
        return Err(Error::argument("feature dim must be positive"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records: Vec<CaptionRecord> = (0..num_scenes)
        .map(|i| CaptionRecord {
            key: format!("scene{i:03}"),
            captions: toy_captions(i, captions_per_scene),
            feature_row: i as u32,
        })
        .collect();
    let vectors = scene_vectors(num_scenes, dim, seed).mapv(|v| v as f32);

    let paths = ToyCorpus {
        jsonl: out_dir.join("data.jsonl"),
        features: out_dir.join("features.cdlf"),
        split: out_dir.join("split.json"),
        vocab: out_dir.join("vocab.txt"),
    };
    write_jsonl(&paths.jsonl, &records)?;
    write_cdlf(&paths.features, &vectors)?;
    toy_vocab().write(&paths.vocab)?;

    let (train, val) = split(&records, 1.0 / 8.0, seed)?;
    let mut split_file = SplitFile {
        train: train.iter().map(|r| r.key.clone()).collect(),
        val: val.iter().map(|r| r.key.clone()).collect(),
    };
    split_file.train.sort();
    split_file.val.sort();
    let json = serde_json::to_string_pretty(&split_file)
        .map_err(|e| Error::parse(&paths.split, e.to_string()))?;
    let mut f = fs::File::create(&paths.split).map_err(|e| Error::io(&paths.split, e))?;
    writeln!(f, "{json}").map_err(|e| Error::io(&paths.split, e))?;
    Ok(paths)
}

/// Deterministic shuffled split; the validation side gets
/// max(1, round(n·val_fraction)) records and both sides stay non-empty.
pub fn split(
    records: &[CaptionRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<CaptionRecord>, Vec<CaptionRecord>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::argument("val_fraction must be in (0, 1)"));
    }
    let n = records.len();
    let val_count = ((n as f64 * val_fraction).round() as usize).max(1);
    if val_count >= n {
        return Err(Error::argument(
            "split leaves a side empty; need at least one record per side",
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "split", 0));
    let val: Vec<CaptionRecord> = order[..val_count].iter().map(|i| records[*i].clone()).collect();
    let train: Vec<CaptionRecord> = order[val_count..].iter().map(|i| records[*i].clone()).collect();
    Ok((train, val))
}

/// Look up split membership by key; unknown keys error.
pub fn apply_split(
    records: &[CaptionRecord],
    split_file: &SplitFile,
) -> Result<(Vec<CaptionRecord>, Vec<CaptionRecord>)> {
    let pick = |keys: &[String]| -> Result<Vec<CaptionRecord>> {
        keys.iter()
            .map(|k| {
                records
                    .iter()
                    .find(|r| &r.key == k)
                    .cloned()
                    .ok_or_else(|| Error::argument(format!("split references unknown key `{k}`")))
            })
            .collect()
    };
    Ok((pick(&split_file.train)?, pick(&split_file.val)?))
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}
