//! Iterative-refinement caption generation and corpus BLEU-4 scoring.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{CondFeatures, Denoiser};
use crate::diffusion::{sample_forward, LatentSeq, NoiseCoeff};
use crate::error::{Error, Result};
use crate::schedule::{evenly_spaced_steps, NoiseSchedule};
use crate::textcodec::{decode_argmax, dedup_consecutive, EmbeddingTable, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    /// Refinement stages; 5 suffices for convergence.
    pub stages: usize,
    /// Re-noise with ε = 0 between stages (variance-0 stepping).
    pub deterministic: bool,
    /// Classifier-free guidance weight; 0 disables the null branch.
    pub w: f64,
    /// Collapse consecutive duplicate tokens after decoding.
    pub dedup: bool,
    /// Decode to tokens and re-embed between stages instead of passing
    /// latents (alternative reading of the refinement loop).
    pub reembed_between_stages: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            stages: 5,
            deterministic: true,
            w: 0.0,
            dedup: true,
            reembed_between_stages: false,
        }
    }
}

/// Evenly spaced positions over the schedule's accelerated subset,
/// returned descending from T; e.g. T=1000 with a 100-step subset and 5
/// stages gives {1000, 800, 600, 400, 200}.
pub fn stage_timesteps(schedule: &NoiseSchedule, stages: usize) -> Result<Vec<usize>> {
    let subset = &schedule.step_subset;
    if stages == 0 {
        return Err(Error::argument("stages must be >= 1"));
    }
    if stages > subset.len() {
        return Err(Error::argument(format!(
            "stages {} exceeds subset size {}",
            stages,
            subset.len()
        )));
    }
    let mut ts: Vec<usize> = evenly_spaced_steps(subset.len(), stages)
        .into_iter()
        .map(|pos| subset[pos - 1])
        .collect();
    ts.reverse();
    Ok(ts)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Per-position nearest-vocab-row ids, ties to the lowest id.
fn argmax_ids(pred: &Array2<f64>, table: &EmbeddingTable) -> Vec<usize> {
    (0..pred.nrows())
        .map(|i| {
            let row = pred.row(i);
            let mut best = 0;
            let mut best_logit = f64::NEG_INFINITY;
            for v in 0..table.vocab_size() {
                let logit = table.matrix.row(v).dot(&row);
                if logit > best_logit {
                    best_logit = logit;
                    best = v;
                }
            }
            best
        })
        .collect()
}

/// Start from x_T ~ N(0, I), refine over descending stage timesteps, and
/// decode the final x̂0 to a caption string.
pub fn generate(
    cond: &CondFeatures,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    table: &EmbeddingTable,
    vocab: &Vocab,
    gcfg: &GenConfig,
    noise_coeff: NoiseCoeff,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let ts = stage_timesteps(schedule, gcfg.stages)?;
    let l = model.config.l;
    let d = model.config.d_word;
    let mask = vec![true; l];
    let mut x = LatentSeq::new(gaussian(l, d, rng), ts[0], mask.clone())?;
    let mut pred_x0 = Array2::zeros((l, d));
    for (k, t) in ts.iter().enumerate() {
        debug_assert_eq!(x.t, *t);
        pred_x0 = model.guided_forward(&x, cond, gcfg.w)?;
        if !pred_x0.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite prediction at stage {k} (t={t})"
            )));
        }
        if gcfg.reembed_between_stages {
            let ids = argmax_ids(&pred_x0, table);
            for (i, id) in ids.iter().enumerate() {
                pred_x0.row_mut(i).assign(&table.matrix.row(*id));
            }
        }
        if k + 1 < ts.len() {
            let next_t = ts[k + 1];
            let clean = LatentSeq::new(pred_x0.clone(), 0, mask.clone())?;
            let eps = if gcfg.deterministic {
                Array2::zeros((l, d))
            } else {
                gaussian(l, d, rng)
            };
            x = sample_forward(&clean, next_t, &eps, schedule, noise_coeff)?;
        }
    }
    let tokens = decode_argmax(&pred_x0, table, vocab, &vec![true; l]);
    let tokens = if gcfg.dedup {
        dedup_consecutive(&tokens)
    } else {
        tokens
    };
    Ok(tokens.join(" "))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu4: f64,
    pub brevity_penalty: f64,
    /// Corpus size (number of candidate sentences).
    pub n: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: modified n-gram precisions with per-candidate clipping
/// against the max reference count, geometric mean over n = 1..4, and the
/// closest-reference-length brevity penalty. No smoothing: any zero
/// precision zeroes the score.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::argument("bleu4 needs a non-empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::argument(
            "candidate and reference group counts differ",
        ));
    }
    if references.iter().any(|refs| refs.is_empty()) {
        return Err(Error::argument("every candidate needs >= 1 reference"));
    }

    let mut c_total = 0usize; // candidate length sum
    let mut r_total = 0usize; // closest-reference length sum
    for (cand, refs) in candidates.iter().zip(references) {
        c_total += cand.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|len| {
                let diff = len.abs_diff(cand.len());
                (diff, *len) // ties prefer the shorter reference
            })
            .expect("non-empty refs");
        r_total += closest;
    }

    let mut precisions = [0.0f64; 4];
    for (n_idx, precision) in precisions.iter_mut().enumerate() {
        let n = n_idx + 1;
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, refs) in candidates.iter().zip(references) {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                total += count;
                matched += (*count).min(*max_ref.get(gram).unwrap_or(&0));
            }
        }
        *precision = if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
    }

    let brevity_penalty = if c_total == 0 {
        0.0
    } else if c_total > r_total {
        1.0
    } else {
        (1.0 - r_total as f64 / c_total as f64).exp()
    };

    let bleu = if precisions.iter().any(|p| *p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu4: bleu,
        brevity_penalty,
        n: candidates.len(),
    })
}

/// Whitespace/lowercase tokens for scoring, mirroring the training
/// tokenizer's surface scheme.
pub fn score_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}
