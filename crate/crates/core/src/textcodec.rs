//! Tokenization, the frozen embedding table, the weight-tied lm-head
//! rounding projection, and argmax decoding with duplicate removal.
//!
//! The tokenizer is a lowercase/whitespace scheme standing in for a
//! pretrained subword vocabulary; captions are framed as
//! `<bos> w1 .. wn <eos>` inside the length budget and padded to L.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::LatentSeq;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Surface forms for the four reserved ids, in file order.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Build a vocab from content tokens; the four specials are prepended.
    pub fn new<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(content.iter().map(|s| s.as_ref().to_string()));
        let mut token_to_id = HashMap::new();
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::argument(format!("duplicate vocab token `{tok}`")));
            }
        }
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// One token per line, UTF-8, line number = id; first four lines are the
    /// reserved pad/bos/eos/unk entries.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 {
            return Err(Error::parse(path, "vocab needs at least the 4 reserved lines"));
        }
        let mut id_to_token = Vec::with_capacity(lines.len());
        let mut token_to_id = HashMap::new();
        for (id, line) in lines.iter().enumerate() {
            if token_to_id.insert(line.to_string(), id).is_some() {
                return Err(Error::parse(path, format!("duplicate token `{line}`")));
            }
            id_to_token.push(line.to_string());
        }
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// vocab × D_word embedding rows; also the lm-head by weight tying.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub matrix: Array2<f64>,
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Rows drawn from a spherical Gaussian then rescaled to unit norm.
    pub fn init_random(vocab: usize, d_word: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut matrix =
            Array2::from_shape_fn((vocab, d_word), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in matrix.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        EmbeddingTable {
            matrix,
            frozen: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d_word(&self) -> usize {
        self.matrix.ncols()
    }

    /// The rounding projection: transpose of the embedding table.
    pub fn lm_head(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Smallest pairwise L2 distance between rows.
    pub fn min_row_separation(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut min = f64::INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let d = (&self.matrix.row(a) - &self.matrix.row(b))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

/// Lowercase whitespace tokens mapped to ids, unknowns → unk, truncated and
/// padded to L with bos/eos framing. The mask marks real positions.
pub fn tokenize(text: &str, l: usize, vocab: &Vocab) -> (Vec<usize>, Vec<bool>) {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    let budget = l.saturating_sub(2);
    let mut ids = Vec::with_capacity(l);
    ids.push(BOS);
    for w in words.iter().take(budget) {
        ids.push(vocab.id(w).unwrap_or(UNK));
    }
    ids.push(EOS);
    ids.truncate(l);
    let real = ids.len();
    ids.resize(l, PAD);
    let mut mask = vec![true; real];
    mask.resize(l, false);
    (ids, mask)
}

/// Inverse of [`tokenize`] for display: drop specials, join with spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|id| !Vocab::is_special(**id))
        .filter_map(|id| vocab.token(*id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Row lookup into the embedding table; the result is a clean latent (t = 0).
pub fn embed(tokens: &[usize], pad_mask: &[bool], table: &EmbeddingTable) -> Result<LatentSeq> {
    if pad_mask.len() != tokens.len() {
        return Err(Error::argument("pad_mask length != token count"));
    }
    let mut values = Array2::zeros((tokens.len(), table.d_word()));
    for (i, id) in tokens.iter().enumerate() {
        if *id >= table.vocab_size() {
            return Err(Error::argument(format!(
                "token id {id} out of range for vocab {}",
                table.vocab_size()
            )));
        }
        values.row_mut(i).assign(&table.matrix.row(*id));
    }
    LatentSeq::new(values, 0, pad_mask.to_vec())
}

/// Per position, argmax over the vocab of lm-head logits; specials are
/// stripped from the output. Ties break toward the lowest token id.
pub fn decode_argmax(
    pred_x0: &Array2<f64>,
    table: &EmbeddingTable,
    vocab: &Vocab,
    pad_mask: &[bool],
) -> Vec<String> {
    let mut out = Vec::new();
    for (i, keep) in pad_mask.iter().enumerate() {
        if !*keep || i >= pred_x0.nrows() {
            continue;
        }
        let row = pred_x0.row(i);
        let mut best = 0usize;
        let mut best_logit = f64::NEG_INFINITY;
        for v in 0..table.vocab_size() {
            let logit = table.matrix.row(v).dot(&row);
            if logit > best_logit {
                best_logit = logit;
                best = v;
            }
        }
        if !Vocab::is_special(best) {
            if let Some(tok) = vocab.token(best) {
                out.push(tok.to_string());
            }
        }
    }
    out
}

/// Collapse every run of equal adjacent tokens to its first element.
pub fn dedup_consecutive(tokens: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for tok in tokens {
        if out.last().map(|l| l == tok) != Some(true) {
            out.push(tok.clone());
        }
    }
    out
}
