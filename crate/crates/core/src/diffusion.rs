//! Forward-process sampling, posterior means, and the compound
//! L_simple′ + λ·L_R training loss with analytic gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Coefficient applied to the noise term when sampling x_t from x_0.
///
/// `Sqrt` is √(1−ᾱ_t), the form implied by composing q(x_t | x_{t−1});
/// `Linear` is the literal (1−ᾱ_t) variant, kept as a reproduction knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCoeff {
    Sqrt,
    Linear,
}

/// What the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Predict the clean embedding x_0 directly.
    X0,
    /// Predict x_{max(t−n, 0)}, sampled with the same ε as x_t.
    XTMinusN,
}

/// Forward-process and prediction-target policy shared by training and
/// inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSettings {
    pub noise_coeff: NoiseCoeff,
    pub prediction: PredictionMode,
    /// The n in x_{t−n} prediction; ignored in x0 mode.
    pub n_back: usize,
    /// Compute the x₁-restoring term every step (true) or only when the
    /// drawn t is 1 (false).
    pub x1_every_step: bool,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            noise_coeff: NoiseCoeff::Sqrt,
            prediction: PredictionMode::X0,
            n_back: 100,
            x1_every_step: true,
        }
    }
}

/// An L × D_word matrix of caption embeddings at a diffusion timestep.
/// t = 0 means a clean embedding of tokens.
#[derive(Debug, Clone)]
pub struct LatentSeq {
    pub values: Array2<f64>,
    pub t: usize,
    /// true = real token position, false = padding.
    pub pad_mask: Vec<bool>,
}

impl LatentSeq {
    pub fn new(values: Array2<f64>, t: usize, pad_mask: Vec<bool>) -> Result<Self> {
        if pad_mask.len() != values.nrows() {
            return Err(Error::argument(format!(
                "pad_mask length {} != sequence length {}",
                pad_mask.len(),
                values.nrows()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("non-finite latent values".into()));
        }
        Ok(LatentSeq { values, t, pad_mask })
    }

    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-step loss record. `total` is exactly `l_simple_prime + lambda * l_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_simple_prime: f64,
    pub l_r: f64,
    pub lambda: f64,
    pub total: f64,
}

/// x_t = √(ᾱ_t)·x0 + coeff(ᾱ_t)·ε, sampled directly from x_0.
///
/// `eps` is injected by the caller so sampling stays deterministic under a
/// seeded RNG.
pub fn sample_forward(
    x0: &LatentSeq,
    t: usize,
    eps: &Array2<f64>,
    schedule: &NoiseSchedule,
    coeff: NoiseCoeff,
) -> Result<LatentSeq> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::argument(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max
        )));
    }
    if eps.dim() != x0.values.dim() {
        return Err(Error::argument(format!(
            "eps shape {:?} != x0 shape {:?}",
            eps.dim(),
            x0.values.dim()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let noise_scale = match coeff {
        NoiseCoeff::Sqrt => (1.0 - ab).sqrt(),
        NoiseCoeff::Linear => 1.0 - ab,
    };
    let values = ab.sqrt() * &x0.values + noise_scale * eps;
    LatentSeq::new(values, t, x0.pad_mask.clone())
}

/// Mean of the posterior q(x_{t−1} | x_t, x_0), with ᾱ_0 ≡ 1:
///
///   μ̂ = (√(ᾱ_{t−1})·β_t / (1 − ᾱ_t))·x0 + (√(α_t)·(1 − ᾱ_{t−1}) / (1 − ᾱ_t))·xt
pub fn posterior_mean(
    xt: &LatentSeq,
    x0: &LatentSeq,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::argument(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max
        )));
    }
    if xt.values.dim() != x0.values.dim() {
        return Err(Error::argument("xt and x0 shapes disagree".to_string()));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta_t = schedule.beta(t);
    let alpha_t = schedule.alpha(t);
    let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    Ok(c0 * &x0.values + ct * &xt.values)
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "{what}: shape {:?} != {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn masked_count(pad_mask: &[bool]) -> usize {
    pad_mask.iter().filter(|m| **m).count()
}

/// Mean absolute difference over unmasked positions and embedding dims of
/// (pred vs target), plus the same for the x₁-restoring pair.
pub fn simple_prime_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    pred1: &Array2<f64>,
    target1: &Array2<f64>,
    pad_mask: &[bool],
) -> Result<f64> {
    let (loss, _, _) = simple_prime_loss_grad(pred, target, pred1, target1, pad_mask)?;
    Ok(loss)
}

/// As [`simple_prime_loss`], also returning ∂loss/∂pred and ∂loss/∂pred1.
/// The gradients with respect to the targets are the negations.
pub fn simple_prime_loss_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    pred1: &Array2<f64>,
    target1: &Array2<f64>,
    pad_mask: &[bool],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_shapes(pred, target, "simple_prime_loss pred/target")?;
    check_shapes(pred1, target1, "simple_prime_loss pred1/target1")?;
    check_shapes(pred, pred1, "simple_prime_loss pred/pred1")?;
    if pad_mask.len() != pred.nrows() {
        return Err(Error::argument("pad_mask length != sequence length"));
    }
    let term = |p: &Array2<f64>, q: &Array2<f64>| -> (f64, Array2<f64>) {
        let n = masked_count(pad_mask);
        let mut grad = Array2::zeros(p.raw_dim());
        if n == 0 {
            return (0.0, grad);
        }
        let denom = (n * p.ncols()) as f64;
        let mut sum = 0.0;
        for (i, keep) in pad_mask.iter().enumerate() {
            if !*keep {
                continue;
            }
            for j in 0..p.ncols() {
                let d = p[(i, j)] - q[(i, j)];
                sum += d.abs();
                grad[(i, j)] = d.signum() / denom;
            }
        }
        (sum / denom, grad)
    };
    let (l_main, g_main) = term(pred, target);
    let (l_x1, g_x1) = term(pred1, target1);
    Ok((l_main + l_x1, g_main, g_x1))
}

/// −(1/|unmasked|) Σ_i log softmax(lm_head · pred[i])[tokens[i]], the
/// rounding term anchoring continuous latents to discrete words. Softmax
/// runs over the full vocabulary.
pub fn rounding_loss(
    pred: &Array2<f64>,
    tokens: &[usize],
    lm_head: &Array2<f64>,
    pad_mask: &[bool],
) -> Result<f64> {
    let (loss, _, _) = rounding_loss_grad(pred, tokens, lm_head, pad_mask, false)?;
    Ok(loss)
}

/// As [`rounding_loss`], also returning ∂loss/∂pred and, when
/// `want_lm_head_grad` is set, ∂loss/∂lm_head (for weight-tied trainable
/// embeddings).
pub fn rounding_loss_grad(
    pred: &Array2<f64>,
    tokens: &[usize],
    lm_head: &Array2<f64>,
    pad_mask: &[bool],
    want_lm_head_grad: bool,
) -> Result<(f64, Array2<f64>, Option<Array2<f64>>)> {
    let vocab = lm_head.nrows();
    if lm_head.ncols() != pred.ncols() {
        return Err(Error::argument(format!(
            "lm_head width {} != embedding width {}",
            lm_head.ncols(),
            pred.ncols()
        )));
    }
    if tokens.len() != pred.nrows() || pad_mask.len() != pred.nrows() {
        return Err(Error::argument("tokens/pad_mask length != sequence length"));
    }
    if let Some(bad) = tokens.iter().find(|id| **id >= vocab) {
        return Err(Error::argument(format!(
            "token id {bad} out of range for vocab {vocab}"
        )));
    }

    let n = masked_count(pad_mask);
    let mut d_pred = Array2::zeros(pred.raw_dim());
    let mut d_head = want_lm_head_grad.then(|| Array2::zeros(lm_head.raw_dim()));
    if n == 0 {
        return Ok((0.0, d_pred, d_head));
    }

    let mut sum = 0.0;
    let scale = 1.0 / n as f64;
    for (i, keep) in pad_mask.iter().enumerate() {
        if !*keep {
            continue;
        }
        let xi = pred.row(i);
        let logits: Vec<f64> = (0..vocab).map(|v| lm_head.row(v).dot(&xi)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        sum += lse - logits[tokens[i]];

        for v in 0..vocab {
            let p = (logits[v] - lse).exp();
            let mut dl = p * scale;
            if v == tokens[i] {
                dl -= scale;
            }
            for j in 0..pred.ncols() {
                d_pred[(i, j)] += dl * lm_head[(v, j)];
                if let Some(dh) = d_head.as_mut() {
                    dh[(v, j)] += dl * pred[(i, j)];
                }
            }
        }
    }
    Ok((sum * scale, d_pred, d_head))
}

/// Combine the two loss terms: total = l_simple_prime + λ·l_r.
pub fn total_loss(l_simple_prime: f64, l_r: f64, lambda: f64) -> Result<LossBreakdown> {
    if !l_simple_prime.is_finite() || !l_r.is_finite() || !lambda.is_finite() {
        return Err(Error::Divergence(format!(
            "loss terms not finite: L_simple'={l_simple_prime} L_R={l_r} λ={lambda}"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::argument(format!("lambda {lambda} must be >= 0")));
    }
    Ok(LossBreakdown {
        l_simple_prime,
        l_r,
        lambda,
        total: l_simple_prime + lambda * l_r,
    })
}
