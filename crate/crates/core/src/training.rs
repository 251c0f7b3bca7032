//! The optimization loop: timestep sampling, learning-rate and λ
//! scheduling, decoupled-weight-decay Adam, early stopping, checkpoints,
//! and metrics emission.
//!
//! Everything is driven by derived RNG substreams and sequential
//! accumulation so two runs with equal seed and config produce
//! byte-identical metrics files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_tensors;
use crate::data::{CaptionRecord, FeatureFile};
use crate::denoiser::{CondFeatures, Denoiser};
use crate::diffusion::{
    rounding_loss_grad, sample_forward, simple_prime_loss_grad, total_loss, DiffusionSettings,
    LossBreakdown, PredictionMode,
};
use crate::error::{Error, Result};
use crate::infer::{bleu4, generate, score_tokens, GenConfig};
use crate::nn::Param;
use crate::rng::derive_rng;
use crate::schedule::NoiseSchedule;
use crate::textcodec::{embed, tokenize, EmbeddingTable, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    Constant,
    Linear,
    Log,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaKind {
    Constant,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    /// Training-time probability of replacing the condition with null.
    pub p_uncond: f64,
    /// Inference-time guidance weight.
    pub w: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            enabled: false,
            p_uncond: 0.2,
            w: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_max: usize,
    pub lr_kind: LrKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_kind: LambdaKind,
    pub lambda_value: f64,
    pub dynamic_c: f64,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Clip gradients at global norm 1.0 (guards the L1 kinks).
    pub grad_clip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs_max: 15,
            lr_kind: LrKind::Constant,
            lr_start: 5e-5,
            lr_end: 5e-5,
            lambda_kind: LambdaKind::Constant,
            lambda_value: 0.3,
            dynamic_c: 1.0,
            guidance: GuidanceConfig::default(),
            seed: 0,
            grad_clip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::config(
                "training.lr_start/lr_end",
                "require lr_start >= lr_end > 0",
            ));
        }
        if self.lambda_value < 0.0 {
            return Err(Error::config("training.lambda_value", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.guidance.p_uncond) {
            return Err(Error::config("guidance.p_uncond", "must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if self.dynamic_c <= 0.0 {
            return Err(Error::config("training.dynamic_c", "must be > 0"));
        }
        Ok(())
    }
}

/// Annealed learning rate at `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let frac = if total_steps == 0 {
        0.0
    } else {
        step as f64 / total_steps as f64
    };
    match cfg.lr_kind {
        LrKind::Constant => cfg.lr_start,
        LrKind::Linear => cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac,
        LrKind::Cosine => {
            cfg.lr_end
                + (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
        }
        LrKind::Log => cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac),
    }
}

/// λ for the next step from the previous step's logged losses. In dynamic
/// mode λ = L_simple′/L_R · C; a zero L_R clamps to the configured value
/// (with a warning, since the ratio is undefined there).
pub fn lambda_at(l_simple_prime: f64, l_r: f64, cfg: &TrainConfig) -> f64 {
    match cfg.lambda_kind {
        LambdaKind::Constant => cfg.lambda_value,
        LambdaKind::Dynamic => {
            if l_r == 0.0 {
                eprintln!(
                    "warning: dynamic lambda undefined at L_R = 0; clamping to {}",
                    cfg.lambda_value
                );
                cfg.lambda_value
            } else {
                l_simple_prime / l_r * cfg.dynamic_c
            }
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer (moments 0.9/0.999,
/// eps 1e-8, weight decay 0.01).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over the model parameters plus (optionally) the
    /// embedding table. `clip` rescales all gradients together when the
    /// global norm exceeds it.
    pub fn apply_step(
        &mut self,
        params: &mut BTreeMap<String, Param>,
        mut embedding: Option<(&mut Array2<f64>, &Array2<f64>)>,
        lr: f64,
        clip: Option<f64>,
    ) {
        let mut sq_norm: f64 = params.values().map(|p| p.grad.mapv(|g| g * g).sum()).sum();
        if let Some((_, g)) = &embedding {
            sq_norm += g.mapv(|x| x * x).sum();
        }
        let norm = sq_norm.sqrt();
        let scale = match clip {
            Some(limit) if norm > limit => limit / norm,
            _ => 1.0,
        };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        let mut one = |name: &str, value: &mut Array2<f64>, grad: &Array2<f64>| {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.raw_dim()));
            for ((mv, vv), (val, g)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(value.iter_mut().zip(grad.iter()))
            {
                let g = g * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *val -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *val);
            }
        };

        // map iteration is name-sorted, keeping update order deterministic
        let names: Vec<String> = params.keys().cloned().collect();
        for name in names {
            let p = params.get_mut(&name).expect("known name");
            let Param { value, grad } = p;
            one(&name, value, grad);
        }
        if let Some((value, grad)) = embedding.take() {
            one("embed.table", value, grad);
        }
    }
}

/// Per-example losses and gradients without any parameter update; also
/// used for validation (gradients skipped there).
#[allow(clippy::too_many_arguments)]
fn example_losses(
    model: &mut Denoiser,
    embed_table: &EmbeddingTable,
    embed_grad: Option<&mut Array2<f64>>,
    vocab: &Vocab,
    schedule: &NoiseSchedule,
    diff: &DiffusionSettings,
    cfg: &TrainConfig,
    caption: &str,
    cond: &CondFeatures,
    rng: &mut ChaCha8Rng,
    with_grad: bool,
    lambda: f64,
) -> Result<(f64, f64)> {
    let l = model.config.l;
    let d = model.config.d_word;
    let (tokens, mask) = tokenize(caption, l, vocab);
    let x0 = embed(&tokens, &mask, embed_table)?;

    // draw t from the accelerated subset, then the noise
    let subset = &schedule.step_subset;
    let t = subset[rng.random_range(0..subset.len())];
    let eps = Array2::from_shape_fn((l, d), |_| rng.sample::<f64, _>(StandardNormal));
    let x_t = sample_forward(&x0, t, &eps, schedule, diff.noise_coeff)?;

    // condition dropout only applies on the training path
    let cond = if with_grad
        && cfg.guidance.enabled
        && rng.random_range(0.0..1.0) < cfg.guidance.p_uncond
    {
        cond.to_null()
    } else {
        cond.clone()
    };

    // main prediction target
    let target = match diff.prediction {
        PredictionMode::X0 => x0.values.clone(),
        PredictionMode::XTMinusN => {
            let t_back = t.saturating_sub(diff.n_back);
            if t_back == 0 {
                x0.values.clone()
            } else {
                sample_forward(&x0, t_back, &eps, schedule, diff.noise_coeff)?.values
            }
        }
    };

    let (pred, trace) = model.forward_traced(&x_t, &cond)?;

    // x₁-restoring branch
    let x1_active = diff.x1_every_step || t == 1;
    let x1_data = if x1_active {
        let eps1 = Array2::from_shape_fn((l, d), |_| rng.sample::<f64, _>(StandardNormal));
        let x1 = sample_forward(&x0, 1, &eps1, schedule, diff.noise_coeff)?;
        let (pred1, trace1) = model.forward_traced(&x1, &cond)?;
        Some((pred1, trace1))
    } else {
        None
    };
    let zeros = Array2::zeros((l, d));
    let (pred1_ref, target1_ref) = match &x1_data {
        Some((p1, _)) => (p1, &x0.values),
        None => (&zeros, &zeros),
    };

    let (l_simple, d_pred_simple, d_pred1) =
        simple_prime_loss_grad(&pred, &target, pred1_ref, target1_ref, &mask)?;
    let trainable = !embed_table.frozen;
    let (l_r, d_pred_round, d_lm_head) = rounding_loss_grad(
        &pred,
        &tokens,
        embed_table.lm_head(),
        &mask,
        with_grad && trainable,
    )?;

    let breakdown = total_loss(l_simple, l_r, lambda)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Divergence("non-finite training loss".into()));
    }

    if with_grad {
        let d_pred_total = &d_pred_simple + &(&d_pred_round * lambda);
        let dx_t = model.backward(&trace, &d_pred_total);
        let dx_1 = x1_data
            .as_ref()
            .map(|(_, trace1)| model.backward(trace1, &d_pred1));

        if trainable {
            if let Some(grad) = embed_grad {
                // input paths: x_t (and x_1) are linear in x0
                let sqrt_ab_t = schedule.alpha_bar(t).sqrt();
                let mut d_x0 = dx_t * sqrt_ab_t;
                if let Some(dx1) = dx_1 {
                    d_x0 += &(dx1 * schedule.alpha_bar(1).sqrt());
                }
                // target paths: d/d target of the L1 terms is the negation
                match diff.prediction {
                    PredictionMode::X0 => d_x0 -= &d_pred_simple,
                    PredictionMode::XTMinusN => {
                        let t_back = t.saturating_sub(diff.n_back);
                        let scale = if t_back == 0 {
                            1.0
                        } else {
                            schedule.alpha_bar(t_back).sqrt()
                        };
                        d_x0 -= &(&d_pred_simple * scale);
                    }
                }
                if x1_data.is_some() {
                    d_x0 -= &d_pred1;
                }
                // pad rows still feed attention, so every position scatters
                for (i, id) in tokens.iter().enumerate() {
                    let mut row = grad.row_mut(*id);
                    row += &d_x0.row(i);
                }
                if let Some(dlm) = d_lm_head {
                    *grad += &(dlm * lambda);
                }
            }
        }
    }

    Ok((l_simple, l_r))
}

/// Mutable training state threaded through steps.
pub struct TrainContext<'a> {
    pub model: &'a mut Denoiser,
    pub embed: &'a mut EmbeddingTable,
    pub opt: &'a mut AdamW,
    pub schedule: &'a NoiseSchedule,
    pub features: &'a FeatureFile,
    pub vocab: &'a Vocab,
    pub diff: &'a DiffusionSettings,
}

/// One optimizer update over a batch of (record, caption) index pairs.
/// Per example: draw t from the schedule subset, draw ε, build x_t, apply
/// condition dropout when guidance is enabled, forward, compute the
/// compound loss, and accumulate gradients; a single update then applies
/// the batch-mean gradient. Returns the pre-update batch-mean losses.
pub fn train_step(
    ctx: &mut TrainContext<'_>,
    records: &[CaptionRecord],
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
    lr: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::argument("train_step needs a non-empty batch"));
    }
    ctx.model.zero_grads();
    let mut embed_grad = Array2::zeros(ctx.embed.matrix.raw_dim());
    let mut batch_ls = 0.0;
    let mut batch_lr = 0.0;
    for (ri, ci) in batch {
        let record = &records[*ri];
        let cond = CondFeatures::image(ctx.features.row_f64(record.feature_row as usize));
        let (ls, lr_loss) = example_losses(
            ctx.model,
            ctx.embed,
            Some(&mut embed_grad),
            ctx.vocab,
            ctx.schedule,
            ctx.diff,
            cfg,
            &record.captions[*ci],
            &cond,
            rng,
            true,
            lambda,
        )?;
        batch_ls += ls;
        batch_lr += lr_loss;
    }
    let inv = 1.0 / batch.len() as f64;
    for p in ctx.model.params.values_mut() {
        p.grad *= inv;
    }
    embed_grad *= inv;
    let breakdown = total_loss(batch_ls * inv, batch_lr * inv, lambda)?;

    let clip = cfg.grad_clip.then_some(1.0);
    let embedding = if ctx.embed.frozen {
        None
    } else {
        Some((&mut ctx.embed.matrix, &embed_grad))
    };
    ctx.opt.apply_step(&mut ctx.model.params, embedding, lr, clip);
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub train_l_simple_prime: f64,
    pub train_l_r: f64,
    pub val_l_simple_prime: f64,
    pub val_l_r: f64,
    pub val_bleu4: f64,
}

#[derive(Debug)]
pub struct FitReport {
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
}

pub struct FitArgs<'a> {
    pub train: &'a [CaptionRecord],
    pub val: &'a [CaptionRecord],
    pub features: &'a FeatureFile,
    pub vocab: &'a Vocab,
    pub schedule: &'a NoiseSchedule,
    pub diff: &'a DiffusionSettings,
    pub gen: &'a GenConfig,
    pub out_dir: &'a Path,
}

/// All tensors a checkpoint carries: model weights, the embedding table,
/// and optimizer state.
pub fn checkpoint_tensors(
    model: &Denoiser,
    embed_table: &EmbeddingTable,
    opt: &AdamW,
) -> BTreeMap<String, Array2<f64>> {
    let mut tensors = BTreeMap::new();
    for (name, p) in &model.params {
        tensors.insert(name.clone(), p.value.clone());
    }
    tensors.insert("embed.table".to_string(), embed_table.matrix.clone());
    for (name, m) in &opt.m {
        tensors.insert(format!("opt.m/{name}"), m.clone());
    }
    for (name, v) in &opt.v {
        tensors.insert(format!("opt.v/{name}"), v.clone());
    }
    tensors.insert(
        "opt.step".to_string(),
        Array2::from_elem((1, 1), opt.step as f64),
    );
    tensors
}

/// Inverse of [`checkpoint_tensors`]; missing optimizer entries leave a
/// fresh optimizer (weights-only checkpoints stay loadable).
pub fn restore_from_tensors(
    model: &mut Denoiser,
    embed_table: &mut EmbeddingTable,
    opt: &mut AdamW,
    tensors: &BTreeMap<String, Array2<f64>>,
) -> Result<()> {
    for (name, p) in model.params.iter_mut() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::argument(format!("checkpoint missing tensor `{name}`")))?;
        if t.raw_dim() != p.value.raw_dim() {
            return Err(Error::argument(format!(
                "checkpoint tensor `{name}` shape {:?} != expected {:?}",
                t.dim(),
                p.value.dim()
            )));
        }
        p.value.assign(t);
    }
    let table = tensors
        .get("embed.table")
        .ok_or_else(|| Error::argument("checkpoint missing tensor `embed.table`"))?;
    if table.raw_dim() != embed_table.matrix.raw_dim() {
        return Err(Error::argument(format!(
            "checkpoint embed.table shape {:?} != expected {:?}",
            table.dim(),
            embed_table.matrix.dim()
        )));
    }
    embed_table.matrix.assign(table);

    opt.m.clear();
    opt.v.clear();
    opt.step = 0;
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m/") {
            opt.m.insert(rest.to_string(), t.clone());
        } else if let Some(rest) = name.strip_prefix("opt.v/") {
            opt.v.insert(rest.to_string(), t.clone());
        }
    }
    if let Some(step) = tensors.get("opt.step") {
        opt.step = step[(0, 0)] as u64;
    }
    Ok(())
}

fn fmt_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// The full training loop. Writes `metrics.csv` (one row per epoch),
/// `steps.csv` (one row per optimizer step), and a final checkpoint under
/// `out_dir/checkpoints/`; stops early when end-of-epoch mean validation
/// total loss exceeds the training mean, restoring the best-validation
/// weights.
pub fn fit(
    args: &FitArgs<'_>,
    model: &mut Denoiser,
    embed_table: &mut EmbeddingTable,
    opt: &mut AdamW,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if args.train.is_empty() || args.val.is_empty() {
        return Err(Error::argument("fit needs non-empty train and val splits"));
    }
    let ckpt_dir = args.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let final_base = ckpt_dir.join("final");
    let mut report = FitReport {
        epochs_run: 0,
        stopped_early: false,
        best_epoch: 0,
        metrics: Vec::new(),
        final_checkpoint: final_base.with_extension("bin"),
    };
    if cfg.epochs_max == 0 {
        save_tensors(&final_base, &checkpoint_tensors(model, embed_table, opt))?;
        return Ok(report);
    }

    let metrics_path = args.out_dir.join("metrics.csv");
    let steps_path = args.out_dir.join("steps.csv");
    let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut steps_file = fs::File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    writeln!(
        metrics_file,
        "epoch,lr,lambda,train_l_simple_prime,train_l_r,val_l_simple_prime,val_l_r,val_bleu4"
    )
    .map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(steps_file, "step,lr,lambda,l_simple_prime,l_r,total")
        .map_err(|e| Error::io(&steps_path, e))?;

    // (record, caption) pairs in a fixed base order, reshuffled per epoch
    let examples: Vec<(usize, usize)> = args
        .train
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| (0..r.captions.len()).map(move |ci| (ri, ci)))
        .collect();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs_max * steps_per_epoch).max(1);

    let mut prev: Option<LossBreakdown> = None;
    let mut global_step = 0usize;
    let mut best: Option<(f64, BTreeMap<String, Param>, Array2<f64>, usize)> = None;

    for epoch in 1..=cfg.epochs_max {
        let mut order = examples.clone();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut derive_rng(cfg.seed, "epoch.order", epoch as u64));
        }

        let mut train_ls_sum = 0.0;
        let mut train_lr_sum = 0.0;
        let mut train_count = 0usize;
        let mut last_lr = cfg.lr_start;
        let mut last_lambda = cfg.lambda_value;

        for batch in order.chunks(cfg.batch_size) {
            let lambda = match &prev {
                None => cfg.lambda_value,
                Some(b) => lambda_at(b.l_simple_prime, b.l_r, cfg),
            };
            let lr = lr_at(global_step, total_steps.saturating_sub(1).max(1), cfg);
            let mut rng = derive_rng(cfg.seed, "train.step", global_step as u64);

            let mut ctx = TrainContext {
                model,
                embed: embed_table,
                opt,
                schedule: args.schedule,
                features: args.features,
                vocab: args.vocab,
                diff: args.diff,
            };
            let breakdown = train_step(&mut ctx, args.train, batch, cfg, lr, lambda, &mut rng)?;

            writeln!(
                steps_file,
                "{}",
                fmt_row(&[
                    global_step as f64,
                    lr,
                    lambda,
                    breakdown.l_simple_prime,
                    breakdown.l_r,
                    breakdown.total,
                ])
            )
            .map_err(|e| Error::io(&steps_path, e))?;

            train_ls_sum += breakdown.l_simple_prime * batch.len() as f64;
            train_lr_sum += breakdown.l_r * batch.len() as f64;
            train_count += batch.len();
            last_lr = lr;
            last_lambda = lambda;
            prev = Some(breakdown);
            global_step += 1;
        }

        let train_ls = train_ls_sum / train_count as f64;
        let train_lr = train_lr_sum / train_count as f64;

        // validation losses under a fixed per-epoch stream, no updates
        let mut val_rng = derive_rng(cfg.seed, "val.eps", epoch as u64);
        let mut val_ls_sum = 0.0;
        let mut val_lr_sum = 0.0;
        let mut val_count = 0usize;
        for record in args.val {
            let cond = CondFeatures::image(args.features.row_f64(record.feature_row as usize));
            for caption in &record.captions {
                let (ls, lr_loss) = example_losses(
                    model,
                    embed_table,
                    None,
                    args.vocab,
                    args.schedule,
                    args.diff,
                    cfg,
                    caption,
                    &cond,
                    &mut val_rng,
                    false,
                    last_lambda,
                )?;
                val_ls_sum += ls;
                val_lr_sum += lr_loss;
                val_count += 1;
            }
        }
        let val_ls = val_ls_sum / val_count as f64;
        let val_lr = val_lr_sum / val_count as f64;

        // BLEU-4 of deterministic generations against the val references
        let mut cands = Vec::with_capacity(args.val.len());
        let mut refs = Vec::with_capacity(args.val.len());
        for (vi, record) in args.val.iter().enumerate() {
            let cond = CondFeatures::image(args.features.row_f64(record.feature_row as usize));
            let mut gen_rng = derive_rng(
                cfg.seed,
                "gen.val",
                ((epoch as u64) << 32) | vi as u64,
            );
            let caption = generate(
                &cond,
                model,
                args.schedule,
                embed_table,
                args.vocab,
                args.gen,
                args.diff.noise_coeff,
                &mut gen_rng,
            )?;
            cands.push(score_tokens(&caption));
            refs.push(record.captions.iter().map(|c| score_tokens(c)).collect());
        }
        let val_bleu = bleu4(&cands, &refs)?.bleu4;

        let row = EpochMetrics {
            epoch,
            lr: last_lr,
            lambda: last_lambda,
            train_l_simple_prime: train_ls,
            train_l_r: train_lr,
            val_l_simple_prime: val_ls,
            val_l_r: val_lr,
            val_bleu4: val_bleu,
        };
        writeln!(
            metrics_file,
            "{},{}",
            epoch,
            fmt_row(&[
                row.lr,
                row.lambda,
                row.train_l_simple_prime,
                row.train_l_r,
                row.val_l_simple_prime,
                row.val_l_r,
                row.val_bleu4,
            ])
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        report.metrics.push(row);
        report.epochs_run = epoch;

        let val_total = val_ls + last_lambda * val_lr;
        let train_total = train_ls + last_lambda * train_lr;
        let is_best = best.as_ref().map(|(b, ..)| val_total < *b).unwrap_or(true);
        if is_best {
            best = Some((val_total, model.params.clone(), embed_table.matrix.clone(), epoch));
        }
        if val_total > train_total {
            report.stopped_early = true;
            break;
        }
    }

    if let Some((_, params, table, epoch)) = best {
        model.params = params;
        embed_table.matrix = table;
        report.best_epoch = epoch;
    }
    save_tensors(&final_base, &checkpoint_tensors(model, embed_table, opt))?;
    Ok(report)
}
