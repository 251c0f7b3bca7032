//! The trainable network: fuses noised caption embeddings with condition
//! features and a timestep signal, then predicts the target embedding
//! sequence through a pre-norm transformer encoder.
//!
//! Parameters live in a name-keyed map so checkpoints can serialize them
//! alphabetically; backward walks the cached forward trace and
//! accumulates into each parameter's grad buffer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentSeq;
use crate::error::{Error, Result};
use crate::nn::{
    attention_backward, attention_forward, gelu_backward, gelu_forward, layernorm_backward,
    layernorm_forward, linear_forward, timestep_embedding, AttnCache, AttnGrads, AttnWeights,
    LayerNormCache, Param,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Condition vectors appended as trailing tokens, with segment
    /// embeddings distinguishing caption from condition positions.
    Concat,
    /// Condition vectors broadcast-added to every caption position.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_word: usize,
    pub d_clip: usize,
    pub fusion: Fusion,
    /// Caption sequence length (max output length).
    pub l: usize,
    pub vocab: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 4,
            heads: 4,
            d_word: 32,
            d_clip: 16,
            fusion: Fusion::Concat,
            l: 16,
            vocab: 0, // filled in from the vocab file at load time
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_word % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                "heads must be nonzero and divide d_word",
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("model.layers", "at least one layer required"));
        }
        if self.l == 0 {
            return Err(Error::config("model.l", "sequence length must be positive"));
        }
        if self.d_clip == 0 {
            return Err(Error::config("model.d_clip", "feature width must be positive"));
        }
        Ok(())
    }
}

/// Precomputed condition features for one example. `is_null` marks the
/// unconditional branch: every provided vector is replaced by the learned
/// null embedding at fusion time, preserving token counts across branches.
#[derive(Debug, Clone)]
pub struct CondFeatures {
    pub image_vec: Array1<f64>,
    pub text_vec: Option<Array1<f64>>,
    pub is_null: bool,
}

impl CondFeatures {
    pub fn image(image_vec: Array1<f64>) -> Self {
        CondFeatures {
            image_vec,
            text_vec: None,
            is_null: false,
        }
    }

    /// The unconditional twin: same vector count, null contents.
    pub fn to_null(&self) -> Self {
        CondFeatures {
            image_vec: self.image_vec.clone(),
            text_vec: self.text_vec.clone(),
            is_null: true,
        }
    }
}

/// Cache of one condition-projection MLP evaluation.
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

enum CondTrace {
    Null { count: usize },
    Projected { img: MlpCache, txt: Option<MlpCache> },
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    ffn_in: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

/// Everything backward needs from one forward evaluation.
pub struct ForwardTrace {
    t: usize,
    caption_len: usize,
    fused_len: usize,
    cond: CondTrace,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_ln_out: Array2<f64>,
}

impl ForwardTrace {
    pub fn timestep(&self) -> usize {
        self.t
    }
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: BTreeMap<String, Param>,
    forward_count: AtomicU64,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Denoiser {
            config: self.config.clone(),
            params: self.params.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

/// Append condition tokens (concat) or broadcast-add them (add); returns
/// the fused sequence and the output positions to discard.
pub fn fuse(
    x_t: &Array2<f64>,
    cond_vecs: &[Array1<f64>],
    method: Fusion,
    seg_caption: Option<&Array2<f64>>,
    seg_cond: Option<&Array2<f64>>,
) -> (Array2<f64>, Vec<usize>) {
    let (l, d) = x_t.dim();
    match method {
        Fusion::Concat => {
            let n = l + cond_vecs.len();
            let mut fused = Array2::zeros((n, d));
            fused.slice_mut(ndarray::s![..l, ..]).assign(x_t);
            if let Some(seg) = seg_caption {
                for i in 0..l {
                    let mut row = fused.row_mut(i);
                    row += &seg.row(0);
                }
            }
            for (j, v) in cond_vecs.iter().enumerate() {
                let mut row = fused.row_mut(l + j);
                row.assign(v);
                if let Some(seg) = seg_cond {
                    row += &seg.row(0);
                }
            }
            (fused, (l..n).collect())
        }
        Fusion::Add => {
            let mut fused = x_t.clone();
            for v in cond_vecs {
                for mut row in fused.rows_mut() {
                    row += v;
                }
            }
            (fused, Vec::new())
        }
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_word;
        let mut params = BTreeMap::new();
        let put = |map: &mut BTreeMap<String, Param>, name: &str, p: Param| {
            map.insert(name.to_string(), p);
        };

        put(&mut params, "cond.null", Param::xavier(1, d, rng));
        for side in ["img", "txt"] {
            put(&mut params, &format!("cond.proj_{side}.w1"), Param::xavier(config.d_clip, d, rng));
            put(&mut params, &format!("cond.proj_{side}.b1"), Param::zeros(1, d));
            put(&mut params, &format!("cond.proj_{side}.w2"), Param::xavier(d, d, rng));
            put(&mut params, &format!("cond.proj_{side}.b2"), Param::zeros(1, d));
        }
        put(&mut params, "fuse.seg_caption", Param::xavier(1, d, rng));
        put(&mut params, "fuse.seg_cond", Param::xavier(1, d, rng));
        // room for up to two appended condition tokens
        put(&mut params, "pos", Param::xavier(config.l + 2, d, rng));
        for i in 0..config.layers {
            let b = format!("block{i:02}");
            put(&mut params, &format!("{b}.ln1.g"), Param::ones(1, d));
            put(&mut params, &format!("{b}.ln1.b"), Param::zeros(1, d));
            for m in ["wq", "wk", "wv", "wo"] {
                put(&mut params, &format!("{b}.attn.{m}"), Param::xavier(d, d, rng));
            }
            for m in ["bq", "bk", "bv", "bo"] {
                put(&mut params, &format!("{b}.attn.{m}"), Param::zeros(1, d));
            }
            put(&mut params, &format!("{b}.ln2.g"), Param::ones(1, d));
            put(&mut params, &format!("{b}.ln2.b"), Param::zeros(1, d));
            put(&mut params, &format!("{b}.ffn.w1"), Param::xavier(d, 4 * d, rng));
            put(&mut params, &format!("{b}.ffn.b1"), Param::zeros(1, 4 * d));
            put(&mut params, &format!("{b}.ffn.w2"), Param::xavier(4 * d, d, rng));
            put(&mut params, &format!("{b}.ffn.b2"), Param::zeros(1, d));
        }
        put(&mut params, "final_ln.g", Param::ones(1, d));
        put(&mut params, "final_ln.b", Param::zeros(1, d));
        // scaled-down output projection: initial predictions start near the
        // origin instead of at activation scale, which is far from the
        // unit-norm embedding targets
        let mut out_w = Param::xavier(d, d, rng);
        out_w.value *= 0.05;
        put(&mut params, "out.w", out_w);
        put(&mut params, "out.b", Param::zeros(1, d));

        Ok(Denoiser {
            config,
            params,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    fn value(&self, name: &str) -> &Array2<f64> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing param {name}"))
            .value
    }

    fn add_grad(&mut self, name: &str, g: &Array2<f64>) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing param {name}"));
        p.grad += g;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    fn mlp_forward(&self, side: &str, input: &Array1<f64>) -> MlpCache {
        let x = input.clone().insert_axis(Axis(0));
        let pre = linear_forward(
            &x,
            self.value(&format!("cond.proj_{side}.w1")),
            self.value(&format!("cond.proj_{side}.b1")),
        );
        let act = gelu_forward(&pre);
        MlpCache { input: x, pre, act }
    }

    fn mlp_output(&self, side: &str, cache: &MlpCache) -> Array1<f64> {
        linear_forward(
            &cache.act,
            self.value(&format!("cond.proj_{side}.w2")),
            self.value(&format!("cond.proj_{side}.b2")),
        )
        .remove_axis(Axis(0))
    }

    fn mlp_backward(&mut self, side: &str, cache: &MlpCache, dy: &Array1<f64>) {
        let dy2 = dy.clone().insert_axis(Axis(0));
        let dw2 = cache.act.t().dot(&dy2);
        let db2 = dy2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dact = dy2.dot(&self.value(&format!("cond.proj_{side}.w2")).t());
        let dpre = gelu_backward(&cache.pre, &dact);
        let dw1 = cache.input.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.add_grad(&format!("cond.proj_{side}.w2"), &dw2);
        self.add_grad(&format!("cond.proj_{side}.b2"), &db2);
        self.add_grad(&format!("cond.proj_{side}.w1"), &dw1);
        self.add_grad(&format!("cond.proj_{side}.b1"), &db1);
    }

    /// One projected D_word vector per provided feature; null bypasses
    /// the projection entirely.
    pub fn project_condition(&self, cond: &CondFeatures) -> Result<Vec<Array1<f64>>> {
        Ok(self.project_condition_traced(cond)?.0)
    }

    fn project_condition_traced(&self, cond: &CondFeatures) -> Result<(Vec<Array1<f64>>, CondTrace)> {
        let mut count = 1;
        if cond.text_vec.is_some() {
            count = 2;
        }
        if cond.is_null {
            let null = self.value("cond.null").row(0).to_owned();
            return Ok((vec![null; count], CondTrace::Null { count }));
        }
        if cond.image_vec.len() != self.config.d_clip {
            return Err(Error::argument(format!(
                "image feature width {} != configured {}",
                cond.image_vec.len(),
                self.config.d_clip
            )));
        }
        let img_cache = self.mlp_forward("img", &cond.image_vec);
        let mut vecs = vec![self.mlp_output("img", &img_cache)];
        let txt_cache = match &cond.text_vec {
            Some(tv) => {
                if tv.len() != self.config.d_clip {
                    return Err(Error::argument(format!(
                        "text feature width {} != configured {}",
                        tv.len(),
                        self.config.d_clip
                    )));
                }
                let c = self.mlp_forward("txt", tv);
                vecs.push(self.mlp_output("txt", &c));
                Some(c)
            }
            None => None,
        };
        Ok((
            vecs,
            CondTrace::Projected {
                img: img_cache,
                txt: txt_cache,
            },
        ))
    }

    fn attn_weights(&self, block: &str) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.value(&format!("{block}.attn.wq")),
            bq: self.value(&format!("{block}.attn.bq")),
            wk: self.value(&format!("{block}.attn.wk")),
            bk: self.value(&format!("{block}.attn.bk")),
            wv: self.value(&format!("{block}.attn.wv")),
            bv: self.value(&format!("{block}.attn.bv")),
            wo: self.value(&format!("{block}.attn.wo")),
            bo: self.value(&format!("{block}.attn.bo")),
        }
    }

    /// Predict the target embedding sequence; returns the L × D_word
    /// prediction and the trace backward needs.
    pub fn forward_traced(
        &self,
        x_t: &LatentSeq,
        cond: &CondFeatures,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        if x_t.t == 0 {
            return Err(Error::argument("forward requires a noised latent (t >= 1)"));
        }
        if x_t.values.nrows() != self.config.l || x_t.values.ncols() != self.config.d_word {
            return Err(Error::argument(format!(
                "latent shape {:?} != configured {}x{}",
                x_t.values.dim(),
                self.config.l,
                self.config.d_word
            )));
        }
        let (cond_vecs, cond_trace) = self.project_condition_traced(cond)?;
        let (seg_caption, seg_cond) = match self.config.fusion {
            Fusion::Concat => (
                Some(self.value("fuse.seg_caption")),
                Some(self.value("fuse.seg_cond")),
            ),
            Fusion::Add => (None, None),
        };
        let (mut h, discard) = fuse(
            &x_t.values,
            &cond_vecs,
            self.config.fusion,
            seg_caption,
            seg_cond,
        );
        let n = h.nrows();
        let pos = self.value("pos");
        debug_assert!(n <= pos.nrows());
        h += &pos.slice(ndarray::s![..n, ..]);
        let temb = timestep_embedding(x_t.t, self.config.d_word);
        for mut row in h.rows_mut() {
            row += &temb;
        }

        let mut blocks = Vec::with_capacity(self.config.layers);
        for i in 0..self.config.layers {
            let b = format!("block{i:02}");
            let (ln1_out, ln1) = layernorm_forward(
                &h,
                self.value(&format!("{b}.ln1.g")),
                self.value(&format!("{b}.ln1.b")),
            );
            let (attn_out, attn) = attention_forward(&ln1_out, &self.attn_weights(&b), self.config.heads);
            let a = &h + &attn_out;
            let (ln2_out, ln2) = layernorm_forward(
                &a,
                self.value(&format!("{b}.ln2.g")),
                self.value(&format!("{b}.ln2.b")),
            );
            let ffn_pre = linear_forward(
                &ln2_out,
                self.value(&format!("{b}.ffn.w1")),
                self.value(&format!("{b}.ffn.b1")),
            );
            let ffn_act = gelu_forward(&ffn_pre);
            let ffn_out = linear_forward(
                &ffn_act,
                self.value(&format!("{b}.ffn.w2")),
                self.value(&format!("{b}.ffn.b2")),
            );
            h = &a + &ffn_out;
            blocks.push(BlockCache {
                ln1,
                attn,
                ln2,
                ffn_in: ln2_out,
                ffn_pre,
                ffn_act,
            });
        }

        let (final_ln_out, final_ln) =
            layernorm_forward(&h, self.value("final_ln.g"), self.value("final_ln.b"));
        let out = linear_forward(&final_ln_out, self.value("out.w"), self.value("out.b"));

        let pred = out.slice(ndarray::s![..self.config.l, ..]).to_owned();
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite activation in forward at t={}",
                x_t.t
            )));
        }
        debug_assert!(discard.iter().all(|p| *p >= self.config.l));
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        Ok((
            pred,
            ForwardTrace {
                t: x_t.t,
                caption_len: self.config.l,
                fused_len: n,
                cond: cond_trace,
                blocks,
                final_ln,
                final_ln_out,
            },
        ))
    }

    pub fn forward(&self, x_t: &LatentSeq, cond: &CondFeatures) -> Result<Array2<f64>> {
        Ok(self.forward_traced(x_t, cond)?.0)
    }

    /// Classifier-free combination (1+w)·cond − w·null. w = 0 short-circuits
    /// to a single conditional pass, so guidance-off costs one forward.
    pub fn guided_forward(
        &self,
        x_t: &LatentSeq,
        cond: &CondFeatures,
        w: f64,
    ) -> Result<Array2<f64>> {
        if w < 0.0 {
            return Err(Error::argument("guidance weight must be >= 0"));
        }
        let cond_out = self.forward(x_t, cond)?;
        if w == 0.0 {
            return Ok(cond_out);
        }
        let null_out = self.forward(x_t, &cond.to_null())?;
        Ok(cond_out * (1.0 + w) - null_out * w)
    }

    /// Accumulate gradients for one traced forward. `d_pred` is the loss
    /// gradient at the caption positions; condition output positions never
    /// receive loss gradient. Returns ∂loss/∂x_t (caption rows), which
    /// trainable embeddings need.
    pub fn backward(&mut self, trace: &ForwardTrace, d_pred: &Array2<f64>) -> Array2<f64> {
        assert_eq!(d_pred.nrows(), trace.caption_len, "d_pred rows");
        let d = self.config.d_word;
        let n = trace.fused_len;

        let mut d_out = Array2::zeros((n, d));
        d_out
            .slice_mut(ndarray::s![..trace.caption_len, ..])
            .assign(d_pred);

        // output head
        let dw_out = trace.final_ln_out.t().dot(&d_out);
        let db_out = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dh = d_out.dot(&self.value("out.w").t());
        self.add_grad("out.w", &dw_out);
        self.add_grad("out.b", &db_out);

        // final layer norm
        let mut dg = Array2::zeros((1, d));
        let mut db = Array2::zeros((1, d));
        dh = layernorm_backward(&trace.final_ln, self.value("final_ln.g"), &dh, &mut dg, &mut db);
        self.add_grad("final_ln.g", &dg);
        self.add_grad("final_ln.b", &db);

        // blocks in reverse
        for (i, cache) in trace.blocks.iter().enumerate().rev() {
            let b = format!("block{i:02}");

            // h = a + ffn_out: gradient splits into the residual and the ffn path
            let d_ffn_out = dh.clone();
            let dw2 = cache.ffn_act.t().dot(&d_ffn_out);
            let db2 = d_ffn_out.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_act = d_ffn_out.dot(&self.value(&format!("{b}.ffn.w2")).t());
            let d_pre = gelu_backward(&cache.ffn_pre, &d_act);
            let dw1 = cache.ffn_in.t().dot(&d_pre);
            let db1 = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_ln2_out = d_pre.dot(&self.value(&format!("{b}.ffn.w1")).t());
            self.add_grad(&format!("{b}.ffn.w2"), &dw2);
            self.add_grad(&format!("{b}.ffn.b2"), &db2);
            self.add_grad(&format!("{b}.ffn.w1"), &dw1);
            self.add_grad(&format!("{b}.ffn.b1"), &db1);

            let mut dg2 = Array2::zeros((1, d));
            let mut dbeta2 = Array2::zeros((1, d));
            let d_a_from_ln2 = layernorm_backward(
                &cache.ln2,
                self.value(&format!("{b}.ln2.g")),
                &d_ln2_out,
                &mut dg2,
                &mut dbeta2,
            );
            self.add_grad(&format!("{b}.ln2.g"), &dg2);
            self.add_grad(&format!("{b}.ln2.b"), &dbeta2);
            let d_a = dh + d_a_from_ln2;

            // a = h_in + attn_out
            let d_attn_out = d_a.clone();
            let mut gm: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((d, d))).collect();
            let mut gb: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((1, d))).collect();
            let d_ln1_out = {
                let w = self.attn_weights(&b);
                let [gm0, gm1, gm2, gm3] = gm.get_disjoint_mut([0, 1, 2, 3]).unwrap();
                let [gb0, gb1, gb2, gb3] = gb.get_disjoint_mut([0, 1, 2, 3]).unwrap();
                let mut grads = AttnGrads {
                    wq: gm0,
                    bq: gb0,
                    wk: gm1,
                    bk: gb1,
                    wv: gm2,
                    bv: gb2,
                    wo: gm3,
                    bo: gb3,
                };
                attention_backward(&cache.attn, &w, &mut grads, &d_attn_out, self.config.heads)
            };
            for (name, g) in ["wq", "wk", "wv", "wo"].iter().zip(&gm) {
                self.add_grad(&format!("{b}.attn.{name}"), g);
            }
            for (name, g) in ["bq", "bk", "bv", "bo"].iter().zip(&gb) {
                self.add_grad(&format!("{b}.attn.{name}"), g);
            }

            let mut dg1 = Array2::zeros((1, d));
            let mut dbeta1 = Array2::zeros((1, d));
            let d_h_from_ln1 = layernorm_backward(
                &cache.ln1,
                self.value(&format!("{b}.ln1.g")),
                &d_ln1_out,
                &mut dg1,
                &mut dbeta1,
            );
            self.add_grad(&format!("{b}.ln1.g"), &dg1);
            self.add_grad(&format!("{b}.ln1.b"), &dbeta1);
            dh = d_a + d_h_from_ln1;
        }

        // positional embeddings (timestep embedding is fixed, no gradient)
        let mut d_pos = Array2::zeros(self.value("pos").raw_dim());
        d_pos.slice_mut(ndarray::s![..n, ..]).assign(&dh);
        self.add_grad("pos", &d_pos);

        // fusion
        let l = trace.caption_len;
        let d_cond_vecs: Vec<Array1<f64>> = match self.config.fusion {
            Fusion::Concat => {
                let d_caption_sum = dh
                    .slice(ndarray::s![..l, ..])
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                let d_cond_sum = dh
                    .slice(ndarray::s![l.., ..])
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                self.add_grad("fuse.seg_caption", &d_caption_sum);
                self.add_grad("fuse.seg_cond", &d_cond_sum);
                (l..n).map(|i| dh.row(i).to_owned()).collect()
            }
            Fusion::Add => {
                let broadcast = dh.sum_axis(Axis(0));
                let count = match &trace.cond {
                    CondTrace::Null { count } => *count,
                    CondTrace::Projected { txt, .. } => 1 + usize::from(txt.is_some()),
                };
                vec![broadcast; count]
            }
        };

        match &trace.cond {
            CondTrace::Null { count } => {
                let mut total = Array2::zeros((1, d));
                for g in d_cond_vecs.iter().take(*count) {
                    total += &g.clone().insert_axis(Axis(0));
                }
                self.add_grad("cond.null", &total);
            }
            CondTrace::Projected { img, txt } => {
                self.mlp_backward("img", img, &d_cond_vecs[0]);
                if let Some(t) = txt {
                    self.mlp_backward("txt", t, &d_cond_vecs[1]);
                }
            }
        }

        // fused caption row = x_t row + additive embeddings, so the input
        // gradient is the caption slice of dh
        dh.slice(ndarray::s![..l, ..]).to_owned()
    }
}
