//! Windowed encoder-decoder over exercise, response and lecture streams.
//!
//! The response stream is encoded by the user encoder, the exercise stream
//! is decoded against it, and lectures get their own encoder. Two attention
//! pools, a GRU summary of the response stream, the decoder state and the
//! global statistics feed a three-layer head. Every component is causal, so
//! the dense per-position output at step `k` is the prediction for the
//! window ending at `k`.

use rand::{Rng, RngCore, SeedableRng};

use crate::error::{MuseError, Result};
use crate::features::{LocalFeatureFrame, QuestionStep, Response, MAX_ELAPSED_SECONDS, MAX_LAG_SECONDS, N_GLOBAL};
use crate::numcore::nn::{
    causal_allowed, feed_forward, gru_inputs, gru_recur, multi_head_attention, pool_weights, AttentionParams,
    GruParams, LayerNormParams, Linear, ParamBuilder, PoolParams,
};
use crate::numcore::{Activation, Archive, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const ACTIVATION: Activation = Activation::Gelu;
const N_PARTS: usize = 7;
const N_LECTURE_TYPES: usize = 4;
const N_TAG_BUCKETS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub d_model: usize,
    pub n_user_enc: usize,
    pub n_ex_dec: usize,
    pub n_lect_enc: usize,
    pub heads: usize,
    pub window: usize,
    pub dropout: f64,
    /// Aggregator half-width `w`; each aggregator has `2w + 1` taps.
    pub agg_half_width: usize,
    pub agg_layers: usize,
    pub ffn_mult: usize,
    pub pool_hidden: usize,
    pub head_hidden: [usize; 2],
    /// Rows in the shared content/bundle table (ids are shifted by one).
    pub content_vocab: usize,
    pub tag_vocab: usize,
    /// Task container ids at or beyond this are clipped to the last row.
    pub task_container_vocab: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            d_model: 128,
            n_user_enc: 3,
            n_ex_dec: 3,
            n_lect_enc: 2,
            heads: 8,
            window: 200,
            dropout: 0.0,
            agg_half_width: 3,
            agg_layers: 2,
            ffn_mult: 4,
            pool_hidden: 64,
            head_hidden: [256, 64],
            content_vocab: 13_524,
            tag_vocab: 190,
            task_container_vocab: 10_001,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuseError::InvalidArgument(format!("local model: {m}")));
        if self.n_user_enc == 0 || self.n_ex_dec == 0 || self.n_lect_enc == 0 || self.agg_layers == 0 {
            return bad("every stack needs at least one layer".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.window == 0 || self.ffn_mult == 0 || self.pool_hidden == 0 || self.head_hidden.contains(&0) {
            return bad("sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.content_vocab < 2 || self.tag_vocab < 2 || self.task_container_vocab < 2 {
            return bad("vocabularies need at least one real id".into());
        }
        Ok(())
    }

    pub fn agg_taps(&self) -> usize {
        2 * self.agg_half_width + 1
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = vec![
            ("d_model", self.d_model.to_string()),
            ("n_user_enc", self.n_user_enc.to_string()),
            ("n_ex_dec", self.n_ex_dec.to_string()),
            ("n_lect_enc", self.n_lect_enc.to_string()),
            ("heads", self.heads.to_string()),
            ("window", self.window.to_string()),
            ("dropout", self.dropout.to_string()),
            ("agg_half_width", self.agg_half_width.to_string()),
            ("agg_layers", self.agg_layers.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("pool_hidden", self.pool_hidden.to_string()),
            ("head_hidden", format!("{},{}", self.head_hidden[0], self.head_hidden[1])),
            ("content_vocab", self.content_vocab.to_string()),
            ("tag_vocab", self.tag_vocab.to_string()),
            ("task_container_vocab", self.task_container_vocab.to_string()),
        ];
        v.into_iter().map(|(k, s)| (format!("local.{k}"), s)).collect()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            a.meta(&format!("local.{k}")).ok_or_else(|| MuseError::Archive {
                path: "<archive>".into(),
                reason: format!("missing local.{k}"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| MuseError::Archive { path: "<archive>".into(), reason: format!("bad local.{k}") })
        };
        let hh = get("head_hidden")?;
        let (a0, a1) = hh.split_once(',').ok_or_else(|| MuseError::Archive {
            path: "<archive>".into(),
            reason: "bad local.head_hidden".into(),
        })?;
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| MuseError::Archive { path: "<archive>".into(), reason: "bad local.head_hidden".into() })
        };
        let cfg = LocalConfig {
            d_model: num("d_model")?,
            n_user_enc: num("n_user_enc")?,
            n_ex_dec: num("n_ex_dec")?,
            n_lect_enc: num("n_lect_enc")?,
            heads: num("heads")?,
            window: num("window")?,
            dropout: get("dropout")?.parse().map_err(|_| MuseError::Archive {
                path: "<archive>".into(),
                reason: "bad local.dropout".into(),
            })?,
            agg_half_width: num("agg_half_width")?,
            agg_layers: num("agg_layers")?,
            ffn_mult: num("ffn_mult")?,
            pool_hidden: num("pool_hidden")?,
            head_hidden: [parse(a0)?, parse(a1)?],
            content_vocab: num("content_vocab")?,
            tag_vocab: num("tag_vocab")?,
            task_container_vocab: num("task_container_vocab")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: AttentionParams,
    ln1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNormParams,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: AttentionParams,
    ln1: LayerNormParams,
    cross_attn: AttentionParams,
    ln2: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln3: LayerNormParams,
}

#[derive(Clone, Debug)]
struct Layout {
    content: ParamId,
    part: ParamId,
    tag: ParamId,
    answer: ParamId,
    task_container: ParamId,
    response: ParamId,
    elapsed_flag: ParamId,
    had_explanation: ParamId,
    attempted: ParamId,
    lect_part: ParamId,
    lect_type: ParamId,
    lect_tag: ParamId,
    elapsed: ParamId,
    lag: ParamId,
    pos_ex: ParamId,
    pos_resp: ParamId,
    pos_lect: ParamId,
    proj_ex: Linear,
    proj_resp: Linear,
    proj_lect: Linear,
    agg_ex: Vec<ParamId>,
    agg_resp: Vec<ParamId>,
    user_enc: Vec<EncoderBlock>,
    lect_enc: Vec<EncoderBlock>,
    dec: Vec<DecoderBlock>,
    pool_dec: PoolParams,
    pool_lect: PoolParams,
    gru: GruParams,
    head: [Linear; 3],
}

/// Parameters of the local model, addressable by name through `store`.
#[derive(Clone, Debug)]
pub struct LocalParams {
    pub store: ParamStore,
    layout: Layout,
}

fn encoder_block<R: Rng>(b: &mut ParamBuilder<R>, name: &str, c: &LocalConfig) -> Result<EncoderBlock> {
    let d = c.d_model;
    Ok(EncoderBlock {
        attn: b.attention(&format!("{name}.attn"), d, c.heads)?,
        ln1: b.layer_norm(&format!("{name}.ln1"), d)?,
        ff1: b.linear(&format!("{name}.ff1"), d, c.ffn_mult * d)?,
        ff2: b.linear(&format!("{name}.ff2"), c.ffn_mult * d, d)?,
        ln2: b.layer_norm(&format!("{name}.ln2"), d)?,
    })
}

impl LocalParams {
    /// Weights of the summary GRU.
    pub fn gru(&self) -> GruParams {
        self.layout.gru
    }

    pub fn init<R: Rng>(c: &LocalConfig, rng: &mut R) -> Result<Self> {
        c.validate()?;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder { store: &mut store, rng };
        let emb_std = 1.0 / (d as f64).sqrt();
        let table = |b: &mut ParamBuilder<R>, name: &str, rows: usize| {
            b.normal(&format!("local.emb.{name}"), &[rows, d], emb_std, ParamGroup::Decay)
        };
        let content = table(&mut b, "content", c.content_vocab)?;
        let part = table(&mut b, "part", N_PARTS + 1)?;
        let tag = table(&mut b, "tag", c.tag_vocab)?;
        let answer = table(&mut b, "content_answer", 5)?;
        let task_container = table(&mut b, "task_container", c.task_container_vocab)?;
        let response = table(&mut b, "response", Response::COUNT + 1)?;
        let elapsed_flag = table(&mut b, "elapsed_missing", 3)?;
        let had_explanation = table(&mut b, "had_explanation", 4)?;
        let attempted = table(&mut b, "attempted", 3)?;
        let lect_part = table(&mut b, "lecture_part", N_PARTS + 2)?;
        let lect_type = table(&mut b, "lecture_type", N_LECTURE_TYPES + 2)?;
        let lect_tag = table(&mut b, "lecture_tag", N_TAG_BUCKETS + 2)?;
        let elapsed = b.normal("local.emb.elapsed", &[d], emb_std, ParamGroup::Decay)?;
        let lag = b.normal("local.emb.lag", &[d], emb_std, ParamGroup::Decay)?;
        let pos_ex = b.normal("local.pos.exercise", &[c.window, d], emb_std, ParamGroup::Decay)?;
        let pos_resp = b.normal("local.pos.response", &[c.window, d], emb_std, ParamGroup::Decay)?;
        let pos_lect = b.normal("local.pos.lecture", &[c.window, d], emb_std, ParamGroup::Decay)?;
        let proj_ex = b.linear("local.proj.exercise", 5 * d, d)?;
        let proj_resp = b.linear("local.proj.response", 7 * d, d)?;
        let proj_lect = b.linear("local.proj.lecture", 3 * d, d)?;
        let taps = c.agg_taps();
        let mut alpha = vec![0.0; taps];
        alpha[taps - 1] = 1.0;
        let agg = |b: &mut ParamBuilder<R>, stream: &str| -> Result<Vec<ParamId>> {
            (0..c.agg_layers)
                .map(|l| b.tensor(&format!("local.agg.{stream}.{l}"), Tensor::vector(&alpha), ParamGroup::NoDecay))
                .collect()
        };
        let agg_ex = agg(&mut b, "exercise")?;
        let agg_resp = agg(&mut b, "response")?;
        let user_enc = (0..c.n_user_enc)
            .map(|i| encoder_block(&mut b, &format!("local.user_enc.{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        let lect_enc = (0..c.n_lect_enc)
            .map(|i| encoder_block(&mut b, &format!("local.lect_enc.{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..c.n_ex_dec)
            .map(|i| -> Result<DecoderBlock> {
                let n = format!("local.ex_dec.{i}");
                Ok(DecoderBlock {
                    self_attn: b.attention(&format!("{n}.self_attn"), d, c.heads)?,
                    ln1: b.layer_norm(&format!("{n}.ln1"), d)?,
                    cross_attn: b.attention(&format!("{n}.cross_attn"), d, c.heads)?,
                    ln2: b.layer_norm(&format!("{n}.ln2"), d)?,
                    ff1: b.linear(&format!("{n}.ff1"), d, c.ffn_mult * d)?,
                    ff2: b.linear(&format!("{n}.ff2"), c.ffn_mult * d, d)?,
                    ln3: b.layer_norm(&format!("{n}.ln3"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool_dec = b.pool("local.pool.decoder", d, c.pool_hidden)?;
        let pool_lect = b.pool("local.pool.lecture", d, c.pool_hidden)?;
        let gru = b.gru("local.gru", d, d)?;
        let [h1, h2] = c.head_hidden;
        let head = [
            b.linear("local.head.0", 4 * d + N_GLOBAL, h1)?,
            b.linear("local.head.1", h1, h2)?,
            b.linear("local.head.2", h2, 1)?,
        ];
        let layout = Layout {
            content,
            part,
            tag,
            answer,
            task_container,
            response,
            elapsed_flag,
            had_explanation,
            attempted,
            lect_part,
            lect_type,
            lect_tag,
            elapsed,
            lag,
            pos_ex,
            pos_resp,
            pos_lect,
            proj_ex,
            proj_resp,
            proj_lect,
            agg_ex,
            agg_resp,
            user_enc,
            lect_enc,
            dec,
            pool_dec,
            pool_lect,
            gru,
            head,
        };
        Ok(LocalParams { store, layout })
    }
}

/// Embedding-table indices for one frame; `0` is the padding row everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub valid: Vec<bool>,
    pub content: Vec<usize>,
    pub bundle: Vec<usize>,
    pub part: Vec<usize>,
    pub tags: Vec<Vec<usize>>,
    pub answer: Vec<usize>,
    pub task_container: Vec<usize>,
    pub response: Vec<usize>,
    pub elapsed: Vec<f64>,
    pub elapsed_flag: Vec<usize>,
    pub lag: Vec<f64>,
    pub had_explanation: Vec<usize>,
    pub attempted: Vec<usize>,
    pub lect_part: Vec<usize>,
    pub lect_type: Vec<usize>,
    pub lect_tag: Vec<usize>,
    pub global: Vec<f64>,
    pub labels: Vec<Option<u8>>,
}

impl FrameInputs {
    pub fn new(c: &LocalConfig, frame: &LocalFeatureFrame) -> Result<Self> {
        let w = frame.window();
        if w != c.window || frame.valid.len() != w {
            return Err(MuseError::InvalidArgument(format!(
                "frame window {w} does not match model window {}",
                c.window
            )));
        }
        let mut x = FrameInputs {
            valid: frame.valid.clone(),
            content: Vec::with_capacity(w),
            bundle: Vec::with_capacity(w),
            part: Vec::with_capacity(w),
            tags: Vec::with_capacity(w),
            answer: Vec::with_capacity(w),
            task_container: Vec::with_capacity(w),
            response: Vec::with_capacity(w),
            elapsed: Vec::with_capacity(w),
            elapsed_flag: Vec::with_capacity(w),
            lag: Vec::with_capacity(w),
            had_explanation: Vec::with_capacity(w),
            attempted: Vec::with_capacity(w),
            lect_part: Vec::with_capacity(w),
            lect_type: Vec::with_capacity(w),
            lect_tag: Vec::with_capacity(w),
            global: Vec::with_capacity(w * N_GLOBAL),
            labels: Vec::with_capacity(w),
        };
        for (s, &v) in frame.steps.iter().zip(&frame.valid) {
            x.push(c, s, v)?;
        }
        Ok(x)
    }

    fn push(&mut self, c: &LocalConfig, s: &QuestionStep, valid: bool) -> Result<()> {
        if !valid {
            for v in [
                &mut self.content,
                &mut self.bundle,
                &mut self.part,
                &mut self.answer,
                &mut self.task_container,
                &mut self.response,
                &mut self.elapsed_flag,
                &mut self.had_explanation,
                &mut self.attempted,
                &mut self.lect_part,
                &mut self.lect_type,
                &mut self.lect_tag,
            ] {
                v.push(0);
            }
            self.tags.push(Vec::new());
            self.elapsed.push(0.0);
            self.lag.push(0.0);
            self.global.extend_from_slice(&[0.0; N_GLOBAL]);
            self.labels.push(None);
            return Ok(());
        }
        let vocab = |id: u32, size: usize| -> Result<usize> {
            let i = id as usize + 1;
            if i >= size {
                Err(MuseError::IndexOutOfRange { index: i, size })
            } else {
                Ok(i)
            }
        };
        self.content.push(vocab(s.content_id, c.content_vocab)?);
        self.bundle.push(vocab(s.bundle_id, c.content_vocab)?);
        self.part.push(s.part as usize);
        self.tags.push(s.tags.iter().map(|&t| vocab(t, c.tag_vocab)).collect::<Result<_>>()?);
        self.answer.push(s.content_answer as usize + 1);
        self.task_container.push((s.task_container_id as usize + 1).min(c.task_container_vocab - 1));
        self.response.push(s.response.code() as usize + 1);
        self.elapsed.push(s.elapsed_seconds.unwrap_or(0.0).min(MAX_ELAPSED_SECONDS) / MAX_ELAPSED_SECONDS);
        self.elapsed_flag.push(if s.elapsed_seconds.is_some() { 1 } else { 2 });
        self.lag.push(s.lag_seconds.min(MAX_LAG_SECONDS) / MAX_LAG_SECONDS);
        self.had_explanation.push(match s.had_explanation {
            Some(false) => 1,
            Some(true) => 2,
            None => 3,
        });
        self.attempted.push(crate::features::attempt_feature_local(s.attempts) as usize + 1);
        self.lect_part.push(s.lecture.part as usize + 1);
        self.lect_type.push(s.lecture.kind as usize + 1);
        self.lect_tag.push(s.lecture.tag as usize + 1);
        self.global.extend_from_slice(&s.global);
        self.labels.push(s.label);
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.valid.len()
    }
}

/// Additive perturbations of the three projected streams, each `[W, d]`.
#[derive(Clone, Copy, Debug)]
pub struct StreamDelta {
    pub exercise: Var,
    pub response: Var,
    pub lecture: Var,
}

/// Intermediate results of one dense forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LocalForward {
    /// Projected streams plus position embeddings (plus any perturbation).
    pub exercise: Var,
    pub response: Var,
    pub lecture: Var,
    pub decoder: Var,
    /// `[W, 1]` probabilities, one per position.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct LocalModel {
    pub config: LocalConfig,
    pub params: LocalParams,
}

impl LocalModel {
    pub fn new<R: Rng>(config: LocalConfig, rng: &mut R) -> Result<Self> {
        let params = LocalParams::init(&config, rng)?;
        Ok(LocalModel { config, params })
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params.store
    }

    /// Per-stream embeddings: concatenated feature embeddings, one linear
    /// map to `d_model`, plus the stream's own position table.
    pub fn embed_streams(&self, g: &mut Graph, x: &FrameInputs) -> Result<[Var; 3]> {
        let p = &self.params.layout;
        let emb = |g: &mut Graph, t: ParamId, ids: &[usize]| -> Result<Var> {
            let t = g.param(t);
            g.embedding(t, ids)
        };
        let content = emb(g, p.content, &x.content)?;
        let bundle = emb(g, p.content, &x.bundle)?;
        let part = emb(g, p.part, &x.part)?;
        let tag_t = g.param(p.tag);
        let tags = g.embedding_bag_mean(tag_t, &x.tags)?;
        let answer = emb(g, p.answer, &x.answer)?;
        let e = g.concat_cols(&[content, bundle, part, tags, answer])?;
        let e = p.proj_ex.forward(g, e)?;
        let pos = g.param(p.pos_ex);
        let e = g.add(e, pos)?;

        let tc = emb(g, p.task_container, &x.task_container)?;
        let resp = emb(g, p.response, &x.response)?;
        let el_w = g.param(p.elapsed);
        let el = g.continuous_embed(el_w, &x.elapsed)?;
        let el_flag = emb(g, p.elapsed_flag, &x.elapsed_flag)?;
        let lag_w = g.param(p.lag);
        let lag = g.continuous_embed(lag_w, &x.lag)?;
        let he = emb(g, p.had_explanation, &x.had_explanation)?;
        let att = emb(g, p.attempted, &x.attempted)?;
        let r = g.concat_cols(&[tc, resp, el, el_flag, lag, he, att])?;
        let r = p.proj_resp.forward(g, r)?;
        let pos = g.param(p.pos_resp);
        let r = g.add(r, pos)?;

        let lp = emb(g, p.lect_part, &x.lect_part)?;
        let lt = emb(g, p.lect_type, &x.lect_type)?;
        let lg = emb(g, p.lect_tag, &x.lect_tag)?;
        let l = g.concat_cols(&[lp, lt, lg])?;
        let l = p.proj_lect.forward(g, l)?;
        let pos = g.param(p.pos_lect);
        let l = g.add(l, pos)?;
        Ok([e, r, l])
    }

    fn aggregate(&self, g: &mut Graph, x: Var, layers: &[ParamId], valid: &[bool]) -> Result<Var> {
        let mut h = x;
        for &a in layers {
            let logits = g.param(a);
            h = g.causal_aggregate(h, logits, valid)?;
        }
        Ok(h)
    }

    fn encode(
        &self,
        g: &mut Graph,
        x: Var,
        blocks: &[EncoderBlock],
        allowed: &[bool],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut h = x;
        for b in blocks {
            let a = multi_head_attention(g, h, h, &b.attn, allowed)?;
            let a = self.drop(g, a, rng);
            let s = g.add(h, a)?;
            h = b.ln1.forward(g, s)?;
            let f = feed_forward(g, h, &b.ff1, &b.ff2, ACTIVATION)?;
            let f = self.drop(g, f, rng);
            let s = g.add(h, f)?;
            h = b.ln2.forward(g, s)?;
        }
        Ok(h)
    }

    fn decode(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        allowed: &[bool],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut h = x;
        for b in &self.params.layout.dec {
            let a = multi_head_attention(g, h, h, &b.self_attn, allowed)?;
            let a = self.drop(g, a, rng);
            let s = g.add(h, a)?;
            h = b.ln1.forward(g, s)?;
            let a = multi_head_attention(g, h, memory, &b.cross_attn, allowed)?;
            let a = self.drop(g, a, rng);
            let s = g.add(h, a)?;
            h = b.ln2.forward(g, s)?;
            let f = feed_forward(g, h, &b.ff1, &b.ff2, ACTIVATION)?;
            let f = self.drop(g, f, rng);
            let s = g.add(h, f)?;
            h = b.ln3.forward(g, s)?;
        }
        Ok(h)
    }

    fn drop(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, *r),
            _ => x,
        }
    }

    /// GRU hidden state after each valid step; padding rows stay zero and do
    /// not advance the recurrence.
    pub fn gru_summary(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let p = &self.params.layout.gru;
        let d = self.config.d_model;
        let gi = gru_inputs(g, x, p)?;
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let mut h = zero;
        let mut rows = Vec::with_capacity(valid.len());
        for (t, &v) in valid.iter().enumerate() {
            if v {
                let xz = g.gather_rows(gi.z, &[t])?;
                let xr = g.gather_rows(gi.r, &[t])?;
                let xh = g.gather_rows(gi.h, &[t])?;
                h = gru_recur(g, xz, xr, xh, h, p)?;
            }
            rows.push(if v { h } else { zero });
        }
        g.concat_rows(&rows)
    }

    /// Dense forward: the output row `k` predicts the question at step `k`
    /// from steps `..=k` of the frame.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &FrameInputs,
        delta: Option<StreamDelta>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<LocalForward> {
        let p = &self.params.layout;
        let valid = &x.valid;
        if !valid.iter().any(|&v| v) {
            return Err(MuseError::InvalidArgument("frame has no valid steps".into()));
        }
        let [mut e, mut r, mut l] = self.embed_streams(g, x)?;
        if let Some(dl) = delta {
            e = g.add(e, dl.exercise)?;
            r = g.add(r, dl.response)?;
            l = g.add(l, dl.lecture)?;
        }
        let allowed = causal_allowed(valid);
        let e_agg = self.aggregate(g, e, &p.agg_ex, valid)?;
        let r_agg = self.aggregate(g, r, &p.agg_resp, valid)?;
        let h = self.encode(g, r_agg, &p.user_enc, &allowed, &mut rng)?;
        let hl = self.encode(g, l, &p.lect_enc, &allowed, &mut rng)?;
        let dec = self.decode(g, e_agg, h, &allowed, &mut rng)?;

        // Query for position j is the content embedding of exercise j; the
        // pools see steps i <= j.
        let table = g.param(p.content);
        let query = g.embedding(table, &x.content)?;
        let pool_mask = pool_allowed(valid);
        let wd = pool_weights(g, dec, query, &p.pool_dec, &pool_mask)?;
        let pooled_dec = g.matmul(wd, dec)?;
        let wl = pool_weights(g, hl, query, &p.pool_lect, &pool_mask)?;
        let pooled_lect = g.matmul(wl, hl)?;
        let summary = self.gru_summary(g, r_agg, valid)?;
        let global = g.constant(Tensor::new(vec![x.window(), N_GLOBAL], x.global.clone())?);
        let feats = g.concat_cols(&[pooled_dec, pooled_lect, summary, dec, global])?;
        let z = p.head[0].forward(g, feats)?;
        let z = g.activation(z, ACTIVATION);
        let z = p.head[1].forward(g, z)?;
        let z = g.activation(z, ACTIVATION);
        let z = p.head[2].forward(g, z)?;
        let probs = g.sigmoid(z);
        Ok(LocalForward { exercise: e, response: r, lecture: l, decoder: dec, probs })
    }

    /// Probabilities at every position of the frame (padding rows included).
    pub fn predict_dense(&self, frame: &LocalFeatureFrame) -> Result<Vec<f64>> {
        let x = FrameInputs::new(&self.config, frame)?;
        let mut g = Graph::new(&self.params.store);
        let out = self.forward(&mut g, &x, None, None)?;
        Ok(g.value(out.probs).data().to_vec())
    }

    /// Probability that the frame's target (last step) is answered correctly.
    pub fn predict(&self, frame: &LocalFeatureFrame) -> Result<f64> {
        if !frame.valid.last().copied().unwrap_or(false) {
            return Err(MuseError::InvalidArgument("frame target is padding".into()));
        }
        Ok(*self.predict_dense(frame)?.last().expect("non-empty window"))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.params.store.to_archive();
        a.set_meta("model", "local");
        for (k, v) in self.config.to_pairs() {
            a.set_meta(k, v);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("model") != Some("local") {
            return Err(MuseError::Archive { path: "<archive>".into(), reason: "not a local model checkpoint".into() });
        }
        let config = LocalConfig::from_archive(a)?;
        // Values are overwritten by the archive; the init stream is irrelevant.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = LocalModel::new(config, &mut rng)?;
        model.params.store.load_values(a)?;
        Ok(model)
    }
}

/// Pool pattern `[query j, key i]`: key `i` visible when `i <= j` and valid.
pub fn pool_allowed(valid: &[bool]) -> Vec<bool> {
    let l = valid.len();
    let mut m = vec![false; l * l];
    for j in 0..l {
        for i in 0..=j {
            m[j * l + i] = valid[i];
        }
    }
    m
}
