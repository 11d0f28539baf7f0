//! Recurrent model over the full user history.
//!
//! Each question step is embedded, projected to `d` and fed through a stack
//! of GRU cells; the top state gives the prediction. Because the state has a
//! fixed size, a user's stream can be advanced one row at a time and paused
//! or resumed through [`UserStreamState`] snapshots.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};

use crate::datamodel::InteractionRow;
use crate::error::{MuseError, Result};
use crate::features::{
    attempt_feature_global, FeatureContext, LectureState, QuestionStep, RunningUserStats, StepExtractor,
    MAX_ELAPSED_SECONDS, MAX_LAG_SECONDS, N_GLOBAL,
};
use crate::numcore::nn::{gru_inputs, gru_recur, GruParams, Linear, ParamBuilder};
use crate::numcore::{Archive, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

const N_PARTS: usize = 7;
/// Categorical inputs per step: content, bundle, part, tags, correct answer,
/// response, elapsed flag, had_explanation, lecture part, type and tag.
const N_CATEGORICAL: usize = 11;
/// Scalar inputs per step: elapsed, lag, attempts, then the global features.
const N_SCALAR: usize = 3 + N_GLOBAL;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalConfig {
    pub d: usize,
    pub layers: usize,
    /// Applied to the output of every layer but the last, training only.
    pub dropout: f64,
    pub emb_dim: usize,
    pub content_vocab: usize,
    pub tag_vocab: usize,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig { d: 256, layers: 2, dropout: 0.1, emb_dim: 16, content_vocab: 13_524, tag_vocab: 190 }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MuseError::InvalidArgument(format!("global model: {m}")));
        if self.layers == 0 {
            return bad("needs at least one layer");
        }
        if self.d == 0 || self.emb_dim == 0 {
            return bad("sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout outside [0, 1)");
        }
        if self.content_vocab < 2 || self.tag_vocab < 2 {
            return bad("vocabularies need at least one real id");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("content_vocab", self.content_vocab.to_string()),
            ("tag_vocab", self.tag_vocab.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("global.{k}"), v))
        .collect()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        fn field<T: std::str::FromStr>(a: &Archive, k: &str) -> Result<T> {
            let err = |reason: String| MuseError::Archive { path: "<archive>".into(), reason };
            a.meta(&format!("global.{k}"))
                .ok_or_else(|| err(format!("missing global.{k}")))?
                .parse()
                .map_err(|_| err(format!("bad global.{k}")))
        }
        let c = GlobalConfig {
            d: field(a, "d")?,
            layers: field(a, "layers")?,
            dropout: field(a, "dropout")?,
            emb_dim: field(a, "emb_dim")?,
            content_vocab: field(a, "content_vocab")?,
            tag_vocab: field(a, "tag_vocab")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Table indices (0 = padding row) and scalars for a run of question steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalInputs {
    /// `[T, N_CATEGORICAL]` except tags, row-major.
    pub ids: Vec<[usize; N_CATEGORICAL - 1]>,
    pub tags: Vec<Vec<usize>>,
    /// `[T, N_SCALAR]`, row-major.
    pub scalars: Vec<f64>,
    pub labels: Vec<Option<u8>>,
}

impl GlobalInputs {
    pub fn new(c: &GlobalConfig, steps: &[QuestionStep]) -> Result<Self> {
        let vocab = |id: u32, size: usize| -> Result<usize> {
            let i = id as usize + 1;
            if i >= size {
                Err(MuseError::IndexOutOfRange { index: i, size })
            } else {
                Ok(i)
            }
        };
        let mut x = GlobalInputs {
            ids: Vec::with_capacity(steps.len()),
            tags: Vec::with_capacity(steps.len()),
            scalars: Vec::with_capacity(steps.len() * N_SCALAR),
            labels: Vec::with_capacity(steps.len()),
        };
        for s in steps {
            let LectureState { part, kind, tag } = s.lecture;
            x.ids.push([
                vocab(s.content_id, c.content_vocab)?,
                vocab(s.bundle_id, c.content_vocab)?,
                s.part as usize,
                s.content_answer as usize + 1,
                s.response.code() as usize + 1,
                if s.elapsed_seconds.is_some() { 1 } else { 2 },
                match s.had_explanation {
                    Some(false) => 1,
                    Some(true) => 2,
                    None => 3,
                },
                part as usize + 1,
                kind as usize + 1,
                tag as usize + 1,
            ]);
            x.tags.push(s.tags.iter().map(|&t| vocab(t, c.tag_vocab)).collect::<Result<_>>()?);
            x.scalars.push(s.elapsed_seconds.unwrap_or(0.0).min(MAX_ELAPSED_SECONDS) / MAX_ELAPSED_SECONDS);
            x.scalars.push(s.lag_seconds.min(MAX_LAG_SECONDS) / MAX_LAG_SECONDS);
            x.scalars.push(attempt_feature_global(s.attempts));
            x.scalars.extend_from_slice(&s.global);
            x.labels.push(s.label);
        }
        Ok(x)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows `start..end` as their own input block.
    pub fn slice(&self, start: usize, end: usize) -> GlobalInputs {
        GlobalInputs {
            ids: self.ids[start..end].to_vec(),
            tags: self.tags[start..end].to_vec(),
            scalars: self.scalars[start * N_SCALAR..end * N_SCALAR].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    /// Tables for the ten single-id categorical inputs, in `GlobalInputs::ids` order.
    tables: Vec<ParamId>,
    tag: ParamId,
    proj: Linear,
    cells: Vec<GruParams>,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct GlobalModel {
    pub config: GlobalConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Output of a forward pass over a block of steps.
pub struct GlobalForward {
    /// `[T, 1]` probabilities.
    pub probs: Var,
    /// Per-layer hidden state after the last step, each `[1, d]`.
    pub state: Vec<Var>,
}

impl GlobalModel {
    pub fn new<R: Rng>(config: GlobalConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, e) = (config.d, config.emb_dim);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder { store: &mut store, rng };
        let std = 1.0 / (e as f64).sqrt();
        let sizes = [
            ("content", config.content_vocab),
            ("bundle", config.content_vocab),
            ("part", N_PARTS + 1),
            ("content_answer", 5),
            ("response", 5),
            ("elapsed_missing", 3),
            ("had_explanation", 4),
            ("lecture_part", N_PARTS + 2),
            ("lecture_type", 6),
            ("lecture_tag", 17),
        ];
        let tables = sizes
            .iter()
            .map(|(name, rows)| b.normal(&format!("global.emb.{name}"), &[*rows, e], std, ParamGroup::Decay))
            .collect::<Result<Vec<_>>>()?;
        let tag = b.normal("global.emb.tag", &[config.tag_vocab, e], std, ParamGroup::Decay)?;
        let proj = b.linear("global.proj", N_CATEGORICAL * e + N_SCALAR, d)?;
        let cells = (0..config.layers)
            .map(|l| b.gru(&format!("global.gru.{l}"), d, d))
            .collect::<Result<Vec<_>>>()?;
        let out = b.linear("global.out", d, 1)?;
        Ok(GlobalModel { config, store, layout: Layout { tables, tag, proj, cells, out } })
    }

    pub fn zero_state(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[1, self.config.d]); self.config.layers]
    }

    /// Projected per-step inputs `[T, d]`.
    fn embed(&self, g: &mut Graph, x: &GlobalInputs) -> Result<Var> {
        let p = &self.layout;
        let t = x.len();
        let mut parts = Vec::with_capacity(N_CATEGORICAL + 1);
        for (k, &table) in p.tables.iter().enumerate() {
            let ids: Vec<usize> = x.ids.iter().map(|r| r[k]).collect();
            let tv = g.param(table);
            parts.push(g.embedding(tv, &ids)?);
        }
        let tv = g.param(p.tag);
        parts.push(g.embedding_bag_mean(tv, &x.tags)?);
        parts.push(g.constant(Tensor::new(vec![t, N_SCALAR], x.scalars.clone())?));
        let cat = g.concat_cols(&parts)?;
        p.proj.forward(g, cat)
    }

    /// Runs the stack over `x` starting from `init`. Dropout between layers
    /// is applied when `rng` is given and the graph is in training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &GlobalInputs,
        init: &[Tensor],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<GlobalForward> {
        if x.is_empty() {
            return Err(MuseError::InvalidArgument("no steps to run".into()));
        }
        if init.len() != self.config.layers {
            return Err(MuseError::shape("global forward", format!("{} states for {} layers", init.len(), self.config.layers)));
        }
        let mut h_in = self.embed(g, x)?;
        let mut state = Vec::with_capacity(self.config.layers);
        for (l, cell) in self.layout.cells.iter().enumerate() {
            if l > 0 {
                if let Some(r) = rng.as_mut() {
                    h_in = g.dropout(h_in, self.config.dropout, *r);
                }
            }
            let gi = gru_inputs(g, h_in, cell)?;
            let mut h = g.constant(init[l].clone());
            let mut rows = Vec::with_capacity(x.len());
            for t in 0..x.len() {
                let (xz, xr, xh) = if x.len() == 1 {
                    (gi.z, gi.r, gi.h)
                } else {
                    (g.gather_rows(gi.z, &[t])?, g.gather_rows(gi.r, &[t])?, g.gather_rows(gi.h, &[t])?)
                };
                h = gru_recur(g, xz, xr, xh, h, cell)?;
                rows.push(h);
            }
            state.push(h);
            h_in = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        }
        let z = self.layout.out.forward(g, h_in)?;
        let probs = g.sigmoid(z);
        Ok(GlobalForward { probs, state })
    }

    /// One step from `state`; returns the new state and the probability.
    pub fn step(&self, state: &[Tensor], input: &QuestionStep) -> Result<(Vec<Tensor>, f64)> {
        let x = GlobalInputs::new(&self.config, std::slice::from_ref(input))?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &x, state, None)?;
        let next = out.state.iter().map(|&v| g.value(v).clone()).collect();
        Ok((next, g.value(out.probs).item()))
    }

    /// Probabilities for every question step of `steps`, from a fresh state,
    /// computed in one pass.
    pub fn forward_steps(&self, steps: &[QuestionStep]) -> Result<Vec<f64>> {
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        let x = GlobalInputs::new(&self.config, steps)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &x, &self.zero_state(), None)?;
        Ok(g.value(out.probs).data().to_vec())
    }

    /// Probabilities for every question of a chronological history. Lecture
    /// rows update the running statistics but do not advance the recurrence.
    pub fn forward_sequence(&self, ctx: &FeatureContext, rows: &[InteractionRow]) -> Result<Vec<f64>> {
        self.forward_steps(&crate::features::extract_steps(ctx, rows)?)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.store.to_archive();
        a.set_meta("model", "global");
        for (k, v) in self.config.to_pairs() {
            a.set_meta(k, v);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("model") != Some("global") {
            return Err(MuseError::Archive { path: "<archive>".into(), reason: "not a global model checkpoint".into() });
        }
        let config = GlobalConfig::from_archive(a)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = GlobalModel::new(config, &mut rng)?;
        model.store.load_values(a)?;
        Ok(model)
    }
}

/// Everything needed to continue one user's stream: the recurrent state and
/// the running feature statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct UserStreamState {
    pub hidden: Vec<Tensor>,
    pub extractor: StepExtractor,
}

impl UserStreamState {
    pub fn new(model: &GlobalModel) -> Self {
        UserStreamState { hidden: model.zero_state(), extractor: StepExtractor::new() }
    }

    /// Consumes the next row of the user's history. Returns the prediction
    /// for question rows and `None` for lectures.
    pub fn advance(&mut self, model: &GlobalModel, ctx: &FeatureContext, row: &InteractionRow) -> Result<Option<f64>> {
        let mut ex = self.extractor.clone();
        let Some(step) = ex.push(ctx, row)? else {
            self.extractor = ex;
            return Ok(None);
        };
        let (hidden, p) = model.step(&self.hidden, &step)?;
        self.hidden = hidden;
        self.extractor = ex;
        Ok(Some(p))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.set_meta("model", "global-state");
        let s = &self.extractor.stats;
        let join = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        a.set_meta("answer_counts", join(&s.answer_counts));
        a.set_meta("counts", join(&[s.correct_count, s.answered_count, s.lecture_watch_count]));
        let mut attempts: Vec<(u32, u32)> = s.attempt_counts.iter().map(|(&k, &v)| (k, v)).collect();
        attempts.sort_unstable();
        let attempts: Vec<String> = attempts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        a.set_meta("attempts", if attempts.is_empty() { "-".into() } else { attempts.join(",") });
        a.set_meta(
            "last_lecture",
            s.last_lecture.map_or("-".into(), |l| format!("{},{},{}", l.part, l.kind, l.tag)),
        );
        a.set_meta("last_question_ms", s.last_question_ms.map_or("-".into(), |t| t.to_string()));
        a.set_meta(
            "last_label",
            match s.last_label {
                None => "-".to_string(),
                Some(None) => "unlabeled".to_string(),
                Some(Some(y)) => y.to_string(),
            },
        );
        a.set_meta("last_position", s.last_position.map_or("-".into(), |(t, r)| format!("{t},{r}")));
        for (l, h) in self.hidden.iter().enumerate() {
            a.push_tensor(format!("hidden.{l}"), h.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let err = |reason: &str| MuseError::Archive { path: "<archive>".into(), reason: reason.into() };
        if a.meta("model") != Some("global-state") {
            return Err(err("not a stream state snapshot"));
        }
        let get = |k: &str| a.meta(k).ok_or_else(|| err(&format!("missing {k}")));
        let nums = |k: &str| -> Result<Vec<u64>> {
            get(k)?.split(',').map(|v| v.parse().map_err(|_| err(&format!("bad {k}")))).collect()
        };
        let opt = |k: &str| -> Result<Option<&str>> { get(k).map(|v| (v != "-").then_some(v)) };
        let ac = nums("answer_counts")?;
        let counts = nums("counts")?;
        if ac.len() != 4 || counts.len() != 3 {
            return Err(err("bad counter lists"));
        }
        let mut attempt_counts = HashMap::new();
        if let Some(v) = opt("attempts")? {
            for item in v.split(',') {
                let (k, c) = item.split_once(':').ok_or_else(|| err("bad attempts"))?;
                attempt_counts.insert(
                    k.parse().map_err(|_| err("bad attempts"))?,
                    c.parse().map_err(|_| err("bad attempts"))?,
                );
            }
        }
        let last_lecture = match opt("last_lecture")? {
            None => None,
            Some(v) => {
                let f: Vec<u8> = v.split(',').map(|x| x.parse().map_err(|_| err("bad last_lecture"))).collect::<Result<_>>()?;
                if f.len() != 3 {
                    return Err(err("bad last_lecture"));
                }
                Some(LectureState { part: f[0], kind: f[1], tag: f[2] })
            }
        };
        let last_question_ms = opt("last_question_ms")?.map(|v| v.parse().map_err(|_| err("bad last_question_ms"))).transpose()?;
        let last_label = match get("last_label")? {
            "-" => None,
            "unlabeled" => Some(None),
            v => Some(Some(v.parse().map_err(|_| err("bad last_label"))?)),
        };
        let last_position = match opt("last_position")? {
            None => None,
            Some(v) => {
                let (t, r) = v.split_once(',').ok_or_else(|| err("bad last_position"))?;
                Some((t.parse().map_err(|_| err("bad last_position"))?, r.parse().map_err(|_| err("bad last_position"))?))
            }
        };
        let stats = RunningUserStats {
            answer_counts: [ac[0], ac[1], ac[2], ac[3]],
            correct_count: counts[0],
            answered_count: counts[1],
            lecture_watch_count: counts[2],
            attempt_counts,
            last_lecture,
            last_question_ms,
            last_label,
            last_position,
        };
        let mut hidden = Vec::new();
        while let Some(t) = a.tensor(&format!("hidden.{}", hidden.len())) {
            hidden.push(t.clone());
        }
        if hidden.is_empty() {
            return Err(err("snapshot has no hidden state"));
        }
        Ok(UserStreamState { hidden, extractor: StepExtractor { stats } })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_archive(&Archive::read(path)?).map_err(|e| match e {
            MuseError::Archive { reason, .. } => MuseError::Archive { path: path.display().to_string(), reason },
            other => other,
        })
    }
}
