//! Causal feature extraction from user histories.
//!
//! Every question event becomes a [`QuestionStep`]. Its exercise-side fields
//! describe the question itself; everything else (previous response, timing,
//! lecture state, user statistics) is computed from strictly earlier rows.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::datamodel::{ContentCatalog, ContentType, InteractionRow, UserHistory};
use crate::error::{MuseError, Result};

pub const MAX_LAG_SECONDS: f64 = 300.0;
pub const MAX_ELAPSED_SECONDS: f64 = 300.0;
pub const HOTNESS_CAP: f64 = 22000.0;
pub const HARDNESS_ALPHA: f64 = 1.0;
pub const TOP_LECTURE_TAGS: usize = 14;
/// Bucket shared by every lecture tag outside the most frequent ones.
pub const OTHER_TAG_BUCKET: u8 = TOP_LECTURE_TAGS as u8 + 1;
pub const N_GLOBAL: usize = 9;

/// Seconds between the starts of two exercises, capped at 300.
pub fn lag_time(prev_start_ms: Option<u64>, cur_start_ms: u64) -> Result<f64> {
    match prev_start_ms {
        None => Ok(0.0),
        Some(prev) if cur_start_ms < prev => Err(MuseError::Ordering(format!(
            "exercise at {cur_start_ms} ms starts before the previous one at {prev} ms"
        ))),
        Some(prev) => Ok(((cur_start_ms - prev) as f64 / 1000.0).min(MAX_LAG_SECONDS)),
    }
}

pub fn attempt_feature_local(count: u32) -> u8 {
    u8::from(count > 0)
}

pub fn attempt_feature_global(count: u32) -> f64 {
    1.0 - (-(count as f64)).exp()
}

/// Response token carried on the response stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Response {
    Incorrect = 0,
    Correct = 1,
    Mask = 2,
    Start = 3,
}

impl Response {
    pub const COUNT: usize = 4;

    pub fn from_label(label: Option<u8>) -> Self {
        match label {
            Some(0) => Response::Incorrect,
            Some(_) => Response::Correct,
            None => Response::Mask,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Response::Incorrect),
            1 => Some(Response::Correct),
            2 => Some(Response::Mask),
            3 => Some(Response::Start),
            _ => None,
        }
    }
}

/// Categorical description of the most recent lecture; `0` means none yet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LectureState {
    pub part: u8,
    pub kind: u8,
    pub tag: u8,
}

impl LectureState {
    pub const NONE: LectureState = LectureState { part: 0, kind: 0, tag: 0 };
}

/// Lecture tag to bucket map: the most watched tags get 1..=14 in order of
/// frequency (ties by tag id), all others 15.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TagBuckets {
    map: HashMap<u32, u8>,
}

impl TagBuckets {
    pub fn from_rows(rows: &[InteractionRow], catalog: &ContentCatalog) -> Result<Self> {
        let mut freq: HashMap<u32, u64> = HashMap::new();
        for r in rows.iter().filter(|r| r.content_type == ContentType::Lecture) {
            *freq.entry(catalog.lecture(r.content_id)?.tag).or_default() += 1;
        }
        let mut ranked: Vec<(u32, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let map = ranked
            .into_iter()
            .take(TOP_LECTURE_TAGS)
            .enumerate()
            .map(|(i, (tag, _))| (tag, i as u8 + 1))
            .collect();
        Ok(TagBuckets { map })
    }

    pub fn bucket(&self, tag: u32) -> u8 {
        self.map.get(&tag).copied().unwrap_or(OTHER_TAG_BUCKET)
    }

    /// `(tag, bucket)` pairs of the ranked tags, ordered by bucket.
    pub fn ranked(&self) -> Vec<(u32, u8)> {
        let mut v: Vec<(u32, u8)> = self.map.iter().map(|(&t, &b)| (t, b)).collect();
        v.sort_by_key(|&(_, b)| b);
        v
    }

    pub fn from_ranked(pairs: &[(u32, u8)]) -> Self {
        TagBuckets { map: pairs.iter().copied().collect() }
    }
}

/// Per-content and per-part answer totals over the training split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContentStats {
    /// content id → (attempts, correct).
    pub content: HashMap<u32, (u64, u64)>,
    /// Indexed by part 1..=7; slot 0 unused.
    pub part: [(u64, u64); 8],
}

impl ContentStats {
    pub fn from_rows(rows: &[InteractionRow], catalog: &ContentCatalog) -> Result<Self> {
        let mut s = ContentStats::default();
        for r in rows.iter().filter(|r| r.is_question()) {
            let Some(y) = r.answered_correctly else { continue };
            let part = catalog.question(r.content_id)?.part as usize;
            let c = s.content.entry(r.content_id).or_default();
            c.0 += 1;
            c.1 += y as u64;
            s.part[part].0 += 1;
            s.part[part].1 += y as u64;
        }
        Ok(s)
    }

    pub fn content_counts(&self, content_id: u32) -> (u64, u64) {
        self.content.get(&content_id).copied().unwrap_or((0, 0))
    }
}

fn smoothed(correct: u64, attempts: u64) -> f64 {
    (correct as f64 + HARDNESS_ALPHA) / (attempts as f64 + 2.0 * HARDNESS_ALPHA)
}

/// Per-user running counters, updated only after a row's features are emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningUserStats {
    pub answer_counts: [u64; 4],
    pub correct_count: u64,
    pub answered_count: u64,
    pub lecture_watch_count: u64,
    pub attempt_counts: HashMap<u32, u32>,
    pub last_lecture: Option<LectureState>,
    /// Start of the previous question, for lag.
    pub last_question_ms: Option<u64>,
    /// Label of the previous question (`None` when it was unlabeled).
    pub last_label: Option<Option<u8>>,
    /// `(timestamp, row_id)` of the last applied row.
    pub last_position: Option<(u64, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalFeatureVector {
    pub hotness: f64,
    pub hardness: f64,
    pub part_hardness: f64,
    pub response_ratio: [f64; 4],
    pub cumulative_correct_rate: f64,
    pub lecture_watch_feature: f64,
}

impl GlobalFeatureVector {
    pub fn to_array(&self) -> [f64; N_GLOBAL] {
        let r = self.response_ratio;
        [
            self.hotness,
            self.hardness,
            self.part_hardness,
            r[0],
            r[1],
            r[2],
            r[3],
            self.cumulative_correct_rate,
            self.lecture_watch_feature,
        ]
    }
}

pub fn global_features(
    user: &RunningUserStats,
    content: &ContentStats,
    catalog: &ContentCatalog,
    question_id: u32,
) -> Result<GlobalFeatureVector> {
    let q = catalog.question(question_id)?;
    let (attempts, correct) = content.content_counts(question_id);
    let (p_att, p_cor) = content.part[q.part as usize];
    let response_ratio = if user.answered_count == 0 {
        [0.25; 4]
    } else {
        let total: u64 = user.answer_counts.iter().sum();
        user.answer_counts.map(|c| c as f64 / total as f64)
    };
    let cumulative_correct_rate = if user.answered_count == 0 {
        0.5
    } else {
        user.correct_count as f64 / user.answered_count as f64
    };
    Ok(GlobalFeatureVector {
        hotness: (attempts as f64).min(HOTNESS_CAP) / HOTNESS_CAP,
        hardness: smoothed(correct, attempts),
        part_hardness: smoothed(p_cor, p_att),
        response_ratio,
        cumulative_correct_rate,
        lecture_watch_feature: 1.0 - (-(user.lecture_watch_count as f64)).exp(),
    })
}

pub fn lecture_state(stats: &RunningUserStats) -> LectureState {
    stats.last_lecture.unwrap_or(LectureState::NONE)
}

/// Folds one row into the user's statistics.
pub fn stream_update(
    stats: &mut RunningUserStats,
    catalog: &ContentCatalog,
    buckets: &TagBuckets,
    row: &InteractionRow,
) -> Result<()> {
    let pos = (row.timestamp, row.row_id);
    if let Some(last) = stats.last_position {
        if pos <= last {
            return Err(MuseError::Ordering(format!(
                "row {} at {} ms arrives after row {} at {} ms",
                row.row_id, row.timestamp, last.1, last.0
            )));
        }
    }
    stats.last_position = Some(pos);
    match row.content_type {
        ContentType::Lecture => {
            let l = catalog.lecture(row.content_id)?;
            stats.lecture_watch_count += 1;
            stats.last_lecture = Some(LectureState { part: l.part, kind: l.kind.code(), tag: buckets.bucket(l.tag) });
        }
        ContentType::Question => {
            *stats.attempt_counts.entry(row.content_id).or_insert(0) += 1;
            stats.last_question_ms = Some(row.timestamp);
            stats.last_label = Some(row.answered_correctly);
            if let (Some(a), Some(y)) = (row.user_answer, row.answered_correctly) {
                stats.answer_counts[a as usize] += 1;
                stats.answered_count += 1;
                stats.correct_count += y as u64;
            }
        }
    }
    Ok(())
}

/// Frozen, training-split-derived state shared by all feature extraction.
#[derive(Clone, Debug, Default)]
pub struct FeatureContext {
    pub catalog: ContentCatalog,
    pub content_stats: ContentStats,
    pub tag_buckets: TagBuckets,
}

impl FeatureContext {
    pub fn fit(train_rows: &[InteractionRow], catalog: ContentCatalog) -> Result<Self> {
        let content_stats = ContentStats::from_rows(train_rows, &catalog)?;
        let tag_buckets = TagBuckets::from_rows(train_rows, &catalog)?;
        Ok(FeatureContext { catalog, content_stats, tag_buckets })
    }
}

/// Features of one question event.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionStep {
    pub row_id: u64,
    pub content_id: u32,
    pub bundle_id: u32,
    pub part: u8,
    pub tags: Vec<u32>,
    pub content_answer: u8,
    pub task_container_id: u32,
    /// Outcome of the user's previous question.
    pub response: Response,
    /// Time spent on the previous question, capped at 300 s.
    pub elapsed_seconds: Option<f64>,
    pub lag_seconds: f64,
    pub had_explanation: Option<bool>,
    /// Earlier attempts on this content.
    pub attempts: u32,
    pub lecture: LectureState,
    pub global: [f64; N_GLOBAL],
    pub label: Option<u8>,
}

impl QuestionStep {
    /// Filler for the left padding of a frame.
    pub fn padding() -> Self {
        QuestionStep {
            row_id: u64::MAX,
            content_id: 0,
            bundle_id: 0,
            part: 0,
            tags: Vec::new(),
            content_answer: 0,
            task_container_id: 0,
            response: Response::Start,
            elapsed_seconds: None,
            lag_seconds: 0.0,
            had_explanation: None,
            attempts: 0,
            lecture: LectureState::NONE,
            global: [0.0; N_GLOBAL],
            label: None,
        }
    }
}

/// Incremental per-user extractor: feed rows in order, get a step per question.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepExtractor {
    pub stats: RunningUserStats,
}

impl StepExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ctx: &FeatureContext, row: &InteractionRow) -> Result<Option<QuestionStep>> {
        let step = if row.is_question() {
            if let Some(last) = self.stats.last_position {
                if (row.timestamp, row.row_id) <= last {
                    return Err(MuseError::Ordering(format!("row {} is out of order", row.row_id)));
                }
            }
            let q = ctx.catalog.question(row.content_id)?;
            let s = &self.stats;
            Some(QuestionStep {
                row_id: row.row_id,
                content_id: row.content_id,
                bundle_id: q.bundle_id,
                part: q.part,
                tags: q.tags.clone(),
                content_answer: q.correct_answer,
                task_container_id: row.task_container_id,
                response: match s.last_label {
                    None => Response::Start,
                    Some(l) => Response::from_label(l),
                },
                elapsed_seconds: row.prior_elapsed_time.map(|ms| (ms / 1000.0).min(MAX_ELAPSED_SECONDS)),
                lag_seconds: lag_time(s.last_question_ms, row.timestamp)?,
                had_explanation: row.prior_had_explanation,
                attempts: s.attempt_counts.get(&row.content_id).copied().unwrap_or(0),
                lecture: lecture_state(s),
                global: global_features(s, &ctx.content_stats, &ctx.catalog, row.content_id)?.to_array(),
                label: row.answered_correctly,
            })
        } else {
            None
        };
        stream_update(&mut self.stats, &ctx.catalog, &ctx.tag_buckets, row)?;
        Ok(step)
    }
}

/// Steps for every question in a chronological row sequence.
pub fn extract_steps(ctx: &FeatureContext, rows: &[InteractionRow]) -> Result<Vec<QuestionStep>> {
    let mut ex = StepExtractor::new();
    let mut out = Vec::new();
    for r in rows {
        if let Some(s) = ex.push(ctx, r)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Fixed-length window of question steps ending at the target, left-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureFrame {
    pub steps: Vec<QuestionStep>,
    pub valid: Vec<bool>,
}

impl LocalFeatureFrame {
    pub fn window(&self) -> usize {
        self.steps.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The last slot, which holds the target.
    pub fn target(&self) -> &QuestionStep {
        self.steps.last().expect("frames are non-empty")
    }

    /// Window over `steps[..=end]`.
    pub fn from_steps(steps: &[QuestionStep], end: usize, window: usize) -> Self {
        let start = (end + 1).saturating_sub(window);
        let n_real = end + 1 - start;
        let mut out = Vec::with_capacity(window);
        out.resize(window - n_real, QuestionStep::padding());
        out.extend_from_slice(&steps[start..=end]);
        let mut valid = vec![false; window - n_real];
        valid.resize(window, true);
        LocalFeatureFrame { steps: out, valid }
    }
}

/// Frame for the question at `history.rows[target_index]`.
pub fn build_frame(
    ctx: &FeatureContext,
    history: &UserHistory,
    target_index: usize,
    window: usize,
) -> Result<LocalFeatureFrame> {
    if window == 0 {
        return Err(MuseError::InvalidArgument("window must be positive".into()));
    }
    let target = history
        .rows
        .get(target_index)
        .ok_or(MuseError::IndexOutOfRange { index: target_index, size: history.rows.len() })?;
    if !target.is_question() {
        return Err(MuseError::TargetNotQuestion(target_index));
    }
    let steps = extract_steps(ctx, &history.rows[..=target_index])?;
    Ok(LocalFeatureFrame::from_steps(&steps, steps.len() - 1, window))
}

const CACHE_MAGIC: &str = "MUSE-FRAMES 1";
/// Record layout, little-endian, repeated `window` times per frame after a
/// `u32` window length.
pub const CACHE_SCHEMA: &str = "step=valid:u8 row_id:u64 content_id:u32 bundle_id:u32 part:u8 n_tags:u8 tags:u32[n_tags] \
content_answer:u8 task_container_id:u32 response:u8 elapsed_present:u8 elapsed_seconds:f64 lag_seconds:f64 \
had_explanation:u8(0,1,2=absent) attempts:u32 lecture_part:u8 lecture_kind:u8 lecture_tag:u8 global:f64[9] label:u8(0,1,2=absent)";

fn opt_code(v: Option<u8>) -> u8 {
    v.unwrap_or(2)
}

pub fn write_frame_cache(path: &Path, frames: &[LocalFeatureFrame]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("{CACHE_MAGIC}\n{CACHE_SCHEMA}\n").as_bytes());
    buf.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for f in frames {
        buf.extend_from_slice(&(f.window() as u32).to_le_bytes());
        for (s, &v) in f.steps.iter().zip(&f.valid) {
            buf.push(u8::from(v));
            buf.extend_from_slice(&s.row_id.to_le_bytes());
            buf.extend_from_slice(&s.content_id.to_le_bytes());
            buf.extend_from_slice(&s.bundle_id.to_le_bytes());
            buf.push(s.part);
            let n_tags = u8::try_from(s.tags.len())
                .map_err(|_| MuseError::InvalidArgument("more than 255 tags on one question".into()))?;
            buf.push(n_tags);
            for t in &s.tags {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            buf.push(s.content_answer);
            buf.extend_from_slice(&s.task_container_id.to_le_bytes());
            buf.push(s.response.code());
            buf.push(u8::from(s.elapsed_seconds.is_some()));
            buf.extend_from_slice(&s.elapsed_seconds.unwrap_or(0.0).to_le_bytes());
            buf.extend_from_slice(&s.lag_seconds.to_le_bytes());
            buf.push(opt_code(s.had_explanation.map(u8::from)));
            buf.extend_from_slice(&s.attempts.to_le_bytes());
            buf.extend_from_slice(&[s.lecture.part, s.lecture.kind, s.lecture.tag]);
            for g in s.global {
                buf.extend_from_slice(&g.to_le_bytes());
            }
            buf.push(opt_code(s.label));
        }
    }
    std::fs::write(path, buf).map_err(|e| MuseError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MuseError::Archive { path: self.origin.clone(), reason: "truncated frame cache".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| self.bad("missing header line"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.bad("header is not UTF-8"))
    }
    fn bad(&self, reason: &str) -> MuseError {
        MuseError::Archive { path: self.origin.clone(), reason: reason.into() }
    }
}

fn decode_opt(c: u8, cur: &Cursor) -> Result<Option<u8>> {
    match c {
        0 | 1 => Ok(Some(c)),
        2 => Ok(None),
        _ => Err(cur.bad("bad optional flag")),
    }
}

pub fn read_frame_cache(path: &Path) -> Result<Vec<LocalFeatureFrame>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MuseError::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, origin: path.display().to_string() };
    if c.line()? != CACHE_MAGIC {
        return Err(c.bad("bad magic"));
    }
    if c.line()? != CACHE_SCHEMA {
        return Err(c.bad("unsupported schema"));
    }
    let n = c.u64()?;
    let mut frames = Vec::new();
    for _ in 0..n {
        let w = c.u32()? as usize;
        let mut steps = Vec::with_capacity(w);
        let mut valid = Vec::with_capacity(w);
        for _ in 0..w {
            valid.push(c.u8()? != 0);
            let row_id = c.u64()?;
            let content_id = c.u32()?;
            let bundle_id = c.u32()?;
            let part = c.u8()?;
            let n_tags = c.u8()? as usize;
            let tags = (0..n_tags).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let content_answer = c.u8()?;
            let task_container_id = c.u32()?;
            let response = Response::from_code(c.u8()?).ok_or_else(|| c.bad("bad response code"))?;
            let present = c.u8()? != 0;
            let e = c.f64()?;
            let lag_seconds = c.f64()?;
            let he = c.u8()?;
            let had_explanation = decode_opt(he, &c)?.map(|v| v == 1);
            let attempts = c.u32()?;
            let lecture = LectureState { part: c.u8()?, kind: c.u8()?, tag: c.u8()? };
            let mut global = [0.0; N_GLOBAL];
            for g in &mut global {
                *g = c.f64()?;
            }
            let l = c.u8()?;
            steps.push(QuestionStep {
                row_id,
                content_id,
                bundle_id,
                part,
                tags,
                content_answer,
                task_container_id,
                response,
                elapsed_seconds: present.then_some(e),
                lag_seconds,
                had_explanation,
                attempts,
                lecture,
                global,
                label: decode_opt(l, &c)?,
            });
        }
        frames.push(LocalFeatureFrame { steps, valid });
    }
    if c.pos != bytes.len() {
        return Err(c.bad("trailing bytes"));
    }
    Ok(frames)
}
