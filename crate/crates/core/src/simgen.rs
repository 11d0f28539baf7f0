//! Seeded synthetic student logs with known answer probabilities.
//!
//! Each simulated student has a latent skill per part. A question with
//! difficulty `b` on part `k` is answered correctly with probability
//! `σ(skill[k] + drift·t − b + β·[seen before])`, and watching a lecture
//! raises the skill of the lecture's part by `δ`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::datamodel::{
    self, ContentType, InteractionRow, LectureMeta, LectureType, QuestionMeta, INTERACTIONS_FILE,
    LECTURES_FILE, QUESTIONS_FILE,
};
use crate::error::{MuseError, Result};
use crate::metrics::roc_auc;
use crate::numcore::sigmoid;

pub const TRUTH_FILE: &str = "truth.csv";
pub const PARTS: usize = 7;
const TAGS_PER_PART: u32 = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_users: usize,
    pub n_questions: usize,
    pub n_lectures: usize,
    pub mean_interactions: f64,
    pub lecture_prob: f64,
    /// Skill gained on a part per lecture watched on it.
    pub lecture_gain: f64,
    /// Logit bonus on questions the student has seen before.
    pub attempt_bonus: f64,
    /// Spread of the per-user learning drift (logits per question).
    pub noise_scale: f64,
    pub skill_std: f64,
    pub difficulty_std: f64,
    /// Share of part-skill variance common to all parts.
    pub part_skill_correlation: f64,
    pub repeat_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_users: 2000,
            n_questions: 800,
            n_lectures: 60,
            mean_interactions: 80.0,
            lecture_prob: 0.06,
            lecture_gain: 0.25,
            attempt_bonus: 0.4,
            noise_scale: 0.005,
            skill_std: 1.0,
            difficulty_std: 1.0,
            part_skill_correlation: 0.64,
            repeat_prob: 0.1,
            seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MuseError::InvalidArgument(format!("simgen: {m}")));
        if self.n_users == 0 || self.n_questions == 0 || self.n_lectures == 0 {
            return bad("user, question and lecture counts must be positive");
        }
        if !(self.mean_interactions >= 1.0) {
            return bad("mean_interactions must be at least 1");
        }
        for (name, p) in [
            ("lecture_prob", self.lecture_prob),
            ("repeat_prob", self.repeat_prob),
            ("part_skill_correlation", self.part_skill_correlation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("skill_std", self.skill_std),
            ("difficulty_std", self.difficulty_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !self.lecture_gain.is_finite() || !self.attempt_bonus.is_finite() {
            return bad("lecture_gain and attempt_bonus must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStudent {
    pub skill: [f64; PARTS],
    pub drift: f64,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub rows: Vec<InteractionRow>,
    pub questions: Vec<QuestionMeta>,
    pub lectures: Vec<LectureMeta>,
    /// `(row_id, p*)` for every question row.
    pub truth: Vec<(u64, f64)>,
    pub difficulty: Vec<f64>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

fn part_tag(rng: &mut impl Rng, part: u8) -> u32 {
    (part as u32 - 1) * TAGS_PER_PART + rng.random_range(0..TAGS_PER_PART)
}

pub fn generate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut content_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let diff = normal(config.difficulty_std);
    let mut questions = Vec::with_capacity(config.n_questions);
    let mut difficulty = Vec::with_capacity(config.n_questions);
    for q in 0..config.n_questions {
        let part = content_rng.random_range(1..=PARTS as u8);
        let n_tags = content_rng.random_range(1..=3);
        let mut tags: Vec<u32> = (0..n_tags).map(|_| part_tag(&mut content_rng, part)).collect();
        tags.sort_unstable();
        tags.dedup();
        questions.push(QuestionMeta {
            question_id: q as u32,
            bundle_id: q as u32,
            correct_answer: content_rng.random_range(0..4),
            part,
            tags,
            tags_missing: false,
        });
        difficulty.push(diff.sample(&mut content_rng));
    }
    let lectures: Vec<LectureMeta> = (0..config.n_lectures)
        .map(|l| {
            let part = content_rng.random_range(1..=PARTS as u8);
            // A few popular tags per part so lecture tags have a skewed frequency profile.
            let tag = (part as u32 - 1) * TAGS_PER_PART + content_rng.random_range(0..4u32).pow(2) % TAGS_PER_PART;
            LectureMeta {
                // Lecture ids live above the question id range.
                lecture_id: (config.n_questions + l) as u32,
                tag,
                part,
                kind: *LectureType::ALL.choose(&mut content_rng).expect("non-empty"),
            }
        })
        .collect();

    let general_std = config.skill_std * config.part_skill_correlation.sqrt();
    let specific_std = config.skill_std * (1.0 - config.part_skill_correlation).sqrt();
    let length_sigma: f64 = 0.6;
    let length = LogNormal::new(config.mean_interactions.ln() - length_sigma * length_sigma / 2.0, length_sigma)
        .expect("valid lognormal");
    let gap = LogNormal::new((20_000f64).ln(), 1.0).expect("valid lognormal");
    let elapsed = LogNormal::new((15_000f64).ln(), 0.5).expect("valid lognormal");

    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for u in 0..config.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u as u64 + 1);
        let general = normal(general_std).sample(&mut rng);
        let mut student = LatentStudent {
            skill: std::array::from_fn(|_| general + normal(specific_std).sample(&mut rng)),
            drift: normal(config.noise_scale).sample(&mut rng),
        };
        let n_events = (length.sample(&mut rng).round() as usize).max(2);
        let user_id = u as u64;
        let mut timestamp = 0u64;
        let mut seen: Vec<u32> = Vec::new();
        let mut seen_count: HashMap<u32, u32> = HashMap::new();
        let mut n_answered = 0usize;
        // Carried to the next question row as its "prior" fields.
        let mut pending: Option<(f64, bool)> = None;
        for event in 0..n_events {
            if event > 0 {
                timestamp += gap.sample(&mut rng).round() as u64;
            }
            let row_id = rows.len() as u64;
            if rng.random_bool(config.lecture_prob) {
                let lec = lectures.choose(&mut rng).expect("non-empty");
                student.skill[lec.part as usize - 1] += config.lecture_gain;
                rows.push(InteractionRow {
                    row_id,
                    timestamp,
                    user_id,
                    content_id: lec.lecture_id,
                    content_type: ContentType::Lecture,
                    task_container_id: event as u32,
                    user_answer: None,
                    answered_correctly: None,
                    prior_elapsed_time: None,
                    prior_had_explanation: None,
                });
                continue;
            }
            let qid = if !seen.is_empty() && rng.random_bool(config.repeat_prob) {
                *seen.choose(&mut rng).expect("non-empty")
            } else {
                rng.random_range(0..config.n_questions as u32)
            };
            let q = &questions[qid as usize];
            let attempts = seen_count.entry(qid).or_insert(0);
            let bonus = if *attempts > 0 { config.attempt_bonus } else { 0.0 };
            if *attempts == 0 {
                seen.push(qid);
            }
            *attempts += 1;
            let logit = student.skill[q.part as usize - 1] + student.drift * n_answered as f64
                - difficulty[qid as usize]
                + bonus;
            let p_star = sigmoid(logit);
            let correct = rng.random_bool(p_star);
            let answer = if correct {
                q.correct_answer
            } else {
                (q.correct_answer + rng.random_range(1..4)) % 4
            };
            let (prior_elapsed_time, prior_had_explanation) = match pending {
                Some((e, h)) => (Some(e), Some(h)),
                None => (None, None),
            };
            pending = Some((elapsed.sample(&mut rng).round(), rng.random_bool(0.85)));
            n_answered += 1;
            rows.push(InteractionRow {
                row_id,
                timestamp,
                user_id,
                content_id: qid,
                content_type: ContentType::Question,
                task_container_id: event as u32,
                user_answer: Some(answer),
                answered_correctly: Some(u8::from(correct)),
                prior_elapsed_time,
                prior_had_explanation,
            });
            truth.push((row_id, p_star));
        }
    }
    Ok(SimOutput { rows, questions, lectures, truth, difficulty })
}

impl SimOutput {
    /// Writes the interactions, questions, lectures and truth files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
        datamodel::write_interactions(&dir.join(INTERACTIONS_FILE), &self.rows)?;
        datamodel::write_questions(&dir.join(QUESTIONS_FILE), &self.questions)?;
        datamodel::write_lectures(&dir.join(LECTURES_FILE), &self.lectures)?;
        write_truth(&dir.join(TRUTH_FILE), &self.truth)
    }

    pub fn oracle_auc(&self) -> Result<f64> {
        oracle_auc_rows(&self.truth, &self.rows)
    }
}

pub fn write_truth(path: &Path, truth: &[(u64, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?);
    let io = |e| MuseError::io(path, e);
    writeln!(w, "row_id,p_star").map_err(io)?;
    for (id, p) in truth {
        writeln!(w, "{id},{p}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_truth(path: &Path) -> Result<Vec<(u64, f64)>> {
    let f = std::fs::File::open(path).map_err(|e| MuseError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| MuseError::MalformedRow {
                path: path.display().to_string(),
                line,
                reason: "expected row_id,p_star".into(),
            })
        };
        let bad = |what: &str| MuseError::MalformedRow {
            path: path.display().to_string(),
            line,
            reason: format!("bad {what}"),
        };
        let id = parse(0)?.trim().parse().map_err(|_| bad("row_id"))?;
        let p = parse(1)?.trim().parse().map_err(|_| bad("p_star"))?;
        out.push((id, p));
    }
    Ok(out)
}

/// AUC of the generating probabilities against the realized labels.
pub fn oracle_auc_rows(truth: &[(u64, f64)], rows: &[InteractionRow]) -> Result<f64> {
    let labels: HashMap<u64, u8> = rows
        .iter()
        .filter_map(|r| r.answered_correctly.map(|y| (r.row_id, y)))
        .collect();
    if labels.len() != truth.len() {
        return Err(MuseError::InvalidArgument(format!(
            "truth has {} rows but the log has {} answered questions",
            truth.len(),
            labels.len()
        )));
    }
    let mut scores = Vec::with_capacity(truth.len());
    let mut ys = Vec::with_capacity(truth.len());
    for (id, p) in truth {
        let y = labels.get(id).ok_or_else(|| {
            MuseError::InvalidArgument(format!("truth row {id} has no answered question in the log"))
        })?;
        scores.push(*p);
        ys.push(*y);
    }
    roc_auc(&scores, &ys)
}

pub fn oracle_auc(truth_path: &Path, interactions_path: &Path) -> Result<f64> {
    let truth = read_truth(truth_path)?;
    let rows = datamodel::parse_interactions(interactions_path)?;
    oracle_auc_rows(&truth, &rows)
}
