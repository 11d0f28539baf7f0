//! Interaction logs and content metadata in the competition CSV layout.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{MuseError, Result};

pub const INTERACTION_COLUMNS: [&str; 10] = [
    "row_id",
    "timestamp",
    "user_id",
    "content_id",
    "content_type_id",
    "task_container_id",
    "user_answer",
    "answered_correctly",
    "prior_question_elapsed_time",
    "prior_question_had_explanation",
];
pub const QUESTION_COLUMNS: [&str; 5] = ["question_id", "bundle_id", "correct_answer", "part", "tags"];
pub const LECTURE_COLUMNS: [&str; 4] = ["lecture_id", "tag", "part", "type_of"];

pub const INTERACTIONS_FILE: &str = "train.csv";
pub const QUESTIONS_FILE: &str = "questions.csv";
pub const LECTURES_FILE: &str = "lectures.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContentType {
    Question,
    Lecture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRow {
    pub row_id: u64,
    /// Milliseconds since the user's first event.
    pub timestamp: u64,
    pub user_id: u64,
    pub content_id: u32,
    pub content_type: ContentType,
    pub task_container_id: u32,
    pub user_answer: Option<u8>,
    pub answered_correctly: Option<u8>,
    pub prior_elapsed_time: Option<f64>,
    pub prior_had_explanation: Option<bool>,
}

impl InteractionRow {
    pub fn is_question(&self) -> bool {
        self.content_type == ContentType::Question
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.content_type == ContentType::Lecture
            && (self.user_answer.is_some() || self.answered_correctly.is_some())
        {
            return Err("lecture row carries an answer".into());
        }
        if let Some(e) = self.prior_elapsed_time {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(format!("negative or non-finite elapsed time {e}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionMeta {
    pub question_id: u32,
    pub bundle_id: u32,
    pub correct_answer: u8,
    pub part: u8,
    pub tags: Vec<u32>,
    /// Set when the source row had an empty tag field.
    pub tags_missing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LectureType {
    Concept,
    SolvingQuestion,
    Intention,
    Starter,
}

impl LectureType {
    pub const ALL: [LectureType; 4] = [
        LectureType::Concept,
        LectureType::SolvingQuestion,
        LectureType::Intention,
        LectureType::Starter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LectureType::Concept => "concept",
            LectureType::SolvingQuestion => "solving question",
            LectureType::Intention => "intention",
            LectureType::Starter => "starter",
        }
    }

    /// 1-based category code; 0 is reserved for "none".
    pub fn code(self) -> u8 {
        match self {
            LectureType::Concept => 1,
            LectureType::SolvingQuestion => 2,
            LectureType::Intention => 3,
            LectureType::Starter => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        LectureType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LectureMeta {
    pub lecture_id: u32,
    pub tag: u32,
    pub part: u8,
    pub kind: LectureType,
}

#[derive(Clone, Debug, Default)]
pub struct ContentCatalog {
    pub questions: HashMap<u32, QuestionMeta>,
    pub lectures: HashMap<u32, LectureMeta>,
}

impl ContentCatalog {
    pub fn question(&self, id: u32) -> Result<&QuestionMeta> {
        self.questions.get(&id).ok_or(MuseError::UnknownContentId(id))
    }

    pub fn lecture(&self, id: u32) -> Result<&LectureMeta> {
        self.lectures.get(&id).ok_or(MuseError::UnknownContentId(id))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(ContentCatalog {
            questions: parse_questions(&dir.join(QUESTIONS_FILE))?,
            lectures: parse_lectures(&dir.join(LECTURES_FILE))?,
        })
    }

    /// Largest question/bundle id, for sizing the shared id table.
    pub fn max_question_id(&self) -> u32 {
        self.questions.values().map(|q| q.question_id.max(q.bundle_id)).max().unwrap_or(0)
    }

    pub fn max_tag(&self) -> u32 {
        let q = self.questions.values().flat_map(|q| q.tags.iter().copied());
        let l = self.lectures.values().map(|l| l.tag);
        q.chain(l).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: u64,
    /// Sorted by `(timestamp, row_id)`.
    pub rows: Vec<InteractionRow>,
}

struct Columns {
    path: String,
    index: Vec<usize>,
}

impl Columns {
    fn resolve(path: &Path, headers: &csv::StringRecord, wanted: &[&str]) -> Result<Self> {
        let path = path.display().to_string();
        let index = wanted
            .iter()
            .map(|w| {
                headers.iter().position(|h| h.trim() == *w).ok_or_else(|| MuseError::MissingColumn {
                    path: path.clone(),
                    column: (*w).to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Columns { path, index })
    }

    fn field<'r>(&self, rec: &'r csv::StringRecord, col: usize, line: u64) -> Result<&'r str> {
        rec.get(self.index[col]).map(str::trim).ok_or_else(|| MuseError::MalformedRow {
            path: self.path.clone(),
            line,
            reason: format!("expected at least {} fields, found {}", self.index[col] + 1, rec.len()),
        })
    }

    fn malformed(&self, line: u64, reason: impl Into<String>) -> MuseError {
        MuseError::MalformedRow { path: self.path.clone(), line, reason: reason.into() }
    }

    fn invalid(&self, line: u64, field: &str, value: &str) -> MuseError {
        MuseError::InvalidEnum {
            path: self.path.clone(),
            line,
            field: field.to_string(),
            value: value.to_string(),
        }
    }

    fn num<T: std::str::FromStr>(&self, rec: &csv::StringRecord, col: usize, name: &str, line: u64) -> Result<T> {
        let s = self.field(rec, col, line)?;
        s.parse().map_err(|_| self.malformed(line, format!("bad {name} `{s}`")))
    }

    /// Empty string and `-1` both mean "absent".
    fn opt_num(&self, rec: &csv::StringRecord, col: usize, name: &str, line: u64) -> Result<Option<f64>> {
        let s = self.field(rec, col, line)?;
        if s.is_empty() {
            return Ok(None);
        }
        let v: f64 = s.parse().map_err(|_| self.malformed(line, format!("bad {name} `{s}`")))?;
        Ok(if v == -1.0 { None } else { Some(v) })
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| MuseError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(f))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads an interactions file; rows keep file order.
pub fn parse_interactions(path: &Path) -> Result<Vec<InteractionRow>> {
    let mut rdr = open_csv(path)?;
    let cols = Columns::resolve(path, rdr.headers()?, &INTERACTION_COLUMNS)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let content_type = match cols.field(&rec, 4, line)? {
            "0" => ContentType::Question,
            "1" => ContentType::Lecture,
            other => return Err(cols.invalid(line, "content_type_id", other)),
        };
        let user_answer = match cols.opt_num(&rec, 6, "user_answer", line)? {
            None => None,
            Some(v) if (0.0..=3.0).contains(&v) && v.fract() == 0.0 => Some(v as u8),
            Some(_) => return Err(cols.invalid(line, "user_answer", cols.field(&rec, 6, line)?)),
        };
        let answered_correctly = match cols.opt_num(&rec, 7, "answered_correctly", line)? {
            None => None,
            Some(v) if v == 0.0 || v == 1.0 => Some(v as u8),
            Some(_) => {
                return Err(cols.invalid(line, "answered_correctly", cols.field(&rec, 7, line)?))
            }
        };
        let prior_had_explanation = match cols.field(&rec, 9, line)? {
            "" | "-1" => None,
            "1" | "true" | "True" => Some(true),
            "0" | "false" | "False" => Some(false),
            other => return Err(cols.invalid(line, "prior_question_had_explanation", other)),
        };
        let row = InteractionRow {
            row_id: cols.num(&rec, 0, "row_id", line)?,
            timestamp: cols.num(&rec, 1, "timestamp", line)?,
            user_id: cols.num(&rec, 2, "user_id", line)?,
            content_id: cols.num(&rec, 3, "content_id", line)?,
            content_type,
            task_container_id: cols.num(&rec, 5, "task_container_id", line)?,
            user_answer,
            answered_correctly,
            prior_elapsed_time: cols.opt_num(&rec, 8, "prior_question_elapsed_time", line)?,
            prior_had_explanation,
        };
        row.validate().map_err(|r| cols.malformed(line, r))?;
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes rows in the interactions layout; lecture answers use the `-1`
/// sentinel as in the competition files.
pub fn write_interactions(path: &Path, rows: &[InteractionRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?);
    let io = |e| MuseError::io(path, e);
    writeln!(w, "{}", INTERACTION_COLUMNS.join(",")).map_err(io)?;
    for r in rows {
        let (ua, ac) = match r.content_type {
            ContentType::Lecture => ("-1".to_string(), "-1".to_string()),
            ContentType::Question => (fmt_opt(r.user_answer), fmt_opt(r.answered_correctly)),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.row_id,
            r.timestamp,
            r.user_id,
            r.content_id,
            if r.is_question() { 0 } else { 1 },
            r.task_container_id,
            ua,
            ac,
            fmt_opt(r.prior_elapsed_time),
            fmt_opt(r.prior_had_explanation.map(u8::from)),
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn parse_questions(path: &Path) -> Result<HashMap<u32, QuestionMeta>> {
    let mut rdr = open_csv(path)?;
    let cols = Columns::resolve(path, rdr.headers()?, &QUESTION_COLUMNS)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let correct_answer: u8 = cols.num(&rec, 2, "correct_answer", line)?;
        if correct_answer > 3 {
            return Err(cols.invalid(line, "correct_answer", &correct_answer.to_string()));
        }
        let part: u8 = cols.num(&rec, 3, "part", line)?;
        if !(1..=7).contains(&part) {
            return Err(cols.invalid(line, "part", &part.to_string()));
        }
        let raw_tags = cols.field(&rec, 4, line)?;
        let tags = raw_tags
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| cols.malformed(line, format!("bad tag `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let q = QuestionMeta {
            question_id: cols.num(&rec, 0, "question_id", line)?,
            bundle_id: cols.num(&rec, 1, "bundle_id", line)?,
            correct_answer,
            part,
            tags_missing: tags.is_empty(),
            tags,
        };
        out.insert(q.question_id, q);
    }
    Ok(out)
}

pub fn parse_lectures(path: &Path) -> Result<HashMap<u32, LectureMeta>> {
    let mut rdr = open_csv(path)?;
    let cols = Columns::resolve(path, rdr.headers()?, &LECTURE_COLUMNS)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let part: u8 = cols.num(&rec, 2, "part", line)?;
        if !(1..=7).contains(&part) {
            return Err(cols.invalid(line, "part", &part.to_string()));
        }
        let ty = cols.field(&rec, 3, line)?;
        let kind = LectureType::parse(ty).ok_or_else(|| cols.invalid(line, "type_of", ty))?;
        let l = LectureMeta {
            lecture_id: cols.num(&rec, 0, "lecture_id", line)?,
            tag: cols.num(&rec, 1, "tag", line)?,
            part,
            kind,
        };
        out.insert(l.lecture_id, l);
    }
    Ok(out)
}

pub fn write_questions(path: &Path, questions: &[QuestionMeta]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?);
    let io = |e| MuseError::io(path, e);
    writeln!(w, "{}", QUESTION_COLUMNS.join(",")).map_err(io)?;
    for q in questions {
        let tags: Vec<String> = q.tags.iter().map(u32::to_string).collect();
        writeln!(w, "{},{},{},{},{}", q.question_id, q.bundle_id, q.correct_answer, q.part, tags.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_lectures(path: &Path, lectures: &[LectureMeta]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?);
    let io = |e| MuseError::io(path, e);
    writeln!(w, "{}", LECTURE_COLUMNS.join(",")).map_err(io)?;
    for l in lectures {
        writeln!(w, "{},{},{},{}", l.lecture_id, l.tag, l.part, l.kind.as_str()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-user chronological histories keyed by user id.
pub fn group_by_user(rows: &[InteractionRow]) -> BTreeMap<u64, UserHistory> {
    let mut map: BTreeMap<u64, UserHistory> = BTreeMap::new();
    for r in rows {
        map.entry(r.user_id)
            .or_insert_with(|| UserHistory { user_id: r.user_id, rows: Vec::new() })
            .rows
            .push(r.clone());
    }
    for h in map.values_mut() {
        h.rows.sort_by_key(|r| (r.timestamp, r.row_id));
    }
    map
}

/// Splits rows (in global file order) into a training head and a blend
/// tail holding the last `⌈fraction·N⌉` rows.
pub fn split_tail(rows: &[InteractionRow], holdout_fraction: f64) -> Result<(Vec<InteractionRow>, Vec<InteractionRow>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(MuseError::InvalidArgument(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let n_blend = tail_len(rows.len(), holdout_fraction);
    let cut = rows.len() - n_blend;
    Ok((rows[..cut].to_vec(), rows[cut..].to_vec()))
}

pub fn tail_len(n: usize, fraction: f64) -> usize {
    // Guard against 0.1 * 100 = 10.000000000000002 style overshoot.
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).min(n)
}

/// A parsed data directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub rows: Vec<InteractionRow>,
    pub catalog: ContentCatalog,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            dir: dir.to_path_buf(),
            rows: parse_interactions(&dir.join(INTERACTIONS_FILE))?,
            catalog: ContentCatalog::load(dir)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const HEADER: &str = "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,answered_correctly,prior_question_elapsed_time,prior_question_had_explanation\n";

    #[test]
    fn parses_fixture_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            &format!("{HEADER}0,0,115,5692,0,1,3,1,,\n1,56943,115,5716,0,2,2,1,37000.0,False\n2,118363,115,128,1,0,-1,-1,,\n"),
        );
        let rows = parse_interactions(&p).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(
            rows[0],
            InteractionRow {
                row_id: 0,
                timestamp: 0,
                user_id: 115,
                content_id: 5692,
                content_type: ContentType::Question,
                task_container_id: 1,
                user_answer: Some(3),
                answered_correctly: Some(1),
                prior_elapsed_time: None,
                prior_had_explanation: None,
            }
        );
        assert_eq!(rows[1].prior_elapsed_time, Some(37000.0));
        assert_eq!(rows[1].prior_had_explanation, Some(false));
        assert_eq!(rows[2].content_type, ContentType::Lecture);
        assert_eq!(rows[2].answered_correctly, None);
        assert_eq!(rows[2].user_answer, None);
    }

    #[test]
    fn rejects_bad_rows_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", &format!("{HEADER}0,0,1,5,0,1,7,1,,\n"));
        match parse_interactions(&p) {
            Err(MuseError::InvalidEnum { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "user_answer");
            }
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "b.csv", &format!("{HEADER}0,0,1,5,0,1,1,1,,\n1,zz,1,5,0,1,1,1,,\n"));
        assert!(matches!(parse_interactions(&p), Err(MuseError::MalformedRow { line: 3, .. })));
        let p = write(dir.path(), "c.csv", "row_id,timestamp\n0,0\n");
        assert!(matches!(parse_interactions(&p), Err(MuseError::MissingColumn { .. })));
        let p = write(dir.path(), "d.csv", &format!("{HEADER}0,0,1,5,2,1,1,1,,\n"));
        assert!(matches!(parse_interactions(&p), Err(MuseError::InvalidEnum { .. })));
        let p = write(dir.path(), "e.csv", &format!("{HEADER}0,0,1,5,1,1,2,1,,\n"));
        assert!(matches!(parse_interactions(&p), Err(MuseError::MalformedRow { .. })));
    }

    #[test]
    fn parses_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(
            dir.path(),
            "q.csv",
            "question_id,bundle_id,correct_answer,part,tags\n5692,5692,3,5,151 168\n7,7,0,1,\n",
        );
        let qs = parse_questions(&q).unwrap();
        assert_eq!(qs[&5692].correct_answer, 3);
        assert_eq!(qs[&5692].part, 5);
        assert_eq!(qs[&5692].tags, vec![151, 168]);
        assert!(!qs[&5692].tags_missing);
        assert!(qs[&7].tags.is_empty() && qs[&7].tags_missing);

        let l = write(dir.path(), "l.csv", "lecture_id,tag,part,type_of\n89,159,5,concept\n100,70,1,solving question\n");
        let ls = parse_lectures(&l).unwrap();
        assert_eq!(ls[&100].kind, LectureType::SolvingQuestion);
        let bad = write(dir.path(), "m.csv", "lecture_id,tag,part,type_of\n89,159,5,video\n");
        assert!(matches!(parse_lectures(&bad), Err(MuseError::InvalidEnum { .. })));

        let cat = ContentCatalog { questions: qs, lectures: ls };
        assert!(matches!(cat.question(1), Err(MuseError::UnknownContentId(1))));
    }

    fn row(row_id: u64, user_id: u64, timestamp: u64) -> InteractionRow {
        InteractionRow {
            row_id,
            timestamp,
            user_id,
            content_id: 1,
            content_type: ContentType::Question,
            task_container_id: 0,
            user_answer: Some(0),
            answered_correctly: Some(1),
            prior_elapsed_time: None,
            prior_had_explanation: None,
        }
    }

    #[test]
    fn grouping_sorts_and_breaks_ties_by_row_id() {
        let rows = vec![row(3, 1, 50), row(0, 2, 10), row(1, 1, 50), row(2, 1, 20), row(4, 2, 5)];
        let g = group_by_user(&rows);
        assert_eq!(g.len(), 2);
        let ids: Vec<u64> = g[&1].rows.iter().map(|r| r.row_id).collect();
        assert_eq!(ids, vec![2, 1, 3]);
        let ids: Vec<u64> = g[&2].rows.iter().map(|r| r.row_id).collect();
        assert_eq!(ids, vec![4, 0]);
    }

    #[test]
    fn tail_split_uses_ceiling() {
        let rows: Vec<_> = (0..101).map(|i| row(i, 1, i)).collect();
        let (a, b) = split_tail(&rows[..100], 0.1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(b[0].row_id, 90);
        let (a, b) = split_tail(&rows, 0.1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 11));
        assert!(split_tail(&rows, 0.0).is_err());
        assert!(split_tail(&rows, 1.0).is_err());
    }
}
