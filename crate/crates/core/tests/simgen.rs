use std::collections::HashMap;

use muse_core::datamodel::{ContentType, Dataset};
use muse_core::metrics::roc_auc;
use muse_core::simgen::{self, SimConfig, PARTS};

const PINNED_ORACLE_AUC: f64 = 0.8113676537671526;

fn small(seed: u64) -> SimConfig {
    SimConfig { n_users: 50, n_questions: 60, n_lectures: 10, mean_interactions: 40.0, seed, ..SimConfig::default() }
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simgen::generate(&small(3)).unwrap().write(a.path()).unwrap();
    simgen::generate(&small(3)).unwrap().write(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    assert_ne!(simgen::generate(&small(4)).unwrap().truth, simgen::generate(&small(3)).unwrap().truth);
}

#[test]
fn written_files_parse_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = simgen::generate(&small(5)).unwrap();
    out.write(dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.rows, out.rows);
    for r in ds.rows.iter().filter(|r| r.is_question()) {
        let q = ds.catalog.question(r.content_id).unwrap();
        assert_eq!(r.answered_correctly, r.user_answer.map(|a| (a == q.correct_answer) as u8));
    }
    for r in ds.rows.iter().filter(|r| r.content_type == ContentType::Lecture) {
        ds.catalog.lecture(r.content_id).unwrap();
    }
    let truth = simgen::read_truth(&dir.path().join(simgen::TRUTH_FILE)).unwrap();
    assert_eq!(truth, out.truth);
    let from_files = simgen::oracle_auc(&dir.path().join(simgen::TRUTH_FILE), &dir.path().join("train.csv")).unwrap();
    assert_eq!(from_files, out.oracle_auc().unwrap());
}

#[test]
fn degenerate_config_gives_half_accuracy() {
    let cfg = SimConfig {
        n_users: 1250,
        mean_interactions: 85.0,
        lecture_gain: 0.0,
        attempt_bonus: 0.0,
        skill_std: 0.0,
        difficulty_std: 0.0,
        noise_scale: 0.0,
        seed: 6,
        ..SimConfig::default()
    };
    let out = simgen::generate(&cfg).unwrap();
    let labels: Vec<u8> = out.rows.iter().filter_map(|r| r.answered_correctly).collect();
    assert!(labels.len() >= 100_000, "{} answered rows", labels.len());
    let acc = labels.iter().map(|&y| y as f64).sum::<f64>() / labels.len() as f64;
    assert!((acc - 0.5).abs() <= 0.01, "accuracy {acc}");
    assert!(out.truth.iter().all(|&(_, p)| p == 0.5));
}

/// Least-squares slope of correctness on the number of lectures the user
/// has watched on the question's part.
#[test]
fn lectures_raise_accuracy_on_their_part() {
    let out = simgen::generate(&SimConfig { n_users: 1500, seed: 7, ..SimConfig::default() }).unwrap();
    let part_of_q: HashMap<u32, u8> = out.questions.iter().map(|q| (q.question_id, q.part)).collect();
    let part_of_l: HashMap<u32, u8> = out.lectures.iter().map(|l| (l.lecture_id, l.part)).collect();
    let mut watched: HashMap<(u64, u8), f64> = HashMap::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in &out.rows {
        match r.content_type {
            ContentType::Lecture => *watched.entry((r.user_id, part_of_l[&r.content_id])).or_default() += 1.0,
            ContentType::Question => {
                let part = part_of_q[&r.content_id];
                xs.push(watched.get(&(r.user_id, part)).copied().unwrap_or(0.0));
                ys.push(r.answered_correctly.unwrap() as f64);
            }
        }
    }
    assert!(ys.len() >= 100_000);
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    assert!(cov / var > 0.0, "slope {}", cov / var);
    assert!(out.questions.iter().all(|q| (1..=PARTS as u8).contains(&q.part)));
}

#[test]
fn default_oracle_auc_is_pinned() {
    let out = simgen::generate(&SimConfig::default()).unwrap();
    assert_eq!(out.oracle_auc().unwrap(), PINNED_ORACLE_AUC);
    let n = out.rows.len();
    assert!((140_000..=180_000).contains(&n), "{n} rows");
}

#[test]
fn oracle_beats_a_per_question_baseline() {
    let out = simgen::generate(&SimConfig { n_users: 800, seed: 8, ..SimConfig::default() }).unwrap();
    let oracle = out.oracle_auc().unwrap();
    // Per-question accuracy fitted on the first half, scored on the second.
    let qs: Vec<_> = out.rows.iter().filter(|r| r.is_question()).collect();
    let (fit, test) = qs.split_at(qs.len() / 2);
    let mut acc: HashMap<u32, (f64, f64)> = HashMap::new();
    for r in fit {
        let e = acc.entry(r.content_id).or_default();
        e.0 += r.answered_correctly.unwrap() as f64;
        e.1 += 1.0;
    }
    let p: Vec<f64> = test.iter().map(|r| acc.get(&r.content_id).map_or(0.5, |(c, n)| (c + 1.0) / (n + 2.0))).collect();
    let y: Vec<u8> = test.iter().map(|r| r.answered_correctly.unwrap()).collect();
    let truth: HashMap<u64, f64> = out.truth.iter().copied().collect();
    let star: Vec<f64> = test.iter().map(|r| truth[&r.row_id]).collect();
    let baseline = roc_auc(&p, &y).unwrap();
    assert!(baseline <= roc_auc(&star, &y).unwrap() + 0.01);
    assert!(baseline > 0.6 && oracle > baseline);
}

#[test]
fn oracle_limits() {
    let rows = simgen::generate(&small(9)).unwrap().rows;
    let answered: Vec<_> = rows.iter().filter(|r| r.is_question()).collect();
    let constant: Vec<(u64, f64)> = answered.iter().map(|r| (r.row_id, 0.3)).collect();
    assert_eq!(simgen::oracle_auc_rows(&constant, &rows).unwrap(), 0.5);
    let exact: Vec<(u64, f64)> = answered.iter().map(|r| (r.row_id, r.answered_correctly.unwrap() as f64)).collect();
    assert_eq!(simgen::oracle_auc_rows(&exact, &rows).unwrap(), 1.0);
    assert!(simgen::oracle_auc_rows(&exact[1..], &rows).is_err());
}
