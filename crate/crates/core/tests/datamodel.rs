use muse_core::datamodel::*;
use muse_core::simgen::{generate, SimConfig};
use proptest::prelude::*;

fn arb_row() -> impl Strategy<Value = InteractionRow> {
    (
        0u64..1_000_000,
        0u64..10_000_000_000,
        0u64..50,
        0u32..20_000,
        any::<bool>(),
        0u32..10_000,
        (0u8..4, 0u8..2),
        prop::option::of(0u32..400_000),
        prop::option::of(any::<bool>()),
    )
        .prop_map(|(row_id, timestamp, user_id, content_id, lecture, tc, (ua, ac), el, he)| InteractionRow {
            row_id,
            timestamp,
            user_id,
            content_id,
            content_type: if lecture { ContentType::Lecture } else { ContentType::Question },
            task_container_id: tc,
            user_answer: (!lecture).then_some(ua),
            answered_correctly: (!lecture).then_some(ac),
            prior_elapsed_time: el.map(|v| v as f64 * 0.5),
            prior_had_explanation: he,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_parse_round_trips(rows in prop::collection::vec(arb_row(), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        write_interactions(&p, &rows).unwrap();
        prop_assert_eq!(parse_interactions(&p).unwrap(), rows);
    }

    #[test]
    fn grouping_preserves_the_multiset(rows in prop::collection::vec(arb_row(), 0..200)) {
        let mut rows = rows;
        for (i, r) in rows.iter_mut().enumerate() {
            r.row_id = i as u64;
        }
        let groups = group_by_user(&rows);
        let mut flat: Vec<InteractionRow> = groups.values().flat_map(|h| h.rows.clone()).collect();
        for h in groups.values() {
            prop_assert!(h.rows.iter().all(|r| r.user_id == h.user_id));
            prop_assert!(h.rows.windows(2).all(|w| (w[0].timestamp, w[0].row_id) < (w[1].timestamp, w[1].row_id)));
        }
        flat.sort_by_key(|r| r.row_id);
        prop_assert_eq!(flat, rows);
    }

    #[test]
    fn tail_split_partitions(n in 1usize..300, frac in 0.01f64..0.99) {
        let rows: Vec<InteractionRow> = (0..n as u64)
            .map(|i| InteractionRow {
                row_id: i,
                timestamp: i,
                user_id: i % 7,
                content_id: 0,
                content_type: ContentType::Question,
                task_container_id: 0,
                user_answer: Some(0),
                answered_correctly: Some(0),
                prior_elapsed_time: None,
                prior_had_explanation: None,
            })
            .collect();
        let (a, b) = split_tail(&rows, frac).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(b.len(), ((frac * n as f64) - 1e-9).ceil() as usize);
        let joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(joined, rows);
    }
}

#[test]
fn generated_logs_parse_and_group() {
    let cfg = SimConfig { n_users: 150, mean_interactions: 70.0, ..SimConfig::default() };
    let out = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.rows, out.rows);
    assert_eq!(ds.catalog.questions.len(), cfg.n_questions);
    assert_eq!(ds.catalog.lectures.len(), cfg.n_lectures);
    for r in &ds.rows {
        if r.is_question() {
            ds.catalog.question(r.content_id).unwrap();
        } else {
            ds.catalog.lecture(r.content_id).unwrap();
        }
    }
    let rows = &ds.rows[..10_000];
    let total: usize = group_by_user(rows).values().map(|h| h.rows.len()).sum();
    assert_eq!(total, 10_000);
}

#[test]
fn tail_split_can_cut_through_a_user() {
    // The blend tail is a global row suffix; the user straddling the cut has
    // rows on both sides, with the train side strictly earlier.
    let out = generate(&SimConfig { n_users: 100, ..SimConfig::default() }).unwrap();
    let (train, blend) = split_tail(&out.rows, 0.1).unwrap();
    let straddler = blend[0].user_id;
    let last_train = train.iter().filter(|r| r.user_id == straddler).map(|r| r.timestamp).max();
    if let Some(t) = last_train {
        assert!(blend.iter().filter(|r| r.user_id == straddler).all(|r| r.timestamp >= t));
    }
}
