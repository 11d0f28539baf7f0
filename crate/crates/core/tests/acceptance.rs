//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any of them fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::checks::{
    global_causality_violations, local_causality_violations, local_fd_error, ram_flip_violations, streaming_max_gap,
};
use common::gradcases::cases;
use common::pair_count_auc;
use common::world::{small_global, small_local, world};
use muse_core::config::RunConfig;
use muse_core::fusion::run_fusion;
use muse_core::metrics::roc_auc;
use muse_core::muse_global::GlobalModel;
use muse_core::muse_local::LocalModel;
use muse_core::pipeline::{self, AnyModel};
use muse_core::simgen;
use muse_core::training::{adversarial_finetune, train_local, TrainConfig, TrainSink};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");
const PINNED_ORACLE_AUC: f64 = 0.8113676537671526;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Run {
    results: Vec<(usize, bool, String)>,
}

impl Run {
    fn report(&mut self, n: usize, name: &str, budget: Duration, elapsed: Duration, o: Outcome) {
        let pass = o.pass && elapsed <= budget;
        let verdict = if pass { "PASS" } else { "FAIL" };
        let line = format!(
            "criterion {n} {name}: {verdict} ({}; {:.1}s of {}s)",
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        self.results.push((n, pass, line));
    }

    fn check(&mut self, n: usize, name: &str, budget_s: u64, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = f();
        self.report(n, name, Duration::from_secs(budget_s), t.elapsed(), o);
    }
}

fn gradients() -> Outcome {
    let mut worst_op: f64 = 0.0;
    let mut worst_name = "";
    for (name, case) in cases() {
        for variant in 0..2 {
            for seed in 0..5 {
                let e = case(seed, variant);
                if !(e <= worst_op) {
                    worst_op = e;
                    worst_name = name;
                }
            }
        }
    }
    let worst_e2e = (0..5).map(local_fd_error).fold(0.0f64, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    outcome(
        worst_op <= 1e-4 && worst_e2e <= 1e-3,
        format!("worst op error {worst_op:.2e} ({worst_name}), worst end-to-end error {worst_e2e:.2e}, 5 seeds"),
    )
}

fn causality() -> Outcome {
    let w = world(120, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let local = LocalModel::new(small_local(&w.ctx, 64), &mut rng).expect("local model");
    let global = GlobalModel::new(small_global(&w.ctx), &mut rng).expect("global model");
    let l = local_causality_violations(&w, &local, 100, 1);
    let g = global_causality_violations(&w, &global, 100, 2);
    outcome(l == 0 && g == 0, format!("{l} local and {g} global frames of 100 changed"))
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=300);
        let levels = rng.random_range(1..=10);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let fast = roc_auc(&s, &y).expect("two classes");
        worst = worst.max((fast - pair_count_auc(&s, &y)).abs());
    }
    outcome(worst <= 1e-12, format!("max gap {worst:.1e} over 200 tied instances"))
}

fn streaming() -> Outcome {
    let w = world(80, 41);
    let m = GlobalModel::new(small_global(&w.ctx), &mut ChaCha8Rng::seed_from_u64(41)).expect("global model");
    let gap = streaming_max_gap(&w, &m, 50);
    outcome(gap <= 1e-9, format!("max gap {gap:.1e} over 50 histories"))
}

/// Loss means over four consecutive quarters of the run never rise.
fn quarters(losses: &[f64]) -> Vec<f64> {
    let q = losses.len() / 4;
    (0..4).map(|i| losses[i * q..(i + 1) * q].iter().sum::<f64>() / q as f64).collect()
}

fn ram_and_adversarial(run: &mut Run) {
    let t = Instant::now();
    let w = world(150, 51);
    let mut m = LocalModel::new(small_local(&w.ctx, 16), &mut ChaCha8Rng::seed_from_u64(51)).expect("local model");
    let cfg = TrainConfig { lr_base: 3e-3, batch: 16, warmup: 20, epochs: 4, ram_ratio: 0.25, seed: 52, ..TrainConfig::default() };
    let report = train_local(&mut m, &w.users, &cfg, &mut TrainSink::none()).expect("training");
    let q = quarters(&report.losses());
    let monotone = q.windows(2).all(|p| p[1] <= p[0]);
    let flips = ram_flip_violations(&w, &m, 100, 53);
    run.report(
        7,
        "response masking",
        Duration::from_secs(120),
        t.elapsed(),
        outcome(
            monotone && flips == 0,
            format!(
                "quarter losses {:.4} {:.4} {:.4} {:.4}; {flips} of 100 flipped frames changed at ratio 1",
                q[0], q[1], q[2], q[3]
            ),
        ),
    );

    let t = Instant::now();
    let adv = TrainConfig { adv_extra_steps: 50, ..cfg };
    let start = report.records.len() as u64;
    let r = adversarial_finetune(&mut m, &w.users, &adv, start, &mut TrainSink::none()).expect("fine-tuning");
    let inside = r.batches.iter().all(|b| b.max_delta_norm <= adv.adv_epsilon);
    let up = r.batches.iter().filter(|b| b.ascent_loss >= b.clean_loss).count();
    let max_norm = r.batches.iter().map(|b| b.max_delta_norm).fold(0.0, f64::max);
    run.report(
        8,
        "adversarial constraint",
        Duration::from_secs(120),
        t.elapsed(),
        outcome(
            r.batches.len() == 50 && inside && up * 10 >= 9 * r.batches.len(),
            format!("max norm {max_norm:.4} (eps {}), ascent loss >= clean in {up} of {} batches", adv.adv_epsilon, r.batches.len()),
        ),
    );
}

fn desk_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::from_file(Path::new(DESK_CONFIG)).expect("desk config");
    c.data_dir = root.join("data");
    c.out_dir = root.join("out");
    c.threads = 1;
    c
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn desk_runs(run: &mut Run) {
    let first = tempfile::tempdir().expect("tempdir");
    let cfg = desk_config(first.path());
    let t = Instant::now();
    let out = pipeline::with_threads(1, || pipeline::run_all(&cfg)).expect("pool").expect("pipeline");
    let pipeline_time = t.elapsed();
    let (l, g) = (out.local.auc, out.global.auc);
    let floor = 0.70f64.max(PINNED_ORACLE_AUC - 0.08);
    let below_oracle = l <= PINNED_ORACLE_AUC + 0.01 && g <= PINNED_ORACLE_AUC + 0.01;
    run.report(
        5,
        "desk-scale learning",
        Duration::from_secs(600),
        pipeline_time,
        outcome(
            l >= floor && g >= floor && below_oracle,
            format!("local AUC {l:.4}, global AUC {g:.4}, need >= {floor:.4}; oracle {PINNED_ORACLE_AUC:.4}"),
        ),
    );

    let t = Instant::now();
    let prepared = pipeline::load_prepared(&cfg).expect("prepared data");
    let (AnyModel::Local(lm), _) = AnyModel::load(&out.local_checkpoint).expect("local checkpoint") else {
        panic!("local checkpoint holds a local model")
    };
    let (AnyModel::Global(gm), _) = AnyModel::load(&out.global_checkpoint).expect("global checkpoint") else {
        panic!("global checkpoint holds a global model")
    };
    let rows = pipeline::blend_rows(&lm, &gm, &prepared).expect("blend rows");
    let r = &out.fusion.report;
    let best = r.auc_local.max(r.auc_global);
    let mut margins: Vec<f64> = (0..5u64)
        .map(|s| {
            let p = prepared.provenance;
            let o = run_fusion(&rows, &p, &|id| prepared.train_ids.contains(&id), &[p, p], cfg.folds, cfg.seed + s, &cfg.gbdt)
                .expect("fusion");
            o.report.auc_fused - best
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let median = margins[2];
    let fusion_time = t.elapsed();
    run.report(
        6,
        "fusion",
        Duration::from_secs(120),
        fusion_time,
        outcome(
            r.auc_fused >= best - 0.001 && median > 0.0,
            format!(
                "fused {:.4} vs local {:.4} and global {:.4} on {} rows; median margin over 5 fold seeds {median:+.4}",
                r.auc_fused, r.auc_local, r.auc_global, r.n_rows
            ),
        ),
    );

    let second = tempfile::tempdir().expect("tempdir");
    let cfg2 = desk_config(second.path());
    let t = Instant::now();
    pipeline::with_threads(1, || pipeline::run_all(&cfg2)).expect("pool").expect("pipeline");
    let both = pipeline_time + t.elapsed();
    let (fa, fb) = (files_under(first.path()), files_under(second.path()));
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| std::fs::read(first.path().join(p)).ok() != std::fs::read(second.path().join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let ckpts = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    run.report(
        9,
        "determinism",
        Duration::from_secs(720),
        both,
        outcome(
            fa == fb && differing.is_empty() && ckpts >= 2,
            if differing.is_empty() {
                format!("{} files byte-identical across two runs, {ckpts} checkpoints", fa.len())
            } else {
                format!("differing files: {}", differing.join(", "))
            },
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--list` or a filter;
    // listing should not trigger the long run.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    assert_eq!(
        simgen::generate(&simgen::SimConfig::default()).and_then(|o| o.oracle_auc()).expect("oracle"),
        PINNED_ORACLE_AUC
    );
    let mut run = Run { results: Vec::new() };
    run.check(1, "finite-difference gradients", 120, gradients);
    run.check(2, "causality", 60, causality);
    run.check(3, "AUC oracle", 10, auc_oracle);
    run.check(4, "streaming equivalence", 30, streaming);
    desk_runs(&mut run);
    ram_and_adversarial(&mut run);
    run.results.sort_by_key(|r| r.0);
    for (_, _, line) in &run.results {
        println!("{line}");
    }
    let passed = run.results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed} of {} criteria passed", run.results.len());
    if passed != run.results.len() {
        std::process::exit(1);
    }
}
