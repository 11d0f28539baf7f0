//! Property checks shared by the module suites and the acceptance run.

use muse_core::features::{LocalFeatureFrame, QuestionStep, Response};
use muse_core::muse_global::{GlobalModel, UserStreamState};
use muse_core::muse_local::{FrameInputs, LocalModel};
use muse_core::numcore::Graph;
use muse_core::training::apply_ram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd_max_rel_err;
use super::world::{scramble, tiny_local, world, World};

/// Weighted BCE over the labeled positions of a frame.
fn frame_targets(x: &FrameInputs) -> (Vec<f64>, Vec<f64>) {
    let y = x.labels.iter().map(|l| l.unwrap_or(0) as f64).collect();
    let w = x.labels.iter().map(|l| l.is_some() as u8 as f64).collect();
    (y, w)
}

/// Worst relative finite-difference error over every parameter of a tiny
/// local model (d_model 8, window 4) on a partially padded frame.
pub fn local_fd_error(seed: u64) -> f64 {
    let w = world(12, seed);
    let cfg = tiny_local(&w.ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LocalModel::new(cfg.clone(), &mut rng).expect("model");
    let user = w.users.iter().find(|s| s.len() >= 3).expect("a user with three questions");
    let mut frame = LocalFeatureFrame::from_steps(user, 2, 4);
    // Every valid position contributes to the loss.
    for (s, &v) in frame.steps.iter_mut().zip(&frame.valid) {
        if v && s.label.is_none() {
            s.label = Some(1);
        }
    }
    let x = FrameInputs::new(&cfg, &frame).expect("inputs");
    let (y, wt) = frame_targets(&x);
    fd_max_rel_err(model.store(), &[], 1e-5, 1e-4, |g, _| {
        let out = model.forward(g, &x, None, None)?;
        g.bce_sum(out.probs, &y, &wt)
    })
}

fn dense(model: &LocalModel, frame: &LocalFeatureFrame) -> Vec<f64> {
    let x = FrameInputs::new(&model.config, frame).expect("inputs");
    let mut g = Graph::new(model.store());
    let out = model.forward(&mut g, &x, None, None).expect("forward");
    g.value(out.probs).data().to_vec()
}

/// Random frames with everything after a random position (and that
/// position's own label) rewritten. Returns the number of frames whose
/// earlier predictions changed in any bit.
pub fn local_causality_violations(world: &World, model: &LocalModel, frames: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model.config.window;
    let mut bad = 0;
    for _ in 0..frames {
        let user = &world.users[rng.random_range(0..world.users.len())];
        let end = rng.random_range(0..user.len());
        let frame = LocalFeatureFrame::from_steps(user, end, w);
        let first = frame.valid.iter().position(|&v| v).expect("target is valid");
        let k = rng.random_range(first..w);
        let before = dense(model, &frame);
        let mut changed = frame.clone();
        changed.steps[k].label = [None, Some(0), Some(1)][rng.random_range(0..3)];
        for s in &mut changed.steps[k + 1..] {
            scramble(s, &model.config, &mut rng);
        }
        let after = dense(model, &changed);
        if before[..=k].iter().zip(&after[..=k]).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    bad
}

/// As [`local_causality_violations`] for whole histories of the global model.
pub fn global_causality_violations(world: &World, model: &GlobalModel, histories: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local_sizes = super::world::small_local(&world.ctx, 4);
    let mut bad = 0;
    for _ in 0..histories {
        let user = &world.users[rng.random_range(0..world.users.len())];
        let k = rng.random_range(0..user.len());
        let before = model.forward_steps(user).expect("forward");
        let mut changed: Vec<QuestionStep> = user.clone();
        changed[k].label = [None, Some(0), Some(1)][rng.random_range(0..3)];
        for s in &mut changed[k + 1..] {
            scramble(s, &local_sizes, &mut rng);
        }
        let after = model.forward_steps(&changed).expect("forward");
        if before[..=k].iter().zip(&after[..=k]).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    bad
}

/// Largest gap between whole-sequence and one-row-at-a-time predictions of
/// the global model over the first `histories` users.
pub fn streaming_max_gap(world: &World, model: &GlobalModel, histories: usize) -> f64 {
    let by_user = muse_core::datamodel::group_by_user(&world.rows);
    let mut worst: f64 = 0.0;
    for h in by_user.values().take(histories) {
        let batch = model.forward_sequence(&world.ctx, &h.rows).expect("batch");
        let mut state = UserStreamState::new(model);
        let streamed: Vec<f64> =
            h.rows.iter().filter_map(|r| state.advance(model, &world.ctx, r).expect("advance")).collect();
        assert_eq!(batch.len(), streamed.len(), "one prediction per question");
        for (a, b) in batch.iter().zip(&streamed) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Flips every Correct/Incorrect response token of a frame.
pub fn flip_responses(frame: &LocalFeatureFrame) -> LocalFeatureFrame {
    let mut f = frame.clone();
    for s in &mut f.steps {
        s.response = match s.response {
            Response::Correct => Response::Incorrect,
            Response::Incorrect => Response::Correct,
            r => r,
        };
    }
    f
}

/// Whether full masking makes predictions blind to the response tokens:
/// a frame and its flipped copy, both masked at ratio 1, must predict the
/// same bits. Returns the number of frames that differ.
pub fn ram_flip_violations(world: &World, model: &LocalModel, frames: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model.config.window;
    let mut bad = 0;
    for _ in 0..frames {
        let user = &world.users[rng.random_range(0..world.users.len())];
        let end = rng.random_range(0..user.len());
        let frame = LocalFeatureFrame::from_steps(user, end, w);
        let (a, _) = apply_ram(&frame, 1.0, &mut rng);
        let (b, _) = apply_ram(&flip_responses(&frame), 1.0, &mut rng);
        let pa = dense(model, &a);
        let pb = dense(model, &b);
        if pa.iter().zip(&pb).any(|(x, y)| x.to_bits() != y.to_bits()) {
            bad += 1;
        }
    }
    bad
}
