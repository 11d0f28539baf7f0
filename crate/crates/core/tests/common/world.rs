//! Small generated datasets and model configs for the integration suites.

use muse_core::datamodel::{group_by_user, ContentCatalog, InteractionRow};
use muse_core::features::{extract_steps, FeatureContext, LectureState, QuestionStep, Response, N_GLOBAL};
use muse_core::muse_global::GlobalConfig;
use muse_core::muse_local::LocalConfig;
use muse_core::pipeline::{sized_global, sized_local};
use muse_core::simgen::{self, SimConfig};
use rand::Rng;

pub struct World {
    pub rows: Vec<InteractionRow>,
    pub ctx: FeatureContext,
    pub users: Vec<Vec<QuestionStep>>,
}

pub fn sim(n_users: usize, n_questions: usize, seed: u64) -> SimConfig {
    SimConfig { n_users, n_questions, n_lectures: 12, mean_interactions: 40.0, seed, ..SimConfig::default() }
}

pub fn world_from(cfg: &SimConfig) -> World {
    let out = simgen::generate(cfg).expect("generate");
    let catalog = ContentCatalog {
        questions: out.questions.iter().map(|q| (q.question_id, q.clone())).collect(),
        lectures: out.lectures.iter().map(|l| (l.lecture_id, l.clone())).collect(),
    };
    let ctx = FeatureContext::fit(&out.rows, catalog).expect("fit");
    let users = group_by_user(&out.rows)
        .values()
        .map(|h| extract_steps(&ctx, &h.rows).expect("steps"))
        .filter(|s| !s.is_empty())
        .collect();
    World { rows: out.rows, ctx, users }
}

pub fn world(n_users: usize, seed: u64) -> World {
    world_from(&sim(n_users, 40, seed))
}

/// d_model 8, window 4, one block per stack.
pub fn tiny_local(ctx: &FeatureContext) -> LocalConfig {
    let c = LocalConfig {
        d_model: 8,
        n_user_enc: 1,
        n_ex_dec: 1,
        n_lect_enc: 1,
        heads: 2,
        window: 4,
        agg_half_width: 1,
        ffn_mult: 2,
        pool_hidden: 4,
        head_hidden: [8, 4],
        content_vocab: 0,
        tag_vocab: 0,
        task_container_vocab: 16,
        ..LocalConfig::default()
    };
    sized_local(&c, &ctx.catalog)
}

pub fn small_local(ctx: &FeatureContext, window: usize) -> LocalConfig {
    let c = LocalConfig {
        d_model: 16,
        n_user_enc: 2,
        n_ex_dec: 2,
        n_lect_enc: 1,
        heads: 2,
        window,
        pool_hidden: 8,
        head_hidden: [16, 8],
        content_vocab: 0,
        tag_vocab: 0,
        task_container_vocab: 64,
        ..LocalConfig::default()
    };
    sized_local(&c, &ctx.catalog)
}

pub fn small_global(ctx: &FeatureContext) -> GlobalConfig {
    sized_global(&GlobalConfig { d: 16, layers: 2, dropout: 0.1, emb_dim: 4, ..GlobalConfig::default() }, &ctx.catalog)
}

/// Replaces every field of `s` with random values valid for the catalog
/// sizes in `local`.
pub fn scramble<R: Rng>(s: &mut QuestionStep, local: &LocalConfig, rng: &mut R) {
    let max_q = (local.content_vocab - 2) as u32;
    s.content_id = rng.random_range(0..=max_q);
    s.bundle_id = rng.random_range(0..=max_q);
    s.part = rng.random_range(1..=7);
    s.tags = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..(local.tag_vocab - 1) as u32)).collect();
    s.content_answer = rng.random_range(0..4);
    s.task_container_id = rng.random_range(0..100_000);
    s.response = Response::from_code(rng.random_range(0..Response::COUNT as u8)).expect("code in range");
    s.elapsed_seconds = if rng.random_bool(0.3) { None } else { Some(rng.random_range(0.0..400.0)) };
    s.lag_seconds = rng.random_range(0.0..400.0);
    s.had_explanation = [None, Some(false), Some(true)][rng.random_range(0..3)];
    s.attempts = rng.random_range(0..5);
    s.lecture = LectureState { part: rng.random_range(0..=7), kind: rng.random_range(0..=4), tag: rng.random_range(0..=15) };
    s.global = [0.0; N_GLOBAL].map(|_| rng.random_range(0.0..1.0));
    s.label = [None, Some(0), Some(1)][rng.random_range(0..3)];
}
