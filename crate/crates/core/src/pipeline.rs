//! End-to-end steps shared by the command-line tool and the tests:
//! generation, splitting, training, evaluation, blending and prediction.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::datamodel::{group_by_user, parse_interactions, split_tail, ContentCatalog, Dataset, InteractionRow};
use crate::error::{MuseError, Result};
use crate::features::{extract_steps, FeatureContext, QuestionStep};
use crate::fusion::{run_fusion, BlendRow, FusionOutput, Provenance};
use crate::metrics::EvalReport;
use crate::muse_global::{GlobalConfig, GlobalModel};
use crate::muse_local::{LocalConfig, LocalModel};
use crate::numcore::Archive;
use crate::simgen;
use crate::training::{self, TrainSink};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Local,
    Global,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Local => "local",
            ModelKind::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(ModelKind::Local),
            "global" => Ok(ModelKind::Global),
            _ => Err(MuseError::InvalidArgument(format!("unknown model `{s}` (expected local or global)"))),
        }
    }
}

/// Features for the train split and for the held-out rows.
pub struct Prepared {
    pub ctx: FeatureContext,
    pub provenance: Provenance,
    pub train_ids: HashSet<u64>,
    /// Steps of each user computed from training rows only.
    pub train_users: Vec<Vec<QuestionStep>>,
    /// Full histories of users with held-out questions.
    pub eval_users: Vec<Vec<QuestionStep>>,
    /// Marks the labeled held-out steps of `eval_users`.
    pub eval_scored: Vec<Vec<bool>>,
}

pub fn prepare(rows: &[InteractionRow], catalog: ContentCatalog, holdout_fraction: f64) -> Result<Prepared> {
    let (train, blend) = split_tail(rows, holdout_fraction)?;
    let ctx = FeatureContext::fit(&train, catalog)?;
    let histories: Vec<_> = group_by_user(&train).into_values().collect();
    let train_users = histories
        .par_iter()
        .map(|h| extract_steps(&ctx, &h.rows))
        .collect::<Result<Vec<_>>>()?;
    let blend_ids: HashSet<u64> = blend.iter().map(|r| r.row_id).collect();
    let blend_users: HashSet<u64> = blend.iter().map(|r| r.user_id).collect();
    let full: Vec<_> = group_by_user(rows).into_values().filter(|h| blend_users.contains(&h.user_id)).collect();
    let eval_users = full
        .par_iter()
        .map(|h| extract_steps(&ctx, &h.rows))
        .collect::<Result<Vec<_>>>()?;
    let eval_scored = eval_users
        .iter()
        .map(|s| s.iter().map(|q| q.label.is_some() && blend_ids.contains(&q.row_id)).collect())
        .collect();
    Ok(Prepared {
        provenance: Provenance::of_rows(&train),
        train_ids: train.iter().map(|r| r.row_id).collect(),
        ctx,
        train_users,
        eval_users,
        eval_scored,
    })
}

impl Prepared {
    /// `(row_id, p, label)` for the scored held-out steps.
    pub fn scored(&self, preds: &[Vec<f64>]) -> Vec<(u64, f64, u8)> {
        let mut out = Vec::new();
        for ((steps, scored), p) in self.eval_users.iter().zip(&self.eval_scored).zip(preds) {
            for ((s, &k), &pv) in steps.iter().zip(scored).zip(p) {
                if k {
                    out.push((s.row_id, pv, s.label.expect("scored steps are labeled")));
                }
            }
        }
        out
    }
}

/// Fills vocabulary sizes left at 0 from the catalog.
pub fn sized_local(c: &LocalConfig, catalog: &ContentCatalog) -> LocalConfig {
    let mut c = c.clone();
    if c.content_vocab == 0 {
        c.content_vocab = catalog.max_question_id() as usize + 2;
    }
    if c.tag_vocab == 0 {
        c.tag_vocab = catalog.max_tag() as usize + 2;
    }
    c
}

pub fn sized_global(c: &GlobalConfig, catalog: &ContentCatalog) -> GlobalConfig {
    GlobalConfig {
        content_vocab: catalog.max_question_id() as usize + 2,
        tag_vocab: catalog.max_tag() as usize + 2,
        ..c.clone()
    }
}

/// Runs `f` on a pool with the configured number of threads.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MuseError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| MuseError::io(path, e))
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    create_dir(&cfg.data_dir)?;
    let out = simgen::generate(&cfg.sim_config())?;
    out.write(&cfg.data_dir)?;
    info!("generated {} rows into {}", out.rows.len(), cfg.data_dir.display());
    Ok(cfg.data_dir.clone())
}

pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let ds = Dataset::load(&cfg.data_dir)?;
    prepare(&ds.rows, ds.catalog, cfg.holdout_fraction)
}

/// `{model}.{step}.ckpt` in `dir` with the largest step.
pub fn latest_checkpoint(dir: &Path, model: &str) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            let step = name
                .strip_prefix(model)
                .and_then(|r| r.strip_prefix('.'))
                .and_then(|r| r.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, e.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| MuseError::Archive {
        path: dir.join(format!("{model}.<step>.ckpt")).display().to_string(),
        reason: "no checkpoint found".into(),
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Archive> {
    if !path.exists() {
        return Err(MuseError::Archive { path: path.display().to_string(), reason: "checkpoint not found".into() });
    }
    Archive::read(path)
}

/// A loaded component model.
pub enum AnyModel {
    Local(LocalModel),
    Global(GlobalModel),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<(Self, Archive)> {
        let a = read_checkpoint(path)?;
        let located = |e: MuseError| match e {
            MuseError::Archive { reason, .. } => MuseError::Archive { path: path.display().to_string(), reason },
            other => other,
        };
        let m = match a.meta("model") {
            Some("local") => AnyModel::Local(LocalModel::from_archive(&a).map_err(located)?),
            Some("global") => AnyModel::Global(GlobalModel::from_archive(&a).map_err(located)?),
            _ => {
                return Err(MuseError::Archive { path: path.display().to_string(), reason: "unknown model kind".into() })
            }
        };
        Ok((m, a))
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Local(_) => ModelKind::Local,
            AnyModel::Global(_) => ModelKind::Global,
        }
    }

    pub fn predict(&self, users: &[Vec<QuestionStep>]) -> Result<Vec<Vec<f64>>> {
        match self {
            AnyModel::Local(m) => training::predict_local(m, users),
            AnyModel::Global(m) => training::predict_global(m, users),
        }
    }
}

fn provenance_of(a: &Archive, path: &Path) -> Result<Provenance> {
    a.meta("provenance").and_then(Provenance::from_meta).ok_or_else(|| MuseError::Archive {
        path: path.display().to_string(),
        reason: "checkpoint does not record its training rows".into(),
    })
}

fn meta(prepared: &Prepared, seed: u64) -> Vec<(String, String)> {
    vec![("provenance".into(), prepared.provenance.to_meta()), ("seed".into(), seed.to_string())]
}

/// Trains one model on the train split; returns the final checkpoint path.
pub fn train(cfg: &RunConfig, kind: ModelKind, prepared: &Prepared) -> Result<PathBuf> {
    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(format!("{}.log", kind.name()));
    let mut log = Vec::new();
    let extra = meta(prepared, cfg.seed);
    let report = {
        let mut sink = TrainSink { log: Some(&mut log), checkpoint_dir: Some(&cfg.out_dir), meta: extra };
        match kind {
            ModelKind::Local => {
                let lc = sized_local(&cfg.local, &prepared.ctx.catalog);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut model = LocalModel::new(lc, &mut rng)?;
                info!("local model: {} parameters", model.store().num_elements());
                training::train_local(&mut model, &prepared.train_users, &cfg.local_train(), &mut sink)?
            }
            ModelKind::Global => {
                let gc = sized_global(&cfg.global, &prepared.ctx.catalog);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6C0B_A1);
                let mut model = GlobalModel::new(gc, &mut rng)?;
                info!("global model: {} parameters", model.store.num_elements());
                training::train_global(&mut model, &prepared.train_users, &cfg.global_train(), &mut sink)?
            }
        }
    };
    write_text(&log_path, &String::from_utf8(log).expect("log is text"))?;
    report.checkpoints.last().cloned().ok_or_else(|| MuseError::InvalidArgument("training wrote no checkpoint".into()))
}

/// Adversarial fine-tuning of a trained local checkpoint.
pub fn finetune_adv(cfg: &RunConfig, checkpoint: &Path, prepared: &Prepared) -> Result<(PathBuf, training::AdvReport)> {
    create_dir(&cfg.out_dir)?;
    let (model, archive) = AnyModel::load(checkpoint)?;
    let AnyModel::Local(mut model) = model else {
        return Err(MuseError::InvalidArgument(format!("{} is not a local model checkpoint", checkpoint.display())));
    };
    if provenance_of(&archive, checkpoint)? != prepared.provenance {
        return Err(MuseError::Provenance(format!("{} was trained on a different split", checkpoint.display())));
    }
    let start: u64 = archive.meta("step").and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut log = Vec::new();
    let report = {
        let mut sink = TrainSink { log: Some(&mut log), checkpoint_dir: Some(&cfg.out_dir), meta: meta(prepared, cfg.seed) };
        training::adversarial_finetune(&mut model, &prepared.train_users, &cfg.local_train(), start, &mut sink)?
    };
    write_text(&cfg.out_dir.join("local-adv.log"), &String::from_utf8(log).expect("log is text"))?;
    let path = report.checkpoints.last().cloned().expect("fine-tuning writes a final checkpoint");
    Ok((path, report))
}

/// Held-out evaluation of one checkpoint; writes `eval.{model}.txt`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, prepared: &Prepared) -> Result<EvalReport> {
    let (model, _) = AnyModel::load(checkpoint)?;
    let preds = model.predict(&prepared.eval_users)?;
    let scored = prepared.scored(&preds);
    let p: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let y: Vec<u8> = scored.iter().map(|s| s.2).collect();
    let report = EvalReport::compute(&p, &y)?;
    create_dir(&cfg.out_dir)?;
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut body = format!("checkpoint={name}\n");
    body.push_str(&report.to_string());
    write_text(&cfg.out_dir.join(format!("eval.{}.txt", model.kind().name())), &body)?;
    Ok(report)
}

/// Component predictions on the held-out rows, paired by row.
pub fn blend_rows(local: &LocalModel, global: &GlobalModel, prepared: &Prepared) -> Result<Vec<BlendRow>> {
    let pl = prepared.scored(&training::predict_local(local, &prepared.eval_users)?);
    let pg = prepared.scored(&training::predict_global(global, &prepared.eval_users)?);
    Ok(pl
        .iter()
        .zip(&pg)
        .map(|(&(row_id, p_local, label), &(_, p_global, _))| BlendRow { row_id, p_local, p_global, label })
        .collect())
}

/// Out-of-fold fusion of a local and a global checkpoint; writes the
/// blender dump, predictions and report into `out_dir`.
pub fn blend(cfg: &RunConfig, local: &Path, global: &Path, prepared: &Prepared) -> Result<FusionOutput> {
    let (lm, la) = AnyModel::load(local)?;
    let (gm, ga) = AnyModel::load(global)?;
    let (AnyModel::Local(lm), AnyModel::Global(gm)) = (lm, gm) else {
        return Err(MuseError::InvalidArgument("blend needs a local and a global checkpoint".into()));
    };
    let components = [provenance_of(&la, local)?, provenance_of(&ga, global)?];
    let rows = blend_rows(&lm, &gm, prepared)?;
    let out = run_fusion(
        &rows,
        &prepared.provenance,
        &|id| prepared.train_ids.contains(&id),
        &components,
        cfg.folds,
        cfg.seed,
        &cfg.gbdt,
    )?;
    create_dir(&cfg.out_dir)?;
    out.write(&rows, &cfg.out_dir)?;
    Ok(out)
}

/// Feature statistics of the train split of `data_dir`, as seen in training.
pub fn feature_context(cfg: &RunConfig) -> Result<FeatureContext> {
    let catalog = ContentCatalog::load(&cfg.data_dir)?;
    let rows = parse_interactions(&cfg.data_dir.join(crate::datamodel::INTERACTIONS_FILE))?;
    let train = split_tail(&rows, cfg.holdout_fraction)?.0;
    FeatureContext::fit(&train, catalog)
}

/// Predictions for every question row of an interactions file, each from
/// the rows before it in the same file. Writes `row_id,p` lines.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let (model, _) = AnyModel::load(checkpoint)?;
    let ctx = feature_context(cfg)?;
    let rows = parse_interactions(input)?;
    let users: Vec<_> = group_by_user(&rows).into_values().collect();
    let steps = users.iter().map(|h| extract_steps(&ctx, &h.rows)).collect::<Result<Vec<_>>>()?;
    let preds = model.predict(&steps)?;
    let mut out: Vec<(u64, f64)> = steps
        .iter()
        .zip(&preds)
        .flat_map(|(s, p)| s.iter().zip(p).map(|(q, &pv)| (q.row_id, pv)))
        .collect();
    out.sort_by_key(|x| x.0);
    let mut body = String::from("row_id,p\n");
    for (id, p) in &out {
        let _ = writeln!(body, "{id},{p}");
    }
    write_text(output, &body)?;
    Ok(out.len())
}

/// Result of [`run_all`].
pub struct PipelineOutput {
    pub local: EvalReport,
    pub global: EvalReport,
    pub fusion: FusionOutput,
    pub local_checkpoint: PathBuf,
    pub global_checkpoint: PathBuf,
}

/// generate, train both models, evaluate both, blend.
pub fn run_all(cfg: &RunConfig) -> Result<PipelineOutput> {
    generate(cfg)?;
    let prepared = load_prepared(cfg)?;
    let local_checkpoint = train(cfg, ModelKind::Local, &prepared)?;
    let global_checkpoint = train(cfg, ModelKind::Global, &prepared)?;
    let local = evaluate(cfg, &local_checkpoint, &prepared)?;
    let global = evaluate(cfg, &global_checkpoint, &prepared)?;
    let fusion = blend(cfg, &local_checkpoint, &global_checkpoint, &prepared)?;
    Ok(PipelineOutput { local, global, fusion, local_checkpoint, global_checkpoint })
}
