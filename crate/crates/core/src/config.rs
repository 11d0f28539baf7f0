//! Run configuration: flat `key = value` text files with `#` comments.
//!
//! ```text
//! # desk-scale run
//! seed = 42
//! local.d_model = 32
//! train.batch = 64
//! ```

use std::path::{Path, PathBuf};

use crate::error::{MuseError, Result};
use crate::fusion::GbdtConfig;
use crate::muse_global::GlobalConfig;
use crate::muse_local::LocalConfig;
use crate::simgen::SimConfig;
use crate::training::TrainConfig;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "data", "dataset directory (train.csv, questions.csv, lectures.csv)"),
    ("out_dir", "out", "directory for checkpoints, logs and reports"),
    ("seed", "42", "seed for data generation, initialization, sampling and folds"),
    ("threads", "0", "worker threads; 0 uses every core, 1 is the reference mode"),
    ("holdout_fraction", "0.1", "tail fraction of rows held out for blending and evaluation"),
    ("sim.n_users", "2000", "generated users"),
    ("sim.n_questions", "800", "generated questions"),
    ("sim.n_lectures", "60", "generated lectures"),
    ("sim.mean_interactions", "80", "mean events per user"),
    ("sim.lecture_prob", "0.06", "probability that an event is a lecture"),
    ("sim.lecture_gain", "0.25", "skill gain on a part per lecture watched"),
    ("sim.attempt_bonus", "0.4", "log-odds bonus on repeated questions"),
    ("sim.noise_scale", "0.005", "per-step standard deviation of skill drift"),
    ("sim.skill_std", "1", "standard deviation of part skills"),
    ("sim.difficulty_std", "1", "standard deviation of question difficulty"),
    ("sim.part_skill_correlation", "0.64", "correlation between a user's part skills"),
    ("sim.repeat_prob", "0.1", "probability of re-asking an earlier question"),
    ("local.d_model", "128", "local model width"),
    ("local.n_user_enc", "3", "user encoder blocks"),
    ("local.n_ex_dec", "3", "exercise decoder blocks"),
    ("local.n_lect_enc", "2", "lecture encoder blocks"),
    ("local.heads", "8", "attention heads"),
    ("local.window", "200", "window length in question steps"),
    ("local.dropout", "0", "dropout inside the blocks"),
    ("local.agg_half_width", "3", "aggregator half width (2w+1 taps)"),
    ("local.agg_layers", "2", "stacked aggregators per stream"),
    ("local.ffn_mult", "4", "feed-forward expansion factor"),
    ("local.pool_hidden", "64", "attention pooling hidden width"),
    ("local.head_hidden", "256,64", "prediction head hidden widths"),
    ("local.content_vocab", "0", "content table rows; 0 sizes it from the catalog"),
    ("local.tag_vocab", "0", "tag table rows; 0 sizes it from the catalog"),
    ("local.task_container_vocab", "10001", "task container table rows; larger ids share the last row"),
    ("global.d", "256", "global model width"),
    ("global.layers", "2", "stacked GRU layers"),
    ("global.dropout", "0.1", "dropout between GRU layers"),
    ("global.emb_dim", "16", "width of each categorical embedding"),
    ("train.lr", "0.001", "peak learning rate of the local schedule"),
    ("train.global_lr", "0.001", "constant learning rate of the global model"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.local_weight_decay", "0.001", "decoupled weight decay for the local model"),
    ("train.global_weight_decay", "0", "decoupled weight decay for the global model"),
    ("train.batch", "2048", "windows (local) or users (global) per step"),
    ("train.warmup", "8000", "warmup steps of the local schedule"),
    ("train.ram_ratio", "0.25", "random answer masking probability"),
    ("train.local_epochs", "1", "passes over the training windows"),
    ("train.global_epochs", "1", "passes over the training users"),
    ("train.clip_norm", "1", "global gradient norm cap"),
    ("train.tbptt", "512", "global model segment length"),
    ("train.window_stride", "0", "steps between local training windows; 0 uses the window length"),
    ("train.checkpoint_every", "0", "steps between checkpoints; 0 writes only the final one"),
    ("adv.steps", "3", "ascent steps per batch"),
    ("adv.step_size", "0.01", "ascent step length"),
    ("adv.epsilon", "0.3", "L2 radius of the perturbation"),
    ("adv.extra_steps", "10000", "fine-tuning steps"),
    ("fusion.folds", "5", "out-of-fold blending folds"),
    ("fusion.learning_rate", "0.1", "boosting shrinkage"),
    ("fusion.max_leaves", "31", "leaves per tree"),
    ("fusion.max_depth", "6", "tree depth limit"),
    ("fusion.lambda", "1", "L2 penalty on leaf values"),
    ("fusion.max_rounds", "1000", "boosting round cap"),
    ("fusion.early_stopping", "100", "rounds without validation gain before stopping"),
    ("fusion.min_data_in_leaf", "20", "minimum rows per leaf"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub holdout_fraction: f64,
    pub sim: SimConfig,
    pub local: LocalConfig,
    pub global: GlobalConfig,
    pub train: TrainConfig,
    pub local_weight_decay: f64,
    pub global_weight_decay: f64,
    pub global_lr: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub folds: usize,
    pub gbdt: GbdtConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            seed: 0,
            threads: 0,
            holdout_fraction: 0.0,
            sim: SimConfig::default(),
            local: LocalConfig::default(),
            global: GlobalConfig::default(),
            train: TrainConfig::default(),
            local_weight_decay: 0.0,
            global_weight_decay: 0.0,
            global_lr: 0.0,
            local_epochs: 0,
            global_epochs: 0,
            folds: 0,
            gbdt: GbdtConfig::default(),
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented defaults parse");
        }
        c
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

impl RunConfig {
    /// Sets one key; the error is a bare message without location.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse(v)?,
            "threads" => self.threads = parse(v)?,
            "holdout_fraction" => self.holdout_fraction = parse(v)?,
            "sim.n_users" => self.sim.n_users = parse(v)?,
            "sim.n_questions" => self.sim.n_questions = parse(v)?,
            "sim.n_lectures" => self.sim.n_lectures = parse(v)?,
            "sim.mean_interactions" => self.sim.mean_interactions = parse(v)?,
            "sim.lecture_prob" => self.sim.lecture_prob = parse(v)?,
            "sim.lecture_gain" => self.sim.lecture_gain = parse(v)?,
            "sim.attempt_bonus" => self.sim.attempt_bonus = parse(v)?,
            "sim.noise_scale" => self.sim.noise_scale = parse(v)?,
            "sim.skill_std" => self.sim.skill_std = parse(v)?,
            "sim.difficulty_std" => self.sim.difficulty_std = parse(v)?,
            "sim.part_skill_correlation" => self.sim.part_skill_correlation = parse(v)?,
            "sim.repeat_prob" => self.sim.repeat_prob = parse(v)?,
            "local.d_model" => self.local.d_model = parse(v)?,
            "local.n_user_enc" => self.local.n_user_enc = parse(v)?,
            "local.n_ex_dec" => self.local.n_ex_dec = parse(v)?,
            "local.n_lect_enc" => self.local.n_lect_enc = parse(v)?,
            "local.heads" => self.local.heads = parse(v)?,
            "local.window" => self.local.window = parse(v)?,
            "local.dropout" => self.local.dropout = parse(v)?,
            "local.agg_half_width" => self.local.agg_half_width = parse(v)?,
            "local.agg_layers" => self.local.agg_layers = parse(v)?,
            "local.ffn_mult" => self.local.ffn_mult = parse(v)?,
            "local.pool_hidden" => self.local.pool_hidden = parse(v)?,
            "local.head_hidden" => {
                let (a, b) = v.split_once(',').ok_or_else(|| format!("expected two widths like `256,64`, got `{v}`"))?;
                self.local.head_hidden = [parse(a.trim())?, parse(b.trim())?];
            }
            "local.content_vocab" => self.local.content_vocab = parse(v)?,
            "local.tag_vocab" => self.local.tag_vocab = parse(v)?,
            "local.task_container_vocab" => self.local.task_container_vocab = parse(v)?,
            "global.d" => self.global.d = parse(v)?,
            "global.layers" => self.global.layers = parse(v)?,
            "global.dropout" => self.global.dropout = parse(v)?,
            "global.emb_dim" => self.global.emb_dim = parse(v)?,
            "train.lr" => self.train.lr_base = parse(v)?,
            "train.beta1" => self.train.beta1 = parse(v)?,
            "train.beta2" => self.train.beta2 = parse(v)?,
            "train.local_weight_decay" => self.local_weight_decay = parse(v)?,
            "train.global_weight_decay" => self.global_weight_decay = parse(v)?,
            "train.global_lr" => self.global_lr = parse(v)?,
            "train.batch" => self.train.batch = parse(v)?,
            "train.warmup" => self.train.warmup = parse(v)?,
            "train.ram_ratio" => self.train.ram_ratio = parse(v)?,
            "train.local_epochs" => self.local_epochs = parse(v)?,
            "train.global_epochs" => self.global_epochs = parse(v)?,
            "train.clip_norm" => self.train.clip_norm = parse(v)?,
            "train.tbptt" => self.train.tbptt = parse(v)?,
            "train.window_stride" => self.train.window_stride = parse(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(v)?,
            "adv.steps" => self.train.adv_steps = parse(v)?,
            "adv.step_size" => self.train.adv_step_size = parse(v)?,
            "adv.epsilon" => self.train.adv_epsilon = parse(v)?,
            "adv.extra_steps" => self.train.adv_extra_steps = parse(v)?,
            "fusion.folds" => self.folds = parse(v)?,
            "fusion.learning_rate" => self.gbdt.learning_rate = parse(v)?,
            "fusion.max_leaves" => self.gbdt.max_leaves = parse(v)?,
            "fusion.max_depth" => self.gbdt.max_depth = parse(v)?,
            "fusion.lambda" => self.gbdt.lambda = parse(v)?,
            "fusion.max_rounds" => self.gbdt.max_rounds = parse(v)?,
            "fusion.early_stopping" => self.gbdt.early_stopping = parse(v)?,
            "fusion.min_data_in_leaf" => self.gbdt.min_data_in_leaf = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of a key in the same syntax `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = |v: &dyn ToString| Some(v.to_string());
        match key {
            "data_dir" => Some(self.data_dir.display().to_string()),
            "out_dir" => Some(self.out_dir.display().to_string()),
            "seed" => s(&self.seed),
            "threads" => s(&self.threads),
            "holdout_fraction" => s(&self.holdout_fraction),
            "sim.n_users" => s(&self.sim.n_users),
            "sim.n_questions" => s(&self.sim.n_questions),
            "sim.n_lectures" => s(&self.sim.n_lectures),
            "sim.mean_interactions" => s(&self.sim.mean_interactions),
            "sim.lecture_prob" => s(&self.sim.lecture_prob),
            "sim.lecture_gain" => s(&self.sim.lecture_gain),
            "sim.attempt_bonus" => s(&self.sim.attempt_bonus),
            "sim.noise_scale" => s(&self.sim.noise_scale),
            "sim.skill_std" => s(&self.sim.skill_std),
            "sim.difficulty_std" => s(&self.sim.difficulty_std),
            "sim.part_skill_correlation" => s(&self.sim.part_skill_correlation),
            "sim.repeat_prob" => s(&self.sim.repeat_prob),
            "local.head_hidden" => Some(format!("{},{}", self.local.head_hidden[0], self.local.head_hidden[1])),
            k if k.starts_with("local.") => {
                self.local.to_pairs().into_iter().find(|(name, _)| name == k).map(|(_, v)| v)
            }
            "global.d" => s(&self.global.d),
            "global.layers" => s(&self.global.layers),
            "global.dropout" => s(&self.global.dropout),
            "global.emb_dim" => s(&self.global.emb_dim),
            "train.lr" => s(&self.train.lr_base),
            "train.beta1" => s(&self.train.beta1),
            "train.beta2" => s(&self.train.beta2),
            "train.local_weight_decay" => s(&self.local_weight_decay),
            "train.global_weight_decay" => s(&self.global_weight_decay),
            "train.global_lr" => s(&self.global_lr),
            "train.batch" => s(&self.train.batch),
            "train.warmup" => s(&self.train.warmup),
            "train.ram_ratio" => s(&self.train.ram_ratio),
            "train.local_epochs" => s(&self.local_epochs),
            "train.global_epochs" => s(&self.global_epochs),
            "train.clip_norm" => s(&self.train.clip_norm),
            "train.tbptt" => s(&self.train.tbptt),
            "train.window_stride" => s(&self.train.window_stride),
            "train.checkpoint_every" => s(&self.train.checkpoint_every),
            "adv.steps" => s(&self.train.adv_steps),
            "adv.step_size" => s(&self.train.adv_step_size),
            "adv.epsilon" => s(&self.train.adv_epsilon),
            "adv.extra_steps" => s(&self.train.adv_extra_steps),
            "fusion.folds" => s(&self.folds),
            "fusion.learning_rate" => s(&self.gbdt.learning_rate),
            "fusion.max_leaves" => s(&self.gbdt.max_leaves),
            "fusion.max_depth" => s(&self.gbdt.max_depth),
            "fusion.lambda" => s(&self.gbdt.lambda),
            "fusion.max_rounds" => s(&self.gbdt.max_rounds),
            "fusion.early_stopping" => s(&self.gbdt.early_stopping),
            "fusion.min_data_in_leaf" => s(&self.gbdt.min_data_in_leaf),
            _ => None,
        }
    }

    /// Applies the lines of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: Option<&Path>) -> Result<()> {
        let err = |line: usize, message: String| MuseError::Config {
            path: origin.map(Path::to_path_buf),
            line: Some(line),
            message,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            self.set(k, v).map_err(|m| err(i + 1, if m.starts_with("unknown") { m } else { format!("{k}: {m}") }))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MuseError::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, Some(path))?;
        Ok(c)
    }

    /// Every key and its current value, in documentation order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { seed: self.seed, ..self.sim.clone() }
    }

    pub fn local_train(&self) -> TrainConfig {
        TrainConfig {
            weight_decay: self.local_weight_decay,
            epochs: self.local_epochs,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn global_train(&self) -> TrainConfig {
        TrainConfig {
            lr_base: self.global_lr,
            weight_decay: self.global_weight_decay,
            epochs: self.global_epochs,
            seed: self.seed ^ 0x6C0B_A1,
            ..self.train.clone()
        }
    }

    /// Key reference for `--help`.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (`key = value`, `#` starts a comment):\n");
        for (k, d, doc) in KEYS {
            s.push_str(&format!("  {k:width$}  {doc} [default: {d}]\n"));
        }
        s
    }
}
