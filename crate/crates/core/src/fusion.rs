//! Out-of-fold stacking of the component predictions with a small
//! gradient-boosted tree ensemble.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::InteractionRow;
use crate::error::{MuseError, Result};
use crate::metrics::roc_auc;
use crate::numcore::{sigmoid, PROB_EPS};

/// Random partition of `n` rows into `k` folds whose sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(MuseError::InvalidArgument(format!("cannot split {n} rows into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbdtConfig {
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub max_depth: usize,
    pub lambda: f64,
    pub max_rounds: usize,
    pub early_stopping: usize,
    pub min_data_in_leaf: usize,
    pub min_hessian_in_leaf: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            learning_rate: 0.1,
            max_leaves: 31,
            max_depth: 6,
            lambda: 1.0,
            max_rounds: 1000,
            early_stopping: 100,
            min_data_in_leaf: 20,
            min_hessian_in_leaf: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlenderModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Number of leading trees used for prediction.
    pub best_iteration: usize,
    pub n_features: usize,
}

impl BlenderModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees[..self.best_iteration].iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.predict_raw(x))
    }

    /// Text dump: a header line, then one line per node.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "gbdt features={} base_score={} learning_rate={} best_iteration={} trees={}\n",
            self.n_features,
            self.base_score,
            self.learning_rate,
            self.best_iteration,
            self.trees.len()
        );
        for (t, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {t}");
            for (i, n) in tree.nodes.iter().enumerate() {
                let _ = match n {
                    Node::Split { feature, threshold, left, right } => {
                        writeln!(s, "{i} split feature={feature} threshold={threshold} left={left} right={right}")
                    }
                    Node::Leaf { value } => writeln!(s, "{i} leaf value={value}"),
                };
            }
        }
        s
    }
}

fn log_odds(y: &[u8]) -> f64 {
    let p = (y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    /// Number of the leaf's sorted rows (by `feature`) that go left.
    n_left: usize,
}

struct Grow<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    cfg: &'a GbdtConfig,
}

impl Grow<'_> {
    fn score(&self, gs: f64, hs: f64) -> f64 {
        gs * gs / (hs + self.cfg.lambda)
    }

    /// Exact greedy search over every feature of the rows in `rows`.
    fn best_split(&self, rows: &[usize]) -> Option<SplitCandidate> {
        let n = rows.len();
        if n < 2 * self.cfg.min_data_in_leaf.max(1) {
            return None;
        }
        let (gt, ht): (f64, f64) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        let parent = self.score(gt, ht);
        let mut best: Option<SplitCandidate> = None;
        let n_features = self.x.first().map_or(0, |r| r.len());
        let mut sorted = rows.to_vec();
        for f in 0..n_features {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = sorted[k];
                gl += self.g[i];
                hl += self.h[i];
                let (v, next) = (self.x[i][f], self.x[sorted[k + 1]][f]);
                if v == next {
                    continue;
                }
                let nl = k + 1;
                if nl < self.cfg.min_data_in_leaf || n - nl < self.cfg.min_data_in_leaf {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < self.cfg.min_hessian_in_leaf || hr < self.cfg.min_hessian_in_leaf {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(SplitCandidate { gain, feature: f, threshold: v + (next - v) / 2.0, n_left: nl });
                }
            }
        }
        best
    }

    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let (gs, hs): (f64, f64) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        -gs / (hs + self.cfg.lambda)
    }

    /// Best-first growth up to `max_leaves` leaves and `max_depth` levels.
    fn tree(&self, all: Vec<usize>) -> Tree {
        struct Open {
            node: usize,
            rows: Vec<usize>,
            depth: usize,
            split: Option<SplitCandidate>,
        }
        let mut nodes = vec![Node::Leaf { value: self.leaf_value(&all) }];
        let split = (self.cfg.max_depth > 0).then(|| self.best_split(&all)).flatten();
        let mut open = vec![Open { node: 0, rows: all, depth: 0, split }];
        let mut leaves = 1;
        while leaves < self.cfg.max_leaves {
            // Highest gain first; ties go to the earliest-created leaf.
            let Some(pick) = open
                .iter()
                .enumerate()
                .filter_map(|(k, o)| o.split.as_ref().map(|s| (k, s.gain, o.node)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)))
                .map(|(k, _, _)| k)
            else {
                break;
            };
            let o = open.swap_remove(pick);
            let s = o.split.expect("picked leaves have a split");
            let mut rows = o.rows;
            rows.sort_by(|&a, &b| self.x[a][s.feature].total_cmp(&self.x[b][s.feature]).then(a.cmp(&b)));
            let right_rows = rows.split_off(s.n_left);
            let left_rows = rows;
            let (l, r) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { value: self.leaf_value(&left_rows) });
            nodes.push(Node::Leaf { value: self.leaf_value(&right_rows) });
            nodes[o.node] = Node::Split { feature: s.feature, threshold: s.threshold, left: l, right: r };
            leaves += 1;
            let depth = o.depth + 1;
            for (node, rows) in [(l, left_rows), (r, right_rows)] {
                let split = if depth < self.cfg.max_depth { self.best_split(&rows) } else { None };
                open.push(Open { node, rows, depth, split });
            }
        }
        Tree { nodes }
    }
}

/// Boosting on logistic loss with early stopping on validation AUC.
pub fn fit_gbdt(
    x_train: &[Vec<f64>],
    y_train: &[u8],
    x_valid: &[Vec<f64>],
    y_valid: &[u8],
    cfg: &GbdtConfig,
) -> Result<BlenderModel> {
    if x_train.is_empty() || x_valid.is_empty() {
        return Err(MuseError::EmptyDataset("blender needs training and validation rows".into()));
    }
    if x_train.len() != y_train.len() || x_valid.len() != y_valid.len() {
        return Err(MuseError::InvalidArgument("feature and label counts differ".into()));
    }
    let n_features = x_train[0].len();
    if x_train.iter().chain(x_valid).any(|r| r.len() != n_features) {
        return Err(MuseError::InvalidArgument("ragged feature rows".into()));
    }
    if y_train.iter().chain(y_valid).any(|&y| y > 1) {
        return Err(MuseError::InvalidArgument("labels must be 0 or 1".into()));
    }
    let base_score = log_odds(y_train);
    let mut model = BlenderModel { base_score, learning_rate: cfg.learning_rate, trees: Vec::new(), best_iteration: 0, n_features };
    let single_class = y_train.iter().all(|&y| y == y_train[0]);
    if single_class {
        return Ok(model);
    }
    let valid_has_both = y_valid.iter().any(|&y| y == 1) && y_valid.iter().any(|&y| y == 0);
    let mut f_train = vec![base_score; x_train.len()];
    let mut f_valid = vec![base_score; x_valid.len()];
    let mut best_auc = if valid_has_both { roc_auc(&f_valid, y_valid)? } else { f64::NEG_INFINITY };
    let mut since_best = 0;
    let mut g = vec![0.0; x_train.len()];
    let mut h = vec![0.0; x_train.len()];
    for _ in 0..cfg.max_rounds {
        for i in 0..x_train.len() {
            let p = sigmoid(f_train[i]);
            g[i] = p - y_train[i] as f64;
            h[i] = (p * (1.0 - p)).max(1e-16);
        }
        let grow = Grow { x: x_train, g: &g, h: &h, cfg };
        let tree = grow.tree((0..x_train.len()).collect());
        if tree.nodes.len() == 1 {
            // No usable split: further rounds would only shift the bias.
            break;
        }
        for (f, x) in f_train.iter_mut().zip(x_train) {
            *f += cfg.learning_rate * tree.predict(x);
        }
        for (f, x) in f_valid.iter_mut().zip(x_valid) {
            *f += cfg.learning_rate * tree.predict(x);
        }
        model.trees.push(tree);
        let auc = if valid_has_both { roc_auc(&f_valid, y_valid)? } else { f64::NEG_INFINITY };
        if auc > best_auc || !valid_has_both {
            best_auc = auc;
            model.best_iteration = model.trees.len();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stopping {
                break;
            }
        }
    }
    Ok(model)
}

/// One blend-split question with both component predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRow {
    pub row_id: u64,
    pub p_local: f64,
    pub p_global: f64,
    pub label: u8,
}

/// Which training rows a model saw: count plus an order-independent hash of
/// the row ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub rows: u64,
    pub fingerprint: u64,
}

impl Provenance {
    pub fn of_rows(rows: &[InteractionRow]) -> Self {
        Self::of_ids(rows.iter().map(|r| r.row_id))
    }

    pub fn of_ids(ids: impl Iterator<Item = u64>) -> Self {
        let (mut n, mut acc) = (0u64, 0u64);
        for id in ids {
            n += 1;
            acc = acc.wrapping_add(mix(id));
        }
        Provenance { rows: n, fingerprint: acc }
    }

    pub fn to_meta(&self) -> String {
        format!("{}:{:016x}", self.rows, self.fingerprint)
    }

    pub fn from_meta(s: &str) -> Option<Self> {
        let (n, f) = s.split_once(':')?;
        Some(Provenance { rows: n.parse().ok()?, fingerprint: u64::from_str_radix(f, 16).ok()? })
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub auc_local: f64,
    pub auc_global: f64,
    pub auc_fused: f64,
    pub n_rows: usize,
    pub folds: usize,
    pub seed: u64,
}

impl std::fmt::Display for FusionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "rows={}", self.n_rows)?;
        writeln!(f, "folds={}", self.folds)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "auc_local={}", self.auc_local)?;
        writeln!(f, "auc_global={}", self.auc_global)?;
        writeln!(f, "auc_fused={}", self.auc_fused)
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: Vec<f64>,
    pub folds: Vec<usize>,
    /// Blender fitted for each held-out fold.
    pub blenders: Vec<BlenderModel>,
    pub report: FusionReport,
}

impl FusionOutput {
    /// `row_id,p_local,p_global,p_fused,label` lines with a header.
    pub fn predictions_csv(&self, rows: &[BlendRow]) -> String {
        let mut s = String::from("row_id,p_local,p_global,p_fused,label\n");
        for (r, p) in rows.iter().zip(&self.fused) {
            let _ = writeln!(s, "{},{},{},{},{}", r.row_id, r.p_local, r.p_global, p, r.label);
        }
        s
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (f, b) in self.blenders.iter().enumerate() {
            let _ = writeln!(s, "fold {f}");
            s.push_str(&b.dump());
        }
        s
    }

    pub fn write(&self, rows: &[BlendRow], dir: &Path) -> Result<()> {
        let w = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| MuseError::io(&p, e))
        };
        w("blend_predictions.csv", self.predictions_csv(rows))?;
        w("blender.txt", self.dump())?;
        w("blend_report.txt", self.report.to_string())
    }
}

/// Out-of-fold fusion. Every component must have been trained on exactly the
/// rows described by `train_split`, and no blend row may be among them.
pub fn run_fusion(
    rows: &[BlendRow],
    train_split: &Provenance,
    train_ids: &dyn Fn(u64) -> bool,
    components: &[Provenance],
    k: usize,
    seed: u64,
    cfg: &GbdtConfig,
) -> Result<FusionOutput> {
    for (i, c) in components.iter().enumerate() {
        if c != train_split {
            return Err(MuseError::Provenance(format!(
                "component {i} was trained on {} rows ({}) but the train split has {} rows ({})",
                c.rows,
                c.to_meta(),
                train_split.rows,
                train_split.to_meta()
            )));
        }
    }
    if let Some(r) = rows.iter().find(|r| train_ids(r.row_id)) {
        return Err(MuseError::Provenance(format!("blend row {} is part of the training split", r.row_id)));
    }
    let folds = make_folds(rows.len(), k, seed)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.p_local, r.p_global]).collect();
    let y: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let mut fused = vec![f64::NAN; rows.len()];
    let mut blenders = Vec::with_capacity(k);
    for f in 0..k {
        // Early stopping watches the next fold; the remaining folds train.
        let stop = if k > 2 { Some((f + 1) % k) } else { None };
        let pick = |want: &dyn Fn(usize) -> bool| -> (Vec<Vec<f64>>, Vec<u8>) {
            (0..rows.len()).filter(|&i| want(folds[i])).map(|i| (x[i].clone(), y[i])).unzip()
        };
        let (xt, yt) = pick(&|fo| fo != f && Some(fo) != stop);
        let (xv, yv) = match stop {
            Some(s) => pick(&|fo| fo == s),
            None => pick(&|fo| fo != f),
        };
        let model = fit_gbdt(&xt, &yt, &xv, &yv, cfg)?;
        for i in 0..rows.len() {
            if folds[i] == f {
                fused[i] = model.predict(&x[i]);
            }
        }
        blenders.push(model);
    }
    // Each row is scored exactly once, by the blender that held its fold out.
    assert!(fused.iter().all(|p| p.is_finite()), "every row is scored by its held-out blender");
    let pl: Vec<f64> = rows.iter().map(|r| r.p_local).collect();
    let pg: Vec<f64> = rows.iter().map(|r| r.p_global).collect();
    let report = FusionReport {
        auc_local: roc_auc(&pl, &y)?,
        auc_global: roc_auc(&pg, &y)?,
        auc_fused: roc_auc(&fused, &y)?,
        n_rows: rows.len(),
        folds: k,
        seed,
    };
    Ok(FusionOutput { fused, folds, blenders, report })
}
