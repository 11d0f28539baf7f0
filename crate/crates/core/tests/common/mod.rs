//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod checks;
pub mod gradcases;
pub mod world;

use muse_core::numcore::{Graph, ParamStore, Tensor, Var};
use muse_core::Result;

/// Central finite differences against the analytic reverse pass.
///
/// `f` builds a scalar loss from graph inputs created for `inputs` (in
/// order). Every element of every input and every parameter in `store` is
/// perturbed by `±step`. Returns the maximum relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn fd_max_rel_err<F>(store: &ParamStore, inputs: &[Tensor], step: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fd_max_rel_err_mode(store, inputs, step, floor, false, f)
}

pub fn fd_max_rel_err_mode<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    training: bool,
    f: F,
) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(store).with_training(training);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars).expect("forward");
        g.value(loss).item()
    };

    let mut g = Graph::new(store).with_training(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    let back = g.backward(loss).expect("backward");

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut worst: f64 = 0.0;

    for (k, t) in inputs.iter().enumerate() {
        let analytic = back.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= step;
            let n = (eval(store, &plus) - eval(store, &minus)) / (2.0 * step);
            worst = worst.max(rel(analytic.data()[e], n));
        }
    }
    for (id, p) in store.iter() {
        let analytic = back.params().get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for e in 0..p.value.len() {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut()[e] += step;
            let up = eval(&s, inputs);
            s.get_mut(id).value.data_mut()[e] -= 2.0 * step;
            let down = eval(&s, inputs);
            let n = (up - down) / (2.0 * step);
            worst = worst.max(rel(analytic.data()[e], n));
        }
    }
    worst
}

/// Contracts `v` against a fixed pseudo-random tensor so every output
/// element contributes to the scalar loss with a distinct weight.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let shape = g.value(v).shape().to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::uniform(&shape, 1.0, &mut rng);
    let rv = g.constant(r);
    let m = g.mul(v, rv)?;
    Ok(g.sum(m))
}

/// Exact O(n²) pair-counting AUC: P(s₊ > s₋) + ½ P(s₊ = s₋).
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut favorable = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                favorable += 1.0;
            } else if scores[i] == scores[j] {
                favorable += 0.5;
            }
        }
    }
    favorable / pairs
}
