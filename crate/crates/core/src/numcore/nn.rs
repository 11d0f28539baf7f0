//! Layers composed from the primitive graph operations.

use rand::Rng;

use crate::error::{MuseError, Result};
use crate::numcore::graph::{Activation, Graph, Var};
use crate::numcore::params::{ParamGroup, ParamId, ParamStore};
use crate::numcore::Tensor;

/// Registers parameters under a common name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// Glorot-uniform matrix.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let t = Tensor::uniform(&[rows, cols], bound, self.rng);
        self.store.add(name, t, ParamGroup::Decay)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value), ParamGroup::NoDecay)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor, group: ParamGroup) -> Result<ParamId> {
        self.store.add(name, t, group)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.matrix(&format!("{name}.w"), d_in, d_out)?,
            b: self.constant(&format!("{name}.b"), &[d_out], 0.0)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.constant(&format!("{name}.gain"), &[d], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<AttentionParams> {
        if heads == 0 || d % heads != 0 {
            return Err(MuseError::InvalidArgument(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn gru(&mut self, name: &str, d_in: usize, d: usize) -> Result<GruParams> {
        let mut block = |gate: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                self.matrix(&format!("{name}.w_{gate}"), d_in, d)?,
                self.matrix(&format!("{name}.u_{gate}"), d, d)?,
                self.constant(&format!("{name}.b_{gate}"), &[d], 0.0)?,
            ))
        };
        let (w_z, u_z, b_z) = block("z")?;
        let (w_r, u_r, b_r) = block("r")?;
        let (w_h, u_h, b_h) = block("h")?;
        Ok(GruParams { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h })
    }

    /// The output layer starts at zero: the weights are unnormalized, so a
    /// random start would give pooled vectors that scale with the window.
    pub fn pool(&mut self, name: &str, d: usize, hidden: usize) -> Result<PoolParams> {
        Ok(PoolParams {
            a: self.matrix(&format!("{name}.w_key"), d, hidden)?,
            b: self.matrix(&format!("{name}.w_query"), d, hidden)?,
            c: self.matrix(&format!("{name}.w_prod"), d, hidden)?,
            b1: self.constant(&format!("{name}.b1"), &[hidden], 0.0)?,
            w2: self.tensor(&format!("{name}.w2"), Tensor::zeros(&[hidden, 1]), ParamGroup::Decay)?,
            b2: self.constant(&format!("{name}.b2"), &[1], 0.0)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two linear maps with an activation between them.
pub fn feed_forward(g: &mut Graph, x: Var, l1: &Linear, l2: &Linear, act: Activation) -> Result<Var> {
    let h = l1.forward(g, x)?;
    let h = g.activation(h, act);
    l2.forward(g, h)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention.
///
/// `allowed` is a row-major `[Lq, Lk]` pattern; disallowed pairs receive an
/// additive `-inf` before the softmax and therefore exactly zero weight.
pub fn multi_head_attention(
    g: &mut Graph,
    query_in: Var,
    kv_in: Var,
    p: &AttentionParams,
    allowed: &[bool],
) -> Result<Var> {
    let d = g.value(query_in).cols();
    if p.heads == 0 || d % p.heads != 0 {
        return Err(MuseError::InvalidArgument(format!(
            "model width {d} is not divisible by {} heads",
            p.heads
        )));
    }
    let dh = d / p.heads;
    let q = p.q.forward(g, query_in)?;
    let k = p.k.forward(g, kv_in)?;
    let v = p.v.forward(g, kv_in)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let (s, e) = (head * dh, (head + 1) * dh);
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.masked_softmax(scores, Some(allowed))?;
        ctx.push(g.matmul(w, vh)?);
    }
    let ctx = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
    p.o.forward(g, ctx)
}

/// Lower-triangular pattern where key `j` is visible from query `i` when
/// `j <= i` and either `valid[j]` or `j == i`.
pub fn causal_allowed(valid: &[bool]) -> Vec<bool> {
    let l = valid.len();
    let mut m = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            m[i * l + j] = j == i || valid[j];
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn blocks(&self) -> [ParamId; 9] {
        [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h]
    }
}

/// Input-side gate terms `x W + b` for the update, reset and candidate gates.
pub struct GruInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

/// Computes the input-side gate terms for all rows of `x` at once.
pub fn gru_inputs(g: &mut Graph, x: Var, p: &GruParams) -> Result<GruInputs> {
    let lin = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var> {
        Linear { w, b }.forward(g, x)
    };
    Ok(GruInputs {
        z: lin(g, p.w_z, p.b_z)?,
        r: lin(g, p.w_r, p.b_r)?,
        h: lin(g, p.w_h, p.b_h)?,
    })
}

/// Recurrent half of the cell given precomputed input terms (single rows).
pub fn gru_recur(g: &mut Graph, xz: Var, xr: Var, xh: Var, h: Var, p: &GruParams) -> Result<Var> {
    let u_z = g.param(p.u_z);
    let u_r = g.param(p.u_r);
    let u_h = g.param(p.u_h);
    let hz = g.matmul(h, u_z)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let hr = g.matmul(h, u_r)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let hh = g.matmul(rh, u_h)?;
    let cand = g.add(xh, hh)?;
    let cand = g.tanh(cand);
    // h' = h + z ⊙ (h̃ - h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `h̃ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let xi = gru_inputs(g, x, p)?;
    gru_recur(g, xi.z, xi.r, xi.h, h, p)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolParams {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const POOL_ACTIVATION: Activation = Activation::Gelu;

/// Query-conditioned weighted sum of sequence rows: row `j` of the output is
/// `Σ_i a(s_i, q_j) · s_i` over allowed `i`. Weights are not normalized.
pub fn attention_pool(g: &mut Graph, s: Var, queries: Var, p: &PoolParams, allowed: &[bool]) -> Result<Var> {
    let w = pool_weights(g, s, queries, p, allowed)?;
    g.matmul(w, s)
}

pub fn pool_weights(g: &mut Graph, s: Var, queries: Var, p: &PoolParams, allowed: &[bool]) -> Result<Var> {
    let ids = [p.a, p.b, p.c, p.b1, p.w2, p.b2].map(|id| g.param(id));
    g.pool_scores(s, queries, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], POOL_ACTIVATION, allowed)
}
