//! Finite-difference gradient cases for every differentiable op.

use muse_core::numcore::nn::{self, ParamBuilder};
use muse_core::numcore::{Activation, Graph, ParamStore, Tensor, Var};
use muse_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fd_max_rel_err, fd_max_rel_err_mode, project};

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-4;

type Case = fn(u64, usize) -> f64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn check_inputs(seed: u64, shapes: &[Vec<usize>], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(s, &mut r)).collect();
    let store = ParamStore::new();
    fd_max_rel_err(&store, &inputs, FD_STEP, FD_FLOOR, |g, v| {
        let out = f(g, v)?;
        project(g, out, seed)
    })
}

fn dims(variant: usize) -> (usize, usize, usize) {
    if variant == 0 {
        (3, 4, 2)
    } else {
        (5, 2, 6)
    }
}

fn matmul(seed: u64, v: usize) -> f64 {
    let (m, k, n) = dims(v);
    check_inputs(seed, &[vec![m, k], vec![k, n]], |g, x| g.matmul(x[0], x[1]))
}

fn matmul_nt(seed: u64, v: usize) -> f64 {
    let (m, k, n) = dims(v);
    check_inputs(seed, &[vec![m, k], vec![n, k]], |g, x| g.matmul_nt(x[0], x[1]))
}

fn elementwise(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    check_inputs(seed, &[vec![m, n], vec![m, n], vec![m, n]], |g, x| {
        let a = g.add(x[0], x[1])?;
        let b = g.sub(a, x[2])?;
        let c = g.mul(b, x[0])?;
        Ok(g.affine(c, 1.7, -0.3))
    })
}

fn row_broadcast(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    check_inputs(seed, &[vec![m, n], vec![n], vec![n]], |g, x| {
        let a = g.add_row(x[0], x[1])?;
        g.mul_row(a, x[2])
    })
}

fn activations(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    check_inputs(seed, &[vec![m, n]], |g, x| {
        let a = g.sigmoid(x[0]);
        let b = g.tanh(x[0]);
        let c = g.gelu(x[0]);
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })
}

fn softmax(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    check_inputs(seed, &[vec![m, n]], |g, x| g.softmax(x[0]))
}

fn masked_softmax(seed: u64, v: usize) -> f64 {
    let (m, _, _) = dims(v);
    let allowed = nn::causal_allowed(&vec![true; m]);
    check_inputs(seed, &[vec![m, m]], move |g, x| g.masked_softmax(x[0], Some(&allowed)))
}

fn layer_norm(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    let n = n.max(3);
    check_inputs(seed, &[vec![m, n], vec![n], vec![n]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5))
}

fn embedding(seed: u64, v: usize) -> f64 {
    let ids: Vec<usize> = if v == 0 { vec![0, 2, 2, 1] } else { vec![3, 3, 3, 0, 4] };
    check_inputs(seed, &[vec![5, 3]], move |g, x| g.embedding(x[0], &ids))
}

fn embedding_bag(seed: u64, v: usize) -> f64 {
    let bags = if v == 0 {
        vec![vec![0, 1], vec![2], vec![]]
    } else {
        vec![vec![1, 1, 3], vec![0, 2, 3, 4]]
    };
    check_inputs(seed, &[vec![5, 4]], move |g, x| g.embedding_bag_mean(x[0], &bags))
}

fn continuous_embed(seed: u64, v: usize) -> f64 {
    let (_, n, _) = dims(v);
    check_inputs(seed, &[vec![n]], |g, x| g.continuous_embed(x[0], &[0.0, 0.25, -1.5, 1.0]))
}

fn concat_slice_gather(seed: u64, v: usize) -> f64 {
    let (m, n, k) = dims(v);
    check_inputs(seed, &[vec![m, n], vec![m, k], vec![2, n + k]], move |g, x| {
        let c = g.concat_cols(&[x[0], x[1]])?;
        let r = g.concat_rows(&[c, x[2]])?;
        let s = g.slice_cols(r, 1, n + k)?;
        g.gather_rows(s, &[0, m + 1, 0, 1])
    })
}

fn causal_aggregate(seed: u64, v: usize) -> f64 {
    let (l, d, _) = dims(v);
    let l = l + 4;
    let mut valid = vec![true; l];
    valid[0] = false;
    if v == 1 {
        valid[1] = false;
    }
    check_inputs(seed, &[vec![l, d], vec![7]], move |g, x| g.causal_aggregate(x[0], x[1], &valid))
}

fn bce(seed: u64, v: usize) -> f64 {
    let (m, _, _) = dims(v);
    check_inputs(seed, &[vec![m]], move |g, x| {
        let p = g.sigmoid(x[0]);
        let targets: Vec<f64> = (0..m).map(|i| (i % 2) as f64).collect();
        let weights: Vec<f64> = (0..m).map(|i| if i == 1 { 0.0 } else { 1.0 }).collect();
        g.bce_sum(p, &targets, &weights)
    })
}

fn dropout(seed: u64, v: usize) -> f64 {
    let (m, n, _) = dims(v);
    let mut r = rng(seed);
    let x = rand_t(&[m, n], &mut r);
    let store = ParamStore::new();
    fd_max_rel_err_mode(&store, &[x], FD_STEP, FD_FLOOR, true, |g, vars| {
        // Same stream on every evaluation, so the mask is fixed.
        let mut drng = rng(seed + 99);
        let y = g.dropout(vars[0], 0.3, &mut drng);
        project(g, y, seed)
    })
}

fn with_params(seed: u64, inputs: &[Vec<usize>], build: impl Fn(&mut ParamBuilder<ChaCha8Rng>) -> Result<()>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    {
        let mut pb = ParamBuilder { store: &mut store, rng: &mut r };
        build(&mut pb).expect("params");
    }
    // Perturb zero-initialised biases so their gradients are exercised at a generic point.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rand::Rng::random_range(&mut r, -1.0..1.0);
        }
    }
    let tensors: Vec<Tensor> = inputs.iter().map(|s| rand_t(s, &mut r)).collect();
    fd_max_rel_err(&store, &tensors, FD_STEP, FD_FLOOR, |g, v| {
        let out = f(g, v)?;
        project(g, out, seed)
    })
}

fn attention(seed: u64, v: usize) -> f64 {
    let (l, heads, d) = if v == 0 { (3, 1, 4) } else { (4, 2, 4) };
    let mut valid = vec![true; l];
    valid[0] = v == 0;
    let allowed = nn::causal_allowed(&valid);
    let store_builder = move |pb: &mut ParamBuilder<ChaCha8Rng>| -> Result<()> {
        pb.attention("attn", d, heads)?;
        Ok(())
    };
    with_params(seed, &[vec![l, d], vec![l, d]], store_builder, move |g, x| {
        let p = nn::AttentionParams {
            q: linear_named(g, "attn.q"),
            k: linear_named(g, "attn.k"),
            v: linear_named(g, "attn.v"),
            o: linear_named(g, "attn.o"),
            heads,
        };
        nn::multi_head_attention(g, x[0], x[1], &p, &allowed)
    })
}

fn linear_named(g: &mut Graph, name: &str) -> nn::Linear {
    let store = graph_store(g);
    nn::Linear {
        w: store.id(&format!("{name}.w")).unwrap(),
        b: store.id(&format!("{name}.b")).unwrap(),
    }
}

fn graph_store<'a>(g: &Graph<'a>) -> &'a ParamStore {
    g.params()
}

fn gru(seed: u64, v: usize) -> f64 {
    let (din, d) = if v == 0 { (3, 2) } else { (2, 4) };
    with_params(
        seed,
        &[vec![1, din], vec![1, d]],
        move |pb| {
            pb.gru("gru", din, d)?;
            Ok(())
        },
        |g, x| {
            let s = graph_store(g);
            let id = |n: &str| s.id(&format!("gru.{n}")).unwrap();
            let p = nn::GruParams {
                w_z: id("w_z"),
                u_z: id("u_z"),
                b_z: id("b_z"),
                w_r: id("w_r"),
                u_r: id("u_r"),
                b_r: id("b_r"),
                w_h: id("w_h"),
                u_h: id("u_h"),
                b_h: id("b_h"),
            };
            let h1 = nn::gru_cell(g, x[0], x[1], &p)?;
            nn::gru_cell(g, x[0], h1, &p)
        },
    )
}

fn feed_forward(seed: u64, v: usize) -> f64 {
    let (m, d, h) = dims(v);
    with_params(
        seed,
        &[vec![m, d]],
        move |pb| {
            pb.linear("ff1", d, h)?;
            pb.linear("ff2", h, d)?;
            Ok(())
        },
        |g, x| {
            let l1 = linear_named(g, "ff1");
            let l2 = linear_named(g, "ff2");
            nn::feed_forward(g, x[0], &l1, &l2, Activation::Gelu)
        },
    )
}

fn pool(seed: u64, v: usize) -> f64 {
    let (l, d, h) = if v == 0 { (3, 2, 3) } else { (4, 3, 2) };
    let mut valid = vec![true; l];
    valid[1] = v == 0;
    let mut allowed = nn::causal_allowed(&valid);
    for j in 0..l {
        if !valid[j] {
            allowed[j * l + j] = false;
        }
    }
    // The query row of an invalid step attends to nothing.
    with_params(
        seed,
        &[vec![l, d], vec![l, d]],
        move |pb| {
            pb.pool("pool", d, h)?;
            Ok(())
        },
        move |g, x| {
            let s = graph_store(g);
            let id = |n: &str| s.id(&format!("pool.{n}")).unwrap();
            let p = nn::PoolParams {
                a: id("w_key"),
                b: id("w_query"),
                c: id("w_prod"),
                b1: id("b1"),
                w2: id("w2"),
                b2: id("b2"),
            };
            nn::attention_pool(g, x[0], x[1], &p, &allowed)
        },
    )
}

/// Every op case, name first.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul as Case),
        ("matmul_nt", matmul_nt),
        ("add/sub/mul/affine", elementwise),
        ("add_row/mul_row", row_broadcast),
        ("sigmoid/tanh/gelu", activations),
        ("softmax", softmax),
        ("masked_softmax", masked_softmax),
        ("layer_norm", layer_norm),
        ("embedding_lookup", embedding),
        ("embedding_bag_mean", embedding_bag),
        ("continuous_embed", continuous_embed),
        ("concat/slice/gather", concat_slice_gather),
        ("causal_aggregate", causal_aggregate),
        ("bce_loss", bce),
        ("dropout", dropout),
        ("multi_head_attention", attention),
        ("gru_cell", gru),
        ("feed_forward", feed_forward),
        ("attention_pool", pool),
    ]
}
