//! Transformer building blocks shared by the encoder and the language model.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut impl Rng,
) {
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
/// Output projections are scaled by `1/√depth`.
pub(crate) fn init_block(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    mlp_ratio: usize,
    depth: usize,
    rng: &mut impl Rng,
) {
    let out_std = INIT_STD / (depth as f64).sqrt();
    init_layer_norm(store, &format!("{name}.ln1"), dim);
    for proj in ["q", "k", "v"] {
        init_linear(
            store,
            &format!("{name}.attn.{proj}"),
            dim,
            dim,
            INIT_STD,
            rng,
        );
    }
    init_linear(store, &format!("{name}.attn.o"), dim, dim, out_std, rng);
    init_layer_norm(store, &format!("{name}.ln2"), dim);
    init_linear(
        store,
        &format!("{name}.mlp.fc"),
        dim,
        dim * mlp_ratio,
        INIT_STD,
        rng,
    );
    init_linear(
        store,
        &format!("{name}.mlp.proj"),
        dim * mlp_ratio,
        dim,
        out_std,
        rng,
    );
}

pub(crate) fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.var(&format!("{name}.w")))?;
    g.add_row(y, b.var(&format!("{name}.b")))
}

pub(crate) fn layer_norm(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, b.var(&format!("{name}.g")), b.var(&format!("{name}.b")))
}

fn attention(
    g: &mut Graph,
    b: &Bound,
    name: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let dim = g.value(x).cols();
    let head_dim = dim / heads;
    let q = linear(g, b, &format!("{name}.q"), x)?;
    let k = linear(g, b, &format!("{name}.k"), x)?;
    let v = linear(g, b, &format!("{name}.v"), x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let weights = if causal {
            g.causal_softmax(scores)?
        } else {
            g.softmax(scores)?
        };
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, b, &format!("{name}.o"), merged)
}

pub(crate) fn block(
    g: &mut Graph,
    b: &Bound,
    name: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{name}.ln1"), x)?;
    let a = attention(g, b, &format!("{name}.attn"), h, heads, causal)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{name}.ln2"), x)?;
    let h = linear(g, b, &format!("{name}.mlp.fc"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, b, &format!("{name}.mlp.proj"), h)?;
    g.add(x, h)
}
