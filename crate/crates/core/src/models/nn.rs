//! Pre-norm transformer building blocks shared by the three networks.

use rand::Rng;

use crate::graph::{AttnSpec, Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

pub fn init_linear<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
    ps.insert(&format!("{name}.w"), Tensor::randn(fan_in, fan_out, INIT_STD, rng));
    if bias {
        ps.insert(&format!("{name}.b"), Tensor::zeros(1, fan_out));
    }
}

pub fn init_layer_norm<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize) {
    ps.insert(&format!("{name}.g"), Tensor::filled(1, width, T::one()));
    ps.insert(&format!("{name}.b"), Tensor::zeros(1, width));
}

pub fn init_block<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, width: usize, ff: usize, rng: &mut R) {
    init_layer_norm(ps, &format!("{name}.ln1"), width);
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.attn.{proj}"), width, width, true, rng);
    }
    init_layer_norm(ps, &format!("{name}.ln2"), width);
    init_linear(ps, &format!("{name}.mlp.fc"), width, ff, true, rng);
    init_linear(ps, &format!("{name}.mlp.out"), ff, width, true, rng);
}

/// `x W + b`.
pub fn linear<'a, T: Scalar>(g: &mut Graph<'a, T>, ps: &'a ParamSet<T>, name: &str, x: NodeId) -> NodeId {
    let w = ps.bind(g, &format!("{name}.w"));
    let y = g.matmul(x, w);
    let b = ps.bind(g, &format!("{name}.b"));
    g.add_row(y, b)
}

pub fn layer_norm<'a, T: Scalar>(g: &mut Graph<'a, T>, ps: &'a ParamSet<T>, name: &str, x: NodeId) -> NodeId {
    let gamma = ps.bind(g, &format!("{name}.g"));
    let beta = ps.bind(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

/// `h = x + attn(ln1(x)); h + mlp(ln2(h))`.
pub fn block<'a, T: Scalar>(g: &mut Graph<'a, T>, ps: &'a ParamSet<T>, name: &str, x: NodeId, spec: AttnSpec) -> NodeId {
    let n1 = layer_norm(g, ps, &format!("{name}.ln1"), x);
    let q = linear(g, ps, &format!("{name}.attn.q"), n1);
    let k = linear(g, ps, &format!("{name}.attn.k"), n1);
    let v = linear(g, ps, &format!("{name}.attn.v"), n1);
    let a = g.attention(q, k, v, spec);
    let o = linear(g, ps, &format!("{name}.attn.o"), a);
    let h = g.add(x, o);
    let n2 = layer_norm(g, ps, &format!("{name}.ln2"), h);
    let f = linear(g, ps, &format!("{name}.mlp.fc"), n2);
    let f = g.gelu(f);
    let f = linear(g, ps, &format!("{name}.mlp.out"), f);
    g.add(h, f)
}

/// Row indices `0..seq` repeated `batch` times, for broadcasting positional
/// tables.
pub fn position_ids(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..seq).collect()
}
