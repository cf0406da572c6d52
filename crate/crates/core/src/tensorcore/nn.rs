//! Layer-level helpers composed from graph primitives.

use super::{Graph, Scalar, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// `x · w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Output projection applied after the heads are concatenated.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q: [m, D]`, `k, v: [L, D]`. Each head attends over its own `D/heads`
/// slice with scale `1/√(D/heads)`; head outputs are concatenated and passed
/// through `out`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    out: Projection,
) -> Result<Var> {
    let d = g.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Config(format!("dimension {d} not divisible by {heads} heads")));
    }
    if g.shape(k) != g.shape(v) || g.shape(k)[1] != d {
        return Err(TensorError::shape(
            "multi_head_attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let dh = d / heads;
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 1)?;
        outputs.push(g.matmul(attn, vh)?);
    }
    let joined = g.concat(&outputs, 1)?;
    linear(g, joined, out.weight, out.bias)
}
