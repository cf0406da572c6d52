//! Attention pooling of a 7×7 patch into one vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensorcore::nn::{linear, multi_head_attention, Projection};
use crate::tensorcore::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

use super::roi::ROI_CELLS;

type Result<T> = std::result::Result<T, TensorError>;

/// `Q = F_Q(mean of cells)`, `K = F_K(cells)`, `V = F_V(cells)`, then
/// multi-head attention with an output projection. Parameters live in a
/// [`ParamStore`] under `{prefix}.`.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub prefix: String,
    pub heads: usize,
    pub dim: usize,
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

impl AttentionPool {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!("dimension {dim} not divisible by {heads} heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let mut proj = |name: &str| {
            let w: Vec<f32> = (0..dim * dim).map(|_| normal.sample(&mut rng) as f32).collect();
            let w = store.add(format!("{prefix}.{name}.weight"), Tensor::new([dim, dim], w).expect("square"));
            let b = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros([dim]));
            (w, b)
        };
        let (q, k, v, o) = (proj("q"), proj("k"), proj("v"), proj("o"));
        Ok(Self { prefix: prefix.to_string(), heads, dim, q, k, v, o })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [self.q.0, self.q.1, self.k.0, self.k.1, self.v.0, self.v.1, self.o.0, self.o.1]
    }

    /// Copies every value from `src` (a pool of the same shape in `src_store`).
    pub fn copy_from(&self, store: &mut ParamStore, src: &AttentionPool, src_store: &ParamStore) {
        for (dst, from) in self.param_ids().into_iter().zip(src.param_ids()) {
            store.get_mut(dst).value = src_store.get(from).value.clone();
        }
    }

    /// Pools a batch `patches: [B, 49, D]` to `[B, D]`.
    ///
    /// Rather than projecting all 49 cells, each head's score is
    /// `(q_h W_K,hᵀ) Xᵀ` and its output `(a X) W_V,h + b_V,h`; the key bias
    /// adds the same constant to every score and drops out of the softmax.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let (b, _, d) = self.check(g, patches)?;
        let dh = d / self.heads;
        let mean = g.mean(patches, 1)?;
        let q = linear(g, mean, p[self.q.0], p[self.q.1])?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let wk = g.slice(p[self.k.0], 1, h * dh, dh)?;
            let qk = g.matmul_nt(qh, wk)?;
            let qk = g.reshape(qk, [b, 1, d])?;
            let scores = g.bmm(qk, patches, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax(scores, 2)?;
            let pooled = g.bmm(attn, patches, false)?;
            let pooled = g.reshape(pooled, [b, d])?;
            let wv = g.slice(p[self.v.0], 1, h * dh, dh)?;
            heads.push(g.matmul(pooled, wv)?);
        }
        let joined = g.concat(&heads, 1)?;
        let joined = g.add_bias(joined, p[self.v.1])?;
        linear(g, joined, p[self.o.0], p[self.o.1])
    }

    /// Same result as [`AttentionPool::forward`], computed literally: project
    /// every cell to keys and values, then run standard attention per item.
    pub fn forward_direct<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let (b, l, d) = self.check(g, patches)?;
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let x = g.slice(patches, 0, i, 1)?;
            let x = g.reshape(x, [l, d])?;
            let mean = g.mean(x, 0)?;
            let mean = g.reshape(mean, [1, d])?;
            let q = linear(g, mean, p[self.q.0], p[self.q.1])?;
            let k = linear(g, x, p[self.k.0], p[self.k.1])?;
            let v = linear(g, x, p[self.v.0], p[self.v.1])?;
            let out = Projection { weight: p[self.o.0], bias: p[self.o.1] };
            rows.push(multi_head_attention(g, q, k, v, self.heads, out)?);
        }
        g.concat(&rows, 0)
    }

    fn check<T: Scalar>(&self, g: &Graph<T>, patches: Var) -> Result<(usize, usize, usize)> {
        let s = g.shape(patches);
        if s.len() != 3 || s[2] != self.dim {
            return Err(TensorError::shape("attention_pool", format!("patches {s:?}, dim {}", self.dim)));
        }
        Ok((s[0], s[1], s[2]))
    }
}

/// Stacks `[7, 7, D]` patches into one `[B, 49, D]` tensor.
pub fn stack_patches<T: Scalar>(patches: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let d = patches.first().map(|p| p.shape()[2]).ok_or_else(|| TensorError::shape("stack_patches", "empty"))?;
    let mut data = Vec::with_capacity(patches.len() * ROI_CELLS * d);
    for p in patches {
        if p.len() != ROI_CELLS * d {
            return Err(TensorError::shape("stack_patches", format!("{:?}", p.shape())));
        }
        data.extend(p.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new([patches.len(), ROI_CELLS, d], data)
}

/// Class logits `[B, N]` for pooled vectors `v: [B, D]` against embedding
/// rows `w: [N, D]`.
///
/// With `normalize`, `v` is L2-normalized and the cosine is multiplied by
/// `scale` (a one-element tensor); otherwise the raw product is used. The
/// result is divided by `temperature`.
pub fn class_logits<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    w: Var,
    scale: Var,
    normalize: bool,
    temperature: f64,
) -> Result<Var> {
    let logits = if normalize {
        let vn = g.l2_normalize(v)?;
        let cos = g.matmul_nt(vn, w)?;
        g.scale_by(cos, scale)?
    } else {
        g.matmul_nt(v, w)?
    };
    if temperature == 1.0 {
        Ok(logits)
    } else {
        g.scale(logits, 1.0 / temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::gradcheck;
    use rand::Rng;

    fn setup(dim: usize, seed: u64) -> (ParamStore, AttentionPool) {
        let mut s = ParamStore::new();
        let pool = AttentionPool::register(&mut s, "pool", dim, 4, seed).unwrap();
        // random biases so the bias paths are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in s.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        (s, pool)
    }

    fn patches(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([b, ROI_CELLS, d], (0..b * ROI_CELLS * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn factored_matches_direct() {
        let (s, pool) = setup(16, 1);
        let mut g = Graph::<f64>::new();
        let p = s.bind(&mut g);
        let x = g.constant(patches(3, 16, 2));
        let a = pool.forward(&mut g, &p, x).unwrap();
        let b = pool.forward_direct(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(a), &[3, 16]);
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }

    #[test]
    fn identical_cells_give_projected_value() {
        let (s, pool) = setup(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..ROI_CELLS).flat_map(|_| u.clone()).collect();
        let mut g = Graph::<f64>::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::new([1, ROI_CELLS, 8], data).unwrap());
        let out = pool.forward(&mut g, &p, x).unwrap();
        let uv = g.constant(Tensor::new([1, 8], u).unwrap());
        let v = linear(&mut g, uv, p[pool.v.0], p[pool.v.1]).unwrap();
        let expected = linear(&mut g, v, p[pool.o.0], p[pool.o.1]).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cell_order_does_not_matter() {
        let (s, pool) = setup(8, 5);
        let x = patches(1, 8, 6);
        let mut perm: Vec<usize> = (0..ROI_CELLS).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&c| x.data()[c * 8..(c + 1) * 8].to_vec()).collect();
        let mut g = Graph::<f64>::new();
        let p = s.bind(&mut g);
        let a = g.constant(x);
        let b = g.constant(Tensor::new([1, ROI_CELLS, 8], shuffled).unwrap());
        let ya = pool.forward(&mut g, &p, a).unwrap();
        let yb = pool.forward(&mut g, &p, b).unwrap();
        for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let (s, pool) = setup(8, 7);
        let x = patches(2, 8, 8);
        let inputs: Vec<Tensor<f64>> = s.iter().map(|p| p.value.cast()).collect();
        let rep = gradcheck::check(&inputs, 1e-3, |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let xv = g.constant(x.clone());
            let y = pool.forward(g, &p, xv)?;
            let y = g.powf(y, 2.0)?;
            g.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.rel_errors);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut s = ParamStore::new();
        assert!(AttentionPool::register(&mut s, "p", 10, 4, 0).is_err());
    }
}
