//! Student scoring branches, MIL bagging and score fusion.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{class_logits, roi_align, stack_patches, AttentionPool, TeacherModel, Trunk};
use crate::geometry::{spatial_encode, BBox, Proposal, SPATIAL_DIM};
use crate::tensorcore::nn::linear;
use crate::tensorcore::{softmax_slice, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Detection-confidence exponent.
pub const DEFAULT_GAMMA: f64 = 2.8;

/// Which branches are trained and multiplied at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `s_g · s_u · p_ho · (s_h s_o)^γ`
    #[default]
    Full,
    /// `p_ho · (s_h s_o)^γ`
    Baseline,
    /// `s_g · p_ho · (s_h s_o)^γ` with `v_u` inside `F_ho`.
    Early,
    /// `s_u · p_ho · (s_h s_o)^γ`
    HoUnion,
    /// `s_g · p_ho · (s_h s_o)^γ`
    HoGlobal,
    /// Teacher union scores only: `d_u · (s_h s_o)^γ`.
    Tf,
    /// `d_g · d_u · (s_h s_o)^γ`
    Tfstar,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Full, Variant::Baseline, Variant::Early, Variant::HoUnion, Variant::HoGlobal, Variant::Tf, Variant::Tfstar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::Early => "early",
            Variant::HoUnion => "ho_union",
            Variant::HoGlobal => "ho_global",
            Variant::Tf => "tf",
            Variant::Tfstar => "tfstar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Variant::Full | Variant::Early | Variant::HoGlobal)
    }

    /// Union branch scored separately and multiplied in.
    pub fn late_union(self) -> bool {
        matches!(self, Variant::Full | Variant::HoUnion)
    }

    pub fn early_union(self) -> bool {
        self == Variant::Early
    }

    /// Training-free variants read teacher scores at inference.
    pub fn training_free(self) -> bool {
        matches!(self, Variant::Tf | Variant::Tfstar)
    }
}

/// A human proposal paired with another proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub human_idx: usize,
    pub object_idx: usize,
    pub human: Proposal,
    pub object: Proposal,
    pub union: BBox,
    pub spatial: [f64; SPATIAL_DIM],
}

/// Every human × other-proposal pair, ordered by descending `s_h · s_o`
/// (ties keep enumeration order) and capped at `max_pairs`. Pairs whose
/// boxes fall outside the image are dropped.
pub fn enumerate_pairs(props: &[Proposal], img_w: f64, img_h: f64, max_pairs: usize) -> Vec<PairCandidate> {
    let mut pairs = Vec::new();
    for (hi, h) in props.iter().enumerate().filter(|(_, p)| p.is_human) {
        for (oi, o) in props.iter().enumerate() {
            if hi == oi {
                continue;
            }
            if let Some(spatial) = spatial_encode(&h.bbox, &o.bbox, img_w, img_h) {
                pairs.push(PairCandidate {
                    human_idx: hi,
                    object_idx: oi,
                    human: *h,
                    object: *o,
                    union: h.bbox.union(&o.bbox),
                    spatial,
                });
            }
        }
    }
    pairs.sort_by(|a, b| (b.human.score * b.object.score).total_cmp(&(a.human.score * a.object.score)));
    pairs.truncate(max_pairs);
    pairs
}

/// Pooled ROI patches for one image; the trunk is frozen, so these are
/// computed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub image_id: u64,
    pub global: Tensor<f32>,
    /// Patch per proposal referenced by some pair (`None` otherwise).
    pub proposals: Vec<Option<Tensor<f32>>>,
    pub unions: Vec<Tensor<f32>>,
    pub pairs: Vec<PairCandidate>,
}

impl ImageFeatures {
    pub fn extract(trunk: &Trunk, image_id: u64, image: &Tensor<f32>, props: &[Proposal], max_pairs: usize) -> Result<Self> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let fm = trunk.encode(image)?;
        let global = roi_align(&fm, &BBox::full(w as f64, h as f64))?;
        let pairs = enumerate_pairs(props, w as f64, h as f64, max_pairs);
        let mut proposals = vec![None; props.len()];
        for p in &pairs {
            for i in [p.human_idx, p.object_idx] {
                if proposals[i].is_none() {
                    proposals[i] = Some(roi_align(&fm, &props[i].bbox)?);
                }
            }
        }
        let unions = pairs.iter().map(|p| roi_align(&fm, &p.union)).collect::<Result<_>>()?;
        Ok(Self { image_id, global, proposals, unions, pairs })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub heads: usize,
    /// Width of the spatial projection.
    pub spatial_dim: usize,
    /// Class scores use `scale · cos` with the teacher's logit scale.
    pub normalize: bool,
    /// Logits are divided by this before any softmax.
    pub temperature: f64,
    pub max_pairs: usize,
    pub variant: Variant,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { heads: 4, spatial_dim: 64, normalize: true, temperature: 1.0, max_pairs: 64, variant: Variant::Full }
    }
}

/// Attention pool plus the optional residual MLP that follows it, both
/// copied from the teacher's image head.
#[derive(Clone, Debug)]
pub struct BranchHead {
    pub pool: AttentionPool,
    align: Option<Mlp>,
}

impl BranchHead {
    fn warm_start(params: &mut ParamStore, prefix: &str, teacher: &TeacherModel, seed: u64) -> Result<Self> {
        let pool = AttentionPool::register(params, &format!("{prefix}_pool"), teacher.trunk.dim(), teacher.pool.heads, seed)?;
        pool.copy_from(params, &teacher.pool, &teacher.params);
        let align = teacher.align_params().map(|ids| {
            let mut copy = |i: usize, name: &str| params.add(format!("{prefix}_align.{name}"), teacher.params.get(ids[i]).value.clone());
            Mlp { w1: copy(0, "w1"), b1: copy(1, "b1"), w2: copy(2, "w2"), b2: copy(3, "b2") }
        });
        Ok(Self { pool, align })
    }

    /// `[B, 49, D]` patches to `[B, D]` vectors.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> std::result::Result<Var, TensorError> {
        let v = self.pool.forward(g, p, patches)?;
        let Some(m) = self.align else { return Ok(v) };
        let hidden = linear(g, v, p[m.w1], p[m.b1])?;
        let hidden = g.relu(hidden)?;
        let delta = linear(g, hidden, p[m.w2], p[m.b2])?;
        g.add(v, delta)
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Graph handles produced by [`StudentModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[1, N]` probabilities.
    pub s_g: Option<Var>,
    /// `[M, N]` raw union logits.
    pub union_logits: Option<Var>,
    /// `[M, N]` probabilities.
    pub s_u: Option<Var>,
    /// `[M, N]` raw h-o scores.
    pub s_ho: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub trunk: Arc<Trunk>,
    pub params: ParamStore,
    pub global_head: BranchHead,
    pub union_head: BranchHead,
    pub ho_head: BranchHead,
    spatial: (ParamId, ParamId),
    f_ho: Mlp,
    /// Frozen copy of the teacher's logit scale.
    pub logit_scale: f32,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor<f32> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| d.sample(rng) as f32).collect()).expect("shape")
}

impl StudentModel {
    /// Branch heads start from the teacher's pool and alignment weights; the spatial projection
    /// and `F_ho` are freshly initialized from `seed`.
    pub fn new(teacher: &TeacherModel, config: StudentConfig, seed: u64) -> Result<Self> {
        let d = teacher.trunk.dim();
        if config.heads != teacher.pool.heads {
            return Err(Error::Config(format!(
                "student heads {} must match the teacher's {} for warm start",
                config.heads, teacher.pool.heads
            )));
        }
        if config.temperature <= 0.0 || config.max_pairs == 0 || config.spatial_dim == 0 {
            return Err(Error::Config("temperature, max_pairs and spatial_dim must be positive".into()));
        }
        let mut params = ParamStore::new();
        let global_head = BranchHead::warm_start(&mut params, "student.global", teacher, seed)?;
        let union_head = BranchHead::warm_start(&mut params, "student.union", teacher, seed)?;
        let ho_head = BranchHead::warm_start(&mut params, "student.ho", teacher, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sp = config.spatial_dim;
        let spatial = (
            params.add("student.spatial.weight", normal_tensor(&mut rng, [SPATIAL_DIM, sp], (1.0 / SPATIAL_DIM as f64).sqrt())),
            params.add("student.spatial.bias", Tensor::zeros([sp])),
        );
        let input = 2 * d + sp + if config.variant.early_union() { d } else { 0 };
        let f_ho = Mlp {
            w1: params.add("student.f_ho.w1", normal_tensor(&mut rng, [input, 2 * d], (2.0 / input as f64).sqrt())),
            b1: params.add("student.f_ho.b1", Tensor::zeros([2 * d])),
            w2: params.add("student.f_ho.w2", normal_tensor(&mut rng, [2 * d, d], (1.0 / (2 * d) as f64).sqrt())),
            b2: params.add("student.f_ho.b2", Tensor::zeros([d])),
        };
        let mut model = Self {
            config,
            trunk: teacher.trunk.clone(),
            params,
            global_head,
            union_head,
            ho_head,
            spatial,
            f_ho,
            logit_scale: teacher.logit_scale(),
        };
        model.freeze_unused();
        Ok(model)
    }

    /// Branches the variant does not use are frozen so weight decay leaves
    /// them alone.
    fn freeze_unused(&mut self) {
        let v = self.config.variant;
        self.params.set_frozen("", v.training_free());
        if !v.uses_global() {
            self.params.set_frozen("student.global_", true);
        }
        if !v.late_union() && !v.early_union() {
            self.params.set_frozen("student.union_", true);
        }
    }

    pub fn dim(&self) -> usize {
        self.trunk.dim()
    }

    /// Fingerprint of everything that never trains.
    pub fn frozen_fingerprint(&self) -> String {
        let mut s = ParamStore::new();
        for (n, t) in self.trunk.entries() {
            s.add(n, t);
        }
        s.fingerprint(|_| true)
    }

    /// Builds all branch outputs the variant needs for one image.
    ///
    /// `w: [N, D]` holds unit rows; `scale` is a one-element tensor.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &ImageFeatures,
        w: Var,
        scale: Var,
    ) -> std::result::Result<ForwardVars, TensorError> {
        let v = self.config.variant;
        let (norm, temp) = (self.config.normalize, self.config.temperature);
        let mut out = ForwardVars { s_g: None, union_logits: None, s_u: None, s_ho: None };
        if v.uses_global() {
            let x = g.constant(stack_patches::<T>(&[&feats.global])?);
            let vg = self.global_head.forward(g, p, x)?;
            let logits = class_logits(g, vg, w, scale, norm, temp)?;
            out.s_g = Some(g.softmax(logits, 1)?);
        }
        let m = feats.num_pairs();
        if m == 0 {
            return Ok(out);
        }
        let mut v_u = None;
        if v.late_union() || v.early_union() {
            let refs: Vec<&Tensor<f32>> = feats.unions.iter().collect();
            let x = g.constant(stack_patches::<T>(&refs)?);
            let pooled = self.union_head.forward(g, p, x)?;
            if v.late_union() {
                let logits = class_logits(g, pooled, w, scale, norm, temp)?;
                out.union_logits = Some(logits);
                out.s_u = Some(g.softmax(logits, 1)?);
            }
            if v.early_union() {
                v_u = Some(pooled);
            }
        }
        out.s_ho = Some(self.ho_scores(g, p, feats, v_u, w, scale)?);
        Ok(out)
    }

    /// Raw `[M, N]` scores `W_T × F_ho([v_h; v_o; proj(v_sp) (; v_u)])`.
    fn ho_scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &ImageFeatures,
        v_u: Option<Var>,
        w: Var,
        scale: Var,
    ) -> std::result::Result<Var, TensorError> {
        // pool each referenced proposal once, then gather per pair
        let used: Vec<usize> = (0..feats.proposals.len()).filter(|&i| feats.proposals[i].is_some()).collect();
        let slot = |i: usize| used.iter().position(|&u| u == i).expect("proposal referenced by a pair");
        let refs: Vec<&Tensor<f32>> = used.iter().map(|&i| feats.proposals[i].as_ref().expect("pooled")).collect();
        let x = g.constant(stack_patches::<T>(&refs)?);
        let pooled = self.ho_head.forward(g, p, x)?;
        let hs: Vec<usize> = feats.pairs.iter().map(|q| slot(q.human_idx)).collect();
        let os: Vec<usize> = feats.pairs.iter().map(|q| slot(q.object_idx)).collect();
        let v_h = g.gather_rows(pooled, &hs)?;
        let v_o = g.gather_rows(pooled, &os)?;
        let m = feats.num_pairs();
        let sp: Vec<T> = feats.pairs.iter().flat_map(|q| q.spatial.iter().map(|&s| T::of(s))).collect();
        let sp = g.constant(Tensor::new([m, SPATIAL_DIM], sp)?);
        let sp = linear(g, sp, p[self.spatial.0], p[self.spatial.1])?;
        let mut parts = vec![v_h, v_o, sp];
        parts.extend(v_u);
        let cat = g.concat(&parts, 1)?;
        let hidden = linear(g, cat, p[self.f_ho.w1], p[self.f_ho.b1])?;
        let hidden = g.relu(hidden)?;
        let v_ho = linear(g, hidden, p[self.f_ho.w2], p[self.f_ho.b2])?;
        class_logits(g, v_ho, w, scale, self.config.normalize, self.config.temperature)
    }

    /// Inference-time scores against `w: [N, D]`.
    pub fn scores(&self, feats: &ImageFeatures, w: &Tensor<f32>) -> Result<ScoreBundle> {
        let mut g = Graph::<f32>::new();
        let mut frozen = self.params.clone();
        frozen.set_frozen("", true);
        let p = frozen.bind(&mut g);
        let wv = g.constant(w.clone());
        let scale = g.constant(Tensor::vector(&[self.logit_scale]));
        let f = self.forward(&mut g, &p, feats, wv, scale)?;
        let n = w.shape()[0];
        let rows = |v: Option<Var>| -> Vec<Vec<f32>> {
            v.map(|v| g.value(v).data().chunks(n).map(|r| r.to_vec()).collect()).unwrap_or_default()
        };
        let s_ho = rows(f.s_ho);
        let (s_hat, s_bar, p_ho) = bag_and_normalize(&s_ho).unwrap_or_default();
        Ok(ScoreBundle {
            s_g: rows(f.s_g).pop(),
            s_u: rows(f.s_u),
            s_ho,
            s_hat,
            s_bar,
            p_ho,
        })
    }
}

/// Plain-value branch outputs for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreBundle {
    pub s_g: Option<Vec<f32>>,
    pub s_u: Vec<Vec<f32>>,
    pub s_ho: Vec<Vec<f32>>,
    pub s_hat: Vec<f32>,
    pub s_bar: Vec<Vec<f32>>,
    pub p_ho: Vec<Vec<f32>>,
}

impl ScoreBundle {
    pub fn num_pairs(&self) -> usize {
        self.s_ho.len()
    }

    /// Checks the bundle's structural invariants, returning the first
    /// violation.
    pub fn check(&self, tol: f32) -> std::result::Result<(), String> {
        let sums_to_one = |r: &[f32]| (r.iter().sum::<f32>() - 1.0).abs() <= tol;
        if let Some(s) = &self.s_g {
            if !sums_to_one(s) {
                return Err("s_g does not sum to 1".into());
            }
        }
        if let Some(i) = self.s_u.iter().position(|r| !sums_to_one(r)) {
            return Err(format!("s_u row {i} does not sum to 1"));
        }
        let n = self.s_hat.len();
        for c in 0..n {
            let col_max = self.s_ho.iter().map(|r| r[c]).fold(f32::NEG_INFINITY, f32::max);
            if col_max != self.s_hat[c] {
                return Err(format!("ŝ_ho[{c}] is not the column max"));
            }
            let col_sum: f32 = self.s_bar.iter().map(|r| r[c]).sum();
            if (col_sum - 1.0).abs() > tol {
                return Err(format!("S̄ column {c} sums to {col_sum}"));
            }
            let sig = sigmoid(self.s_hat[c]);
            for (m, row) in self.p_ho.iter().enumerate() {
                if (row[c] - sig * self.s_bar[m][c]).abs() > tol {
                    return Err(format!("p_ho[{m}][{c}] != σ(ŝ)·S̄"));
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column max `ŝ`, pair-axis softmax `S̄`, and `p_ho = σ(ŝ) ⊙ S̄` for raw
/// scores `[M][N]`. `None` when there are no pairs.
#[allow(clippy::type_complexity)]
pub fn bag_and_normalize(s_ho: &[Vec<f32>]) -> Option<(Vec<f32>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let n = s_ho.first()?.len();
    let m = s_ho.len();
    let mut s_hat = vec![f32::NEG_INFINITY; n];
    let mut s_bar = vec![vec![0.0; n]; m];
    for c in 0..n {
        let col: Vec<f32> = s_ho.iter().map(|r| r[c]).collect();
        s_hat[c] = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (r, v) in softmax_slice(&col).into_iter().enumerate() {
            s_bar[r][c] = v;
        }
    }
    let p_ho = s_bar.iter().map(|row| row.iter().zip(&s_hat).map(|(b, &s)| sigmoid(s) * b).collect()).collect();
    Some((s_hat, s_bar, p_ho))
}

/// Score factors available for one pair; which are required depends on the
/// variant.
#[derive(Clone, Copy, Debug, Default)]
pub struct FuseInputs<'a> {
    pub s_g: Option<&'a [f32]>,
    pub s_u: Option<&'a [f32]>,
    pub p_ho: Option<&'a [f32]>,
    pub d_g: Option<&'a [f32]>,
    pub d_u: Option<&'a [f32]>,
}

/// Per-class fused scores for one pair.
pub fn fuse<'a>(inputs: &FuseInputs<'a>, s_h: f64, s_o: f64, gamma: f64, variant: Variant) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s_h) || !(0.0..=1.0).contains(&s_o) || gamma < 0.0 {
        return Err(Error::Config(format!("fuse: s_h={s_h}, s_o={s_o}, γ={gamma}")));
    }
    let need = |x: Option<&'a [f32]>, name: &str| {
        x.ok_or_else(|| Error::Config(format!("variant {} needs {name}", variant.name())))
    };
    let factors: Vec<&[f32]> = match variant {
        Variant::Full => vec![need(inputs.s_g, "s_g")?, need(inputs.s_u, "s_u")?, need(inputs.p_ho, "p_ho")?],
        Variant::Baseline => vec![need(inputs.p_ho, "p_ho")?],
        Variant::Early | Variant::HoGlobal => vec![need(inputs.s_g, "s_g")?, need(inputs.p_ho, "p_ho")?],
        Variant::HoUnion => vec![need(inputs.s_u, "s_u")?, need(inputs.p_ho, "p_ho")?],
        Variant::Tf => vec![need(inputs.d_u, "d_u")?],
        Variant::Tfstar => vec![need(inputs.d_g, "d_g")?, need(inputs.d_u, "d_u")?],
    };
    let n = factors[0].len();
    if factors.iter().any(|f| f.len() != n) {
        return Err(Error::Config("fuse: factor lengths differ".into()));
    }
    let det = (s_h * s_o).powf(gamma);
    Ok((0..n).map(|c| factors.iter().map(|f| f[c] as f64).product::<f64>() * det).collect())
}
