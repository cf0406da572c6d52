//! The three-term distillation objective and its supervision routing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::ForwardVars;
use crate::tensorcore::{Graph, Scalar, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Teacher signal supervising a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Supervision {
    #[serde(rename = "g")]
    G,
    #[serde(rename = "u")]
    U,
    #[serde(rename = "g+u")]
    GU,
}

impl Supervision {
    pub fn uses_g(self) -> bool {
        matches!(self, Supervision::G | Supervision::GU)
    }

    pub fn uses_u(self) -> bool {
        matches!(self, Supervision::U | Supervision::GU)
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" => Ok(Supervision::G),
            "u" => Ok(Supervision::U),
            "g+u" => Ok(Supervision::GU),
            _ => Err(Error::Config(format!("supervision must be g, u or g+u, got {s:?}"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::G => "g",
            Supervision::U => "u",
            Supervision::GU => "g+u",
        })
    }
}

/// Which teacher distribution supervises each branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Routing {
    pub global_branch: Supervision,
    pub union_branch: Supervision,
    pub ho_branch: Supervision,
}

impl Default for Routing {
    fn default() -> Self {
        Self { global_branch: Supervision::G, union_branch: Supervision::U, ho_branch: Supervision::G }
    }
}

impl Routing {
    /// The global branch has no pairs, so only `g` is meaningful there.
    pub fn validate(&self) -> Result<()> {
        if self.global_branch != Supervision::G {
            return Err(Error::Config(format!("global branch supervision must be g, got {}", self.global_branch)));
        }
        Ok(())
    }

    /// Parses `"<union>:<ho>"`, e.g. `u:g` or `g+u:g`.
    pub fn parse(s: &str) -> Result<Self> {
        let (u, h) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("routing must look like <union>:<ho>, got {s:?}")))?;
        Ok(Self { global_branch: Supervision::G, union_branch: u.parse()?, ho_branch: h.parse()? })
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.union_branch, self.ho_branch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Multipliers for `L_g`, `L_u`, `L_ho`.
    pub weights: [f64; 3],
    /// Smoothing inside the KL logarithm.
    pub kl_eps: f64,
    /// Use `KL(d ‖ s)` instead of `KL(s ‖ d)`.
    pub teacher_first: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { weights: [1.0; 3], kl_eps: 1e-8, teacher_first: false }
    }
}

/// Loss nodes for one image. Terms the variant does not produce are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_g: Option<Var>,
    pub l_u: Option<Var>,
    pub l_ho: Option<Var>,
    pub total: Var,
}

/// Plain values of one image's (or one batch's) loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_u: f64,
    pub l_ho: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read<T: Scalar>(g: &Graph<T>, v: &LossVars) -> Self {
        let val = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().f64());
        Self { l_g: val(v.l_g), l_u: val(v.l_u), l_ho: val(v.l_ho), total: val(Some(v.total)) }
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.l_g += w * o.l_g;
        self.l_u += w * o.l_u;
        self.l_ho += w * o.l_ho;
        self.total += w * o.total;
    }

    /// Name of the first non-finite term.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("L_g", self.l_g), ("L_u", self.l_u), ("L_ho", self.l_ho), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

struct Kl<'a> {
    opts: &'a LossOptions,
}

impl Kl<'_> {
    fn div<T: Scalar>(&self, g: &mut Graph<T>, pred: Var, target: Var) -> std::result::Result<Var, TensorError> {
        if self.opts.teacher_first {
            g.kl_div(target, pred, self.opts.kl_eps)
        } else {
            g.kl_div(pred, target, self.opts.kl_eps)
        }
    }

    /// `(1/M) Σ_m KL(pred[m] ‖ target[m])` over rows.
    fn rows<T: Scalar>(&self, g: &mut Graph<T>, pred: Var, target: &[Vec<f32>]) -> std::result::Result<Var, TensorError> {
        let mut terms = Vec::with_capacity(target.len());
        for (m, row) in target.iter().enumerate() {
            let p = g.slice(pred, 0, m, 1)?;
            let t = g.constant(row_tensor(row));
            terms.push(self.div(g, p, t)?);
        }
        let total = sum(g, &terms)?.ok_or_else(|| TensorError::Usage("no rows to average".into()))?;
        g.scale(total, 1.0 / target.len() as f64)
    }

    /// MIL: column max over pairs, softmax over classes, KL against `d_g`.
    fn bag<T: Scalar>(&self, g: &mut Graph<T>, scores: Var, d_g: &[f32]) -> std::result::Result<Var, TensorError> {
        let n = d_g.len();
        let (mx, _) = g.max(scores, 0)?;
        let mx = g.reshape(mx, [1, n])?;
        let p = g.softmax(mx, 1)?;
        let t = g.constant(row_tensor(d_g));
        self.div(g, p, t)
    }
}

fn row_tensor<T: Scalar>(row: &[f32]) -> Tensor<T> {
    Tensor::new([1, row.len()], row.iter().map(|&v| T::of(v as f64)).collect()).expect("non-empty row")
}

/// Builds `L = w_g L_g + w_u L_u + w_ho L_ho` for one image.
///
/// `d_g` and `d_u` must already be restricted to the classes in the graph's
/// embedding. Returns `None` when the image yields no term at all (no pairs
/// and no global branch).
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    fw: &ForwardVars,
    d_g: &[f32],
    d_u: &[Vec<f32>],
    routing: &Routing,
    opts: &LossOptions,
) -> Result<Option<LossVars>> {
    let kl = Kl { opts };
    let l_g = match fw.s_g {
        Some(s_g) => {
            let t = g.constant(row_tensor(d_g));
            Some(kl.div(g, s_g, t).map_err(|e| tag("L_g", e))?)
        }
        None => None,
    };
    let mut l_u = None;
    if let (Some(s_u), Some(logits)) = (fw.s_u, fw.union_logits) {
        let mut term = || -> std::result::Result<Option<Var>, TensorError> {
            let mut parts = Vec::new();
            if routing.union_branch.uses_u() {
                parts.push(kl.rows(g, s_u, d_u)?);
            }
            if routing.union_branch.uses_g() {
                parts.push(kl.bag(g, logits, d_g)?);
            }
            sum(g, &parts)
        };
        l_u = term().map_err(|e| tag("L_u", e))?;
    }
    let mut l_ho = None;
    if let Some(s_ho) = fw.s_ho {
        let mut term = || -> std::result::Result<Option<Var>, TensorError> {
            let mut parts = Vec::new();
            if routing.ho_branch.uses_g() {
                parts.push(kl.bag(g, s_ho, d_g)?);
            }
            if routing.ho_branch.uses_u() {
                let p = g.softmax(s_ho, 1)?;
                parts.push(kl.rows(g, p, d_u)?);
            }
            sum(g, &parts)
        };
        l_ho = term().map_err(|e| tag("L_ho", e))?;
    }
    let mut weighted = Vec::new();
    for (term, w) in [l_g, l_u, l_ho].into_iter().zip(opts.weights) {
        if let Some(t) = term {
            weighted.push(if w == 1.0 { t } else { g.scale(t, w)? });
        }
    }
    Ok(sum(g, &weighted).map_err(|e| tag("total", e))?.map(|total| LossVars { l_g, l_u, l_ho, total }))
}

/// Numeric failures name the loss term they came from.
fn tag(term: &str, e: TensorError) -> Error {
    match e {
        TensorError::NonFinite { .. } | TensorError::NotDistribution { .. } => Error::Numeric(format!("{term}: {e}")),
        other => Error::Tensor(other),
    }
}

fn sum<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> std::result::Result<Option<Var>, TensorError> {
    let mut it = parts.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for p in it {
        acc = g.add(acc, p)?;
    }
    Ok(Some(acc))
}
