//! Task-disruptive background suppression.
//!
//! For one support shot with features `F_S` (pixels as rows, `N_s × C`) and
//! query features `F_Q`:
//!
//! * `R^Q`: cosine between `L(recon of F_S from F_Q)` and `L(V(F_S))`.
//! * `R^T`: the same, with the support's own foreground rows as context.
//! * `R^B = (R^Q - R^T) ⊙ (1 - M)`.
//! * `R̃^B = sigmoid(conv(conv([R^B, layer_norm(R^B)])))`, two 1×1 convs, 2→256→1.
//! * `Ṙ^B`: `R̃^B` with foreground cells pinned to 1.
//! * `A^S = Ṙ^B ⊙ F_S`, broadcast over channels.
//!
//! The q/k/v/l heads are a single set of parameters shared by both scoring
//! paths.

use rand::Rng;

use crate::attention::{cross_reconstruct, QkvHeads};
use crate::error::{Result, TbsError};
use crate::params::{Bound, LinearParams, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const COSINE_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const REFINE_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TbsParams {
    pub q_head: LinearParams,
    pub k_head: LinearParams,
    pub v_head: LinearParams,
    pub l_head: LinearParams,
    pub refine_conv1: LinearParams,
    pub refine_conv2: LinearParams,
}

impl TbsParams {
    /// `channels` is the feature width; projections keep that width.
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, channels: usize, rng: &mut R) -> Self {
        let d = channels;
        TbsParams {
            q_head: LinearParams::init(store, "tbs.q", channels, d, true, rng),
            k_head: LinearParams::init(store, "tbs.k", channels, d, true, rng),
            v_head: LinearParams::init(store, "tbs.v", channels, d, true, rng),
            l_head: LinearParams::init(store, "tbs.l", d, d, true, rng),
            refine_conv1: LinearParams::init(store, "tbs.refine1", 2, REFINE_WIDTH, true, rng),
            refine_conv2: LinearParams::init(store, "tbs.refine2", REFINE_WIDTH, 1, true, rng),
        }
    }

    pub fn heads(&self) -> QkvHeads {
        QkvHeads {
            q: self.q_head,
            k: self.k_head,
            v: self.v_head,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            self.q_head,
            self.k_head,
            self.v_head,
            self.l_head,
            self.refine_conv1,
            self.refine_conv2,
        ]
        .iter()
        .flat_map(LinearParams::ids)
        .collect()
    }

    pub fn refine_ids(&self) -> Vec<ParamId> {
        self.refine_conv1.ids().chain(self.refine_conv2.ids()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Query-relevant score.
    Q,
    /// Target-relevant score.
    T,
    /// Query background-relevant score.
    B,
    Refined,
    Pinned,
}

/// Which score terms enter `R^B`. Both off bypasses the module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub use_qs: bool,
    pub use_ts: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_qs: true,
        use_ts: true,
    };
    pub const BASELINE: Ablation = Ablation {
        use_qs: false,
        use_ts: false,
    };
    /// Rows of the ablation grid, baseline first.
    pub const GRID: [Ablation; 4] = [
        Ablation::BASELINE,
        Ablation {
            use_qs: true,
            use_ts: false,
        },
        Ablation {
            use_qs: false,
            use_ts: true,
        },
        Ablation::FULL,
    ];

    pub fn bypass(self) -> bool {
        !self.use_qs && !self.use_ts
    }

    pub fn label(self) -> &'static str {
        match (self.use_qs, self.use_ts) {
            (false, false) => "baseline",
            (true, false) => "qs",
            (false, true) => "ts",
            (true, true) => "qs+ts",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// One score plane at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T = f32> {
    pub values: Tensor<T>,
    pub stage: Stage,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(values: Tensor<T>, stage: Stage) -> Self {
        ScoreMap { values, stage }
    }

    /// Returns a description of the first violated range constraint, if any.
    pub fn check(&self, mask: &[bool]) -> Option<String> {
        let tol = 1e-6;
        for (i, (&v, &m)) in self.values.data().iter().zip(mask).enumerate() {
            let v = v.as_f64();
            let bad = match self.stage {
                Stage::Q | Stage::T => !(-1.0 - tol..=1.0 + tol).contains(&v),
                Stage::B => !(-2.0..=2.0).contains(&v) || (m && v != 0.0),
                Stage::Refined => !(v > 0.0 && v < 1.0),
                Stage::Pinned => (m && v != 1.0) || !v.is_finite(),
            };
            if bad {
                return Some(format!("{:?} score {v} at cell {i} (foreground: {m})", self.stage));
            }
        }
        None
    }
}

/// Foreground and background pixel indices of a support mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportSplit {
    pub object_indices: Vec<usize>,
    pub background_indices: Vec<usize>,
}

pub fn split_support(mask: &[bool]) -> SupportSplit {
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&i| mask[i]);
    SupportSplit {
        object_indices: fg,
        background_indices: bg,
    }
}

fn relevance_from<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &TbsParams,
    fs: Var,
    ctx: Var,
    vs_l: Var,
) -> Result<Var> {
    let rec = cross_reconstruct(g, b, &p.heads(), fs, ctx)?;
    let lrec = p.l_head.apply(g, b, rec.recon)?;
    g.cosine_rows(lrec, vs_l, T::of(COSINE_EPS))
}

fn projected_values<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &TbsParams, fs: Var) -> Result<Var> {
    let vs = p.v_head.apply(g, b, fs)?;
    p.l_head.apply(g, b, vs)
}

/// `R^Q`, one value per support row.
pub fn query_relevant_score<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &TbsParams, fs: Var, fq: Var) -> Result<Var> {
    let vs_l = projected_values(g, b, p, fs)?;
    relevance_from(g, b, p, fs, fq, vs_l)
}

/// `R^T`, one value per support row. Context is the support's foreground rows.
pub fn target_relevant_score<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &TbsParams,
    fs: Var,
    split: &SupportSplit,
) -> Result<Var> {
    if split.object_indices.is_empty() {
        return Err(TbsError::DegenerateSupport);
    }
    let vs_l = projected_values(g, b, p, fs)?;
    let fo = g.gather_rows(fs, &split.object_indices)?;
    relevance_from(g, b, p, fs, fo, vs_l)
}

fn background_weights<T: Scalar>(mask: &[bool]) -> Tensor<T> {
    Tensor::from_fn(&[mask.len()], |i| if mask[i] { T::zero() } else { T::one() })
}

/// `R^B = (R^Q - R^T) ⊙ (1 - M)`.
pub fn background_relevant_score<T: Scalar>(g: &mut Graph<T>, rq: Var, rt: Var, mask: &[bool]) -> Result<Var> {
    let d = g.sub(rq, rt)?;
    g.mask_mul(d, background_weights(mask))
}

/// `sigmoid(conv2(conv1([R^B, layer_norm(R^B)])))`, no activation in between.
pub fn refine_score<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &TbsParams, rb: Var) -> Result<Var> {
    let n = g.value(rb).numel();
    if n < 2 {
        return Err(TbsError::Degenerate {
            op: "refine_score",
            detail: format!("score map has {n} cells"),
        });
    }
    let ln = g.layer_norm(rb, T::of(LAYER_NORM_EPS))?;
    let x = g.concat_cols(&[rb, ln])?;
    let y = p.refine_conv1.apply(g, b, x)?;
    let z = p.refine_conv2.apply(g, b, y)?;
    let z = g.reshape(z, &[n])?;
    Ok(g.sigmoid(z))
}

pub fn pin_foreground<T: Scalar>(g: &mut Graph<T>, refined: Var, mask: &[bool]) -> Result<Var> {
    g.pin(refined, mask)
}

/// `A^S = Ṙ^B ⊙ F_S`, with `F_S` as `N_s × C` rows.
pub fn adapt_support<T: Scalar>(g: &mut Graph<T>, fs: Var, pinned: Var) -> Result<Var> {
    g.row_scale(fs, pinned)
}

/// Handles to every intermediate of one shot.
#[derive(Clone, Copy, Debug)]
pub struct TbsTrace {
    pub rq: Option<Var>,
    pub rt: Option<Var>,
    pub rb: Option<Var>,
    pub refined: Option<Var>,
    pub pinned: Option<Var>,
    pub adapted: Var,
}

impl TbsTrace {
    /// Reads back one stage as an `h×w` map, if that stage was computed.
    pub fn score_map<T: Scalar>(&self, g: &Graph<T>, stage: Stage, h: usize, w: usize) -> Option<ScoreMap<T>> {
        let v = match stage {
            Stage::Q => self.rq,
            Stage::T => self.rt,
            Stage::B => self.rb,
            Stage::Refined => self.refined,
            Stage::Pinned => self.pinned,
        }?;
        let t = g.value(v).clone().reshape(&[h, w]).ok()?;
        Some(ScoreMap::new(t, stage))
    }
}

/// Full per-shot pipeline. `mask` is the support mask at feature resolution.
pub fn tbs_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &TbsParams,
    fq: Var,
    fs: Var,
    mask: &[bool],
    ablation: Ablation,
) -> Result<TbsTrace> {
    let n = g.shape(fs)[0];
    if mask.len() != n {
        return Err(TbsError::Shape {
            op: "tbs_forward",
            lhs: g.shape(fs).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let split = split_support(mask);
    if split.object_indices.is_empty() {
        return Err(TbsError::DegenerateSupport);
    }
    if ablation.bypass() {
        return Ok(TbsTrace {
            rq: None,
            rt: None,
            rb: None,
            refined: None,
            pinned: None,
            adapted: fs,
        });
    }
    let rq = ablation
        .use_qs
        .then(|| query_relevant_score(g, b, p, fs, fq))
        .transpose()?;
    let rt = ablation
        .use_ts
        .then(|| target_relevant_score(g, b, p, fs, &split))
        .transpose()?;
    let rb = match (rq, rt) {
        (Some(q), Some(t)) => background_relevant_score(g, q, t, mask)?,
        (Some(q), None) => g.mask_mul(q, background_weights(mask))?,
        (None, Some(t)) => {
            let neg = g.scale(t, -T::one());
            g.mask_mul(neg, background_weights(mask))?
        }
        (None, None) => unreachable!("bypass handled above"),
    };
    let refined = refine_score(g, b, p, rb)?;
    let pinned = pin_foreground(g, refined, mask)?;
    let adapted = adapt_support(g, fs, pinned)?;
    Ok(TbsTrace {
        rq,
        rt,
        rb: Some(rb),
        refined: Some(refined),
        pinned: Some(pinned),
        adapted,
    })
}
