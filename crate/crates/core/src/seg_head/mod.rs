//! Mask-value aggregation head.
//!
//! Every query cell attends over all support cells of all shots; its
//! foreground probability is the attention mass that lands on support
//! foreground cells. The head's attention map doubles as the source of the
//! averaged-attention statistics.

mod model;
mod train;

pub use model::{Forward, Model, ModelSpec};
pub use train::{Adam, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use rand::Rng;

use crate::error::{Result, TbsError};
use crate::params::{Bound, LinearParams, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub q_head_h: LinearParams,
    pub k_head_h: LinearParams,
}

impl HeadParams {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, channels: usize, rng: &mut R) -> Self {
        HeadParams {
            q_head_h: LinearParams::init(store, "head.q", channels, channels, true, rng),
            k_head_h: LinearParams::init(store, "head.k", channels, channels, true, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N_q` foreground probabilities, in `[0, 1]` before any clamping.
    pub probs: Var,
    /// `N_q × (K·N_s)`, shots concatenated in order.
    pub attn: Var,
}

/// `adapted` holds, per shot, the `N_s × C` support rows and its feature-resolution mask.
pub fn predict_mask<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    hp: &HeadParams,
    fq: Var,
    adapted: &[(Var, &[bool])],
) -> Result<HeadOutput> {
    if adapted.is_empty() {
        return Err(TbsError::Degenerate {
            op: "predict_mask",
            detail: "no support shots".into(),
        });
    }
    let mut rows = Vec::with_capacity(adapted.len());
    let mut labels = Vec::new();
    for &(a, m) in adapted {
        if g.shape(a)[0] != m.len() {
            return Err(TbsError::Shape {
                op: "predict_mask",
                lhs: g.shape(a).to_vec(),
                rhs: vec![m.len()],
            });
        }
        rows.push(a);
        labels.extend(m.iter().map(|&f| if f { T::one() } else { T::zero() }));
    }
    let support = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let c = g.shape(fq)[1];
    let q = hp.q_head_h.apply(g, b, fq)?;
    let k = hp.k_head_h.apply(g, b, support)?;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, T::of(1.0 / (c as f64).sqrt()));
    let attn = g.softmax_rows(logits)?;
    let n = labels.len();
    let m = g.constant(Tensor::new(vec![n, 1], labels)?);
    let probs = g.matmul(attn, m)?;
    let nq = g.shape(probs)[0];
    let probs = g.reshape(probs, &[nq])?;
    Ok(HeadOutput { probs, attn })
}

/// Attention exchanged between class-matched query and support cells.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AaStats {
    /// Mean over query-foreground rows of the mass on support-foreground columns.
    pub sf_qf: Option<f64>,
    /// Mean over query-background rows of the mass on support-background columns.
    pub sb_qb: Option<f64>,
    pub avg: Option<f64>,
    /// Per-pair mean attention weight over (QF, SF) pairs.
    pub pair_sf_qf: Option<f64>,
    pub pair_sb_qb: Option<f64>,
}

pub fn averaged_attention<T: Scalar>(attn: &Tensor<T>, query_mask: &[bool], support_mask: &[bool]) -> Result<AaStats> {
    let (nq, ns) = attn.dims2("averaged_attention")?;
    if nq != query_mask.len() || ns != support_mask.len() {
        return Err(TbsError::Shape {
            op: "averaged_attention",
            lhs: attn.shape().to_vec(),
            rhs: vec![query_mask.len(), support_mask.len()],
        });
    }
    let n_sf = support_mask.iter().filter(|&&m| m).count();
    let n_sb = ns - n_sf;
    let stat = |fg: bool| -> (Option<f64>, Option<f64>) {
        let mut mass = 0.0;
        let mut rows = 0usize;
        for q in (0..nq).filter(|&q| query_mask[q] == fg) {
            rows += 1;
            mass += (0..ns)
                .filter(|&s| support_mask[s] == fg)
                .map(|s| attn.at2(q, s).as_f64())
                .sum::<f64>();
        }
        let cols = if fg { n_sf } else { n_sb };
        if rows == 0 {
            return (None, None);
        }
        let pair = (cols > 0).then(|| mass / (rows * cols) as f64);
        (Some(mass / rows as f64), pair)
    };
    let (sf_qf, pair_sf_qf) = stat(true);
    let (sb_qb, pair_sb_qb) = stat(false);
    let avg = match (sf_qf, sb_qb) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    Ok(AaStats {
        sf_qf,
        sb_qb,
        avg,
        pair_sf_qf,
        pair_sb_qb,
    })
}
