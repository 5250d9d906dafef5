//! Single-head scaled dot-product cross attention used to rebuild one
//! feature set from another.

use crate::error::{Result, TbsError};
use crate::params::{Bound, LinearParams};
use crate::tape::{Graph, Var};
use crate::tensor::Scalar;

/// Query, key and value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QkvHeads {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `N_src × d`, one reconstruction per source row.
    pub recon: Var,
    /// `N_src × N_ctx`, row-stochastic.
    pub attn: Var,
}

/// `attn = softmax(Q(src)·K(ctx)ᵀ / √d)`, `recon = attn · V(ctx)`.
///
/// The softmax runs over the context axis: every source row spreads unit
/// mass over the context rows.
pub fn cross_reconstruct<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    heads: &QkvHeads,
    src: Var,
    ctx: Var,
) -> Result<AttentionOutput> {
    let (n_ctx, c_ctx) = g.value(ctx).dims2("cross_reconstruct")?;
    let (_, c_src) = g.value(src).dims2("cross_reconstruct")?;
    if n_ctx == 0 {
        return Err(TbsError::EmptyContext);
    }
    if c_src != heads.q.fan_in || c_ctx != heads.k.fan_in {
        return Err(TbsError::Shape {
            op: "cross_reconstruct",
            lhs: g.shape(src).to_vec(),
            rhs: g.shape(ctx).to_vec(),
        });
    }
    let q = heads.q.apply(g, p, src)?;
    let k = heads.k.apply(g, p, ctx)?;
    let v = heads.v.apply(g, p, ctx)?;
    let logits = g.matmul_nt(q, k)?;
    let d = heads.q.fan_out as f64;
    let logits = g.scale(logits, T::of(1.0 / d.sqrt()));
    let attn = g.softmax_rows(logits)?;
    let recon = g.matmul(attn, v)?;
    Ok(AttentionOutput { recon, attn })
}
