//! Scalar-loop reference implementations, written independently of the tape.
//! Matrices are `Vec` rows of `f64`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbs_core::attention::QkvHeads;
use tbs_core::params::{LinearParams, ParamStore};
use tbs_core::seg_head::HeadParams;
use tbs_core::tbs::{TbsParams, COSINE_EPS, LAYER_NORM_EPS};
use tbs_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(vec![m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

/// Overwrites every weight and bias with fresh uniform values, so biases are
/// exercised too.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// `x · Wᵀ + b` with `W` stored `out × in`.
pub fn linear(store: &ParamStore<f64>, p: &LinearParams, x: &Mat) -> Mat {
    let w = store.get(p.weight).data();
    let b = p.bias.map(|b| store.get(b).data().to_vec());
    x.iter()
        .map(|row| {
            (0..p.fan_out)
                .map(|o| {
                    let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..p.fan_in {
                        acc += w[o * p.fan_in + i] * row[i];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Returns `(recon, attn)`.
pub fn cross_reconstruct(store: &ParamStore<f64>, h: &QkvHeads, src: &Mat, ctx: &Mat) -> (Mat, Mat) {
    let q = linear(store, &h.q, src);
    let k = linear(store, &h.k, ctx);
    let v = linear(store, &h.v, ctx);
    let d = h.q.fan_out as f64;
    let mut recon = Vec::new();
    let mut attn = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let a = softmax(&logits);
        let mut r = vec![0.0; h.v.fan_out];
        for (j, w) in a.iter().enumerate() {
            for c in 0..r.len() {
                r[c] += w * v[j][c];
            }
        }
        recon.push(r);
        attn.push(a);
    }
    (recon, attn)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS))
}

/// Cosine between `L(recon of fs from ctx)` and `L(V(fs))`, per support row.
pub fn relevance(store: &ParamStore<f64>, p: &TbsParams, fs: &Mat, ctx: &Mat) -> Vec<f64> {
    let (recon, _) = cross_reconstruct(store, &p.heads(), fs, ctx);
    let lrec = linear(store, &p.l_head, &recon);
    let lv = linear(store, &p.l_head, &linear(store, &p.v_head, fs));
    lrec.iter().zip(&lv).map(|(a, b)| cosine(a, b)).collect()
}

pub fn query_score(store: &ParamStore<f64>, p: &TbsParams, fs: &Mat, fq: &Mat) -> Vec<f64> {
    relevance(store, p, fs, fq)
}

pub fn target_score(store: &ParamStore<f64>, p: &TbsParams, fs: &Mat, mask: &[bool]) -> Vec<f64> {
    let fo: Mat = fs.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r.clone()).collect();
    relevance(store, p, fs, &fo)
}

pub fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Each cell's `[r, ln(r)]` pair through both 1×1 layers, then sigmoid.
pub fn refine(store: &ParamStore<f64>, p: &TbsParams, rb: &[f64]) -> Vec<f64> {
    let ln = layer_norm(rb);
    let w1 = store.get(p.refine_conv1.weight).data();
    let b1 = store.get(p.refine_conv1.bias.unwrap()).data();
    let w2 = store.get(p.refine_conv2.weight).data();
    let b2 = store.get(p.refine_conv2.bias.unwrap()).data()[0];
    let width = p.refine_conv1.fan_out;
    rb.iter()
        .zip(&ln)
        .map(|(&r, &l)| {
            let mut z = b2;
            for h in 0..width {
                let hidden = w1[2 * h] * r + w1[2 * h + 1] * l + b1[h];
                z += w2[h] * hidden;
            }
            sigmoid(z)
        })
        .collect()
}

/// Every stage of one shot: `(rq, rt, rb, refined, pinned, adapted)`.
pub struct Chain {
    pub rq: Vec<f64>,
    pub rt: Vec<f64>,
    pub rb: Vec<f64>,
    pub refined: Vec<f64>,
    pub pinned: Vec<f64>,
    pub adapted: Mat,
}

pub fn tbs_chain(store: &ParamStore<f64>, p: &TbsParams, fs: &Mat, fq: &Mat, mask: &[bool]) -> Chain {
    let rq = query_score(store, p, fs, fq);
    let rt = target_score(store, p, fs, mask);
    let rb: Vec<f64> = (0..fs.len()).map(|i| if mask[i] { 0.0 } else { rq[i] - rt[i] }).collect();
    let refined = refine(store, p, &rb);
    let pinned: Vec<f64> = refined.iter().zip(mask).map(|(&r, &m)| if m { 1.0 } else { r }).collect();
    let adapted = fs.iter().zip(&pinned).map(|(row, &s)| row.iter().map(|x| x * s).collect()).collect();
    Chain {
        rq,
        rt,
        rb,
        refined,
        pinned,
        adapted,
    }
}

/// Returns `(probs, attn)`; shots are concatenated along the support axis.
pub fn predict_mask(store: &ParamStore<f64>, hp: &HeadParams, fq: &Mat, shots: &[(Mat, Vec<bool>)]) -> (Vec<f64>, Mat) {
    let support: Mat = shots.iter().flat_map(|(a, _)| a.iter().cloned()).collect();
    let labels: Vec<f64> = shots.iter().flat_map(|(_, m)| m.iter().map(|&f| f as u8 as f64)).collect();
    let q = linear(store, &hp.q_head_h, fq);
    let k = linear(store, &hp.k_head_h, &support);
    let c = fq[0].len() as f64;
    let mut probs = Vec::new();
    let mut attn = Vec::new();
    for qi in &q {
        let mut logits = Vec::new();
        for kj in &k {
            let mut dot = 0.0;
            for t in 0..qi.len() {
                dot += qi[t] * kj[t];
            }
            logits.push(dot / c.sqrt());
        }
        let a = softmax(&logits);
        let mut p = 0.0;
        for (j, w) in a.iter().enumerate() {
            p += w * labels[j];
        }
        probs.push(p);
        attn.push(a);
    }
    (probs, attn)
}
