//! Finite-difference gradient checks in double precision.
//!
//! Each primitive is checked through a vector-Jacobian product: a random
//! upstream tensor `R` seeds the backward pass, and the finite-difference
//! side differentiates the scalar `Σ R ⊙ out` computed straight from forward
//! values, so no other op sits between the primitive and the check. The
//! composite case runs the whole encoder, suppression module and head on a
//! generated episode.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{generate_episode, Difficulty, GenConfig};
use crate::error::Result;
use crate::seg_head::Model;
use crate::tape::{Graph, OpKind, Var};
use crate::tbs::Ablation;
use crate::tensor::Tensor;

/// Maximum allowed relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Central difference half step.
pub const FD_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;
pub const COMPOSITE_NAME: &str = "encoder+tbs+head";

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub worst_rel: f64,
    /// `(input tensor, flat element)` of the worst probe.
    pub worst_at: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel < GRADCHECK_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{:<18} {} worst rel err {:.3e} over {} probes (input {}, index {})",
                r.name,
                if r.passed() { "PASS" } else { "FAIL" },
                r.worst_rel,
                r.probes,
                r.worst_at.0,
                r.worst_at.1
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub seed: u64,
    /// Corrupts one op's backward; negative control only.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            probes: 100,
            seed: 0,
            fault: None,
        }
    }
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn case_for(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let mut r = |s: &[usize]| rand_t(rng, s);
    let (inputs, build): (Vec<Tensor<f64>>, Box<Build>) = match kind {
        OpKind::MatMul => (vec![r(&[3, 4]), r(&[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        OpKind::MatMulNT => (vec![r(&[3, 4]), r(&[5, 4])], Box::new(|g, v| g.matmul_nt(v[0], v[1]))),
        OpKind::Linear => (
            vec![r(&[4, 3]), r(&[5, 3]), r(&[5])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        OpKind::Transpose => (vec![r(&[3, 4])], Box::new(|g, v| g.transpose(v[0]))),
        OpKind::Reshape => (vec![r(&[3, 4])], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        OpKind::Add => (vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        OpKind::Sub => (vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        OpKind::Scale => (vec![r(&[3, 4])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        OpKind::MaskMul => {
            let m = r(&[3, 4]);
            (vec![r(&[3, 4])], Box::new(move |g, v| g.mask_mul(v[0], m.clone())))
        }
        OpKind::SoftmaxRows => (
            vec![r(&[3, 5]).map(|x| 3.0 * x)],
            Box::new(|g, v| g.softmax_rows(v[0])),
        ),
        OpKind::LayerNorm => (vec![r(&[8])], Box::new(|g, v| g.layer_norm(v[0], 1e-5))),
        OpKind::CosineRows => (
            vec![r(&[4, 3]), r(&[4, 3])],
            Box::new(|g, v| g.cosine_rows(v[0], v[1], 1e-8)),
        ),
        OpKind::Sigmoid => (vec![r(&[10]).map(|x| 4.0 * x)], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        OpKind::Relu => (vec![rand_away(rng, &[10])], Box::new(|g, v| Ok(g.relu(v[0])))),
        OpKind::Conv2d => (
            vec![r(&[2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3]), r(&[2, 3, 3, 3]), r(&[2])],
            Box::new(|g, v| {
                let a = g.conv2d(v[0], v[1], Some(v[2]), 1)?;
                let b = g.conv2d(a, v[3], Some(v[4]), 2)?;
                let fa = g.reshape(a, &[75])?;
                let fb = g.reshape(b, &[18])?;
                let fa = g.reshape(fa, &[75, 1])?;
                let fb = g.reshape(fb, &[18, 1])?;
                g.concat_rows(&[fa, fb])
            }),
        ),
        OpKind::BceLoss => {
            let y = Tensor::from_fn(&[6], |i| (i % 2) as f64);
            (
                vec![Tensor::from_fn(&[6], |_| rng.random_range(0.05..0.95))],
                Box::new(move |g, v| g.bce_loss(v[0], y.clone())),
            )
        }
        OpKind::GatherRows => (vec![r(&[5, 3])], Box::new(|g, v| g.gather_rows(v[0], &[0, 2, 2, 4]))),
        OpKind::ConcatCols => (
            vec![r(&[4]), r(&[4, 2])],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        OpKind::ConcatRows => (
            vec![r(&[2, 3]), r(&[3, 3])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        OpKind::Pin => (
            vec![r(&[6])],
            Box::new(|g, v| g.pin(v[0], &[true, false, false, true, false, false])),
        ),
        OpKind::RowScale => (vec![r(&[4, 3]), r(&[4])], Box::new(|g, v| g.row_scale(v[0], v[1]))),
        OpKind::Patchify => (vec![r(&[2, 4, 4])], Box::new(|g, v| g.patchify(v[0], 2))),
        OpKind::Sum => (vec![r(&[3, 4])], Box::new(|g, v| Ok(g.sum(v[0])))),
    };
    Case { inputs, build }
}

/// Central difference of `f` in one coordinate. Halves the step when the
/// two sides land on different smooth pieces.
fn central_difference(
    base: &[Tensor<f64>],
    at: (usize, usize),
    f: &dyn Fn(&[Tensor<f64>]) -> Result<(f64, Vec<bool>)>,
) -> Result<f64> {
    let mut h = FD_STEP;
    let mut last = 0.0;
    for _ in 0..8 {
        let mut plus = base.to_vec();
        plus[at.0].data_mut()[at.1] += h;
        let mut minus = base.to_vec();
        minus[at.0].data_mut()[at.1] -= h;
        let (fp, sp) = f(&plus)?;
        let (fm, sm) = f(&minus)?;
        last = (fp - fm) / (2.0 * h);
        if sp == sm {
            break;
        }
        h *= 0.25;
    }
    Ok(last)
}

/// Picks probe coordinates round-robin over input tensors so every tensor
/// is covered.
fn probe_sites(shapes: &[usize], probes: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..probes)
        .map(|i| {
            let t = i % shapes.len();
            (t, rng.random_range(0..shapes[t]))
        })
        .collect()
}

fn summarize(name: &str, results: Vec<((usize, usize), f64, f64)>) -> CheckResult {
    let mut worst = CheckResult {
        name: name.to_string(),
        probes: results.len(),
        worst_rel: 0.0,
        worst_at: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (at, a, n) in results {
        let e = relative_error(a, n);
        if e > worst.worst_rel || !e.is_finite() {
            worst.worst_rel = if e.is_finite() { e } else { f64::INFINITY };
            worst.worst_at = at;
            worst.analytic = a;
            worst.numeric = n;
        }
    }
    worst
}

pub fn check_primitive(kind: OpKind, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (kind as u64).wrapping_mul(0x9E37_79B9));
    let case = case_for(kind, &mut rng);
    let mut g = match cfg.fault {
        Some(k) => Graph::with_fault(k),
        None => Graph::new(),
    };
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let upstream = rand_t(&mut rng, g.shape(out));
    let grads = g.backward_from(out, upstream.clone())?;
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let o = (case.build)(&mut g, &vs)?;
        let s = g.value(o).data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
        Ok((s, g.kink_signature()))
    };
    let sizes: Vec<usize> = case.inputs.iter().map(Tensor::numel).collect();
    let mut results = Vec::with_capacity(cfg.probes);
    for at in probe_sites(&sizes, cfg.probes, &mut rng) {
        let a = grads.get(vars[at.0]).map_or(0.0, |t| t.data()[at.1]);
        let n = central_difference(&case.inputs, at, &eval)?;
        results.push((at, a, n));
    }
    Ok(summarize(kind.name(), results))
}

/// Whole-model check on a two-shot mixed-difficulty episode.
pub fn check_composite(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let model = Model::<f64>::init(cfg.seed.wrapping_add(7));
    let gen = GenConfig {
        shots: 2,
        ..GenConfig::default().only(Difficulty::Mixed)
    };
    let ep = generate_episode(&gen, cfg.seed)?;
    let mut g = match cfg.fault {
        Some(k) => Graph::with_fault(k),
        None => Graph::new(),
    };
    let (_, grads) = model.loss_and_grads_on(&mut g, &ep, Ablation::FULL)?;
    let base: Vec<Tensor<f64>> = model.params.ids().map(|id| model.params.get(id).clone()).collect();
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut m = model.clone();
        for (id, t) in m.params.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
            *m.params.get_mut(id) = t.clone();
        }
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        let fwd = m.forward(&mut g, &b, &ep, Ablation::FULL)?;
        Ok((g.value(fwd.loss).data()[0], g.kink_signature()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE);
    let sizes: Vec<usize> = base.iter().map(Tensor::numel).collect();
    let mut results = Vec::with_capacity(cfg.probes);
    for at in probe_sites(&sizes, cfg.probes, &mut rng) {
        let n = central_difference(&base, at, &eval)?;
        results.push((at, grads[at.0].data()[at.1], n));
    }
    Ok(summarize(COMPOSITE_NAME, results))
}

/// Every primitive once, then the composite.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(OpKind::ALL.len() + 1);
    for kind in OpKind::ALL {
        results.push(check_primitive(kind, cfg)?);
    }
    results.push(check_composite(cfg)?);
    Ok(GradcheckReport { results })
}
