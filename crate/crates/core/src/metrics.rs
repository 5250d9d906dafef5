//! IoU-based evaluation.
//!
//! Class IoU accumulates intersections and unions over all episodes of a
//! class before dividing. The per-episode average is available as
//! [`MiouMode::PerEpisode`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, TbsError};
use crate::seg_head::AaStats;
use crate::tbs::Ablation;

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub inter: u64,
    pub union: u64,
}

impl Counts {
    pub fn new(inter: u64, union: u64) -> Self {
        Counts { inter, union }
    }

    /// Counts for the `true` label of two binary masks.
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(TbsError::Shape {
                op: "iou",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.inter += (p && g) as u64;
            c.union += (p || g) as u64;
        }
        Ok(c)
    }

    pub fn merge(&mut self, o: Counts) {
        self.inter += o.inter;
        self.union += o.union;
    }

    /// `inter / union`, and 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Counts::of(pred, gt)?.iou())
}

/// Foreground and background counts of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeResult {
    pub class: usize,
    pub fg: Counts,
    pub bg: Counts,
}

impl EpisodeResult {
    pub fn from_masks(class: usize, pred: &[bool], gt: &[bool]) -> Result<Self> {
        let fg = Counts::of(pred, gt)?;
        let np: Vec<bool> = pred.iter().map(|p| !p).collect();
        let ng: Vec<bool> = gt.iter().map(|g| !g).collect();
        let bg = Counts::of(&np, &ng)?;
        Ok(EpisodeResult { class, fg, bg })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MiouMode {
    #[default]
    Accumulated,
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// Mean over classes that have at least one episode.
    pub miou: Option<f64>,
    pub per_class: Vec<(usize, Option<f64>)>,
    /// Requested classes with no episodes.
    pub missing: Vec<usize>,
}

/// Running sums for AA statistics; absent values are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AaAccumulator {
    sums: [f64; 5],
    counts: [u64; 5],
}

impl AaAccumulator {
    pub fn add(&mut self, s: &AaStats) {
        let vals = [s.sf_qf, s.sb_qb, s.avg, s.pair_sf_qf, s.pair_sb_qb];
        for (k, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
    }

    pub fn merge(&mut self, o: &AaAccumulator) {
        for k in 0..5 {
            self.sums[k] += o.sums[k];
            self.counts[k] += o.counts[k];
        }
    }

    fn mean(&self, k: usize) -> Option<f64> {
        (self.counts[k] > 0).then(|| self.sums[k] / self.counts[k] as f64)
    }

    pub fn summary(&self) -> AaStats {
        AaStats {
            sf_qf: self.mean(0),
            sb_qb: self.mean(1),
            avg: self.mean(2),
            pair_sf_qf: self.mean(3),
            pair_sb_qb: self.mean(4),
        }
    }
}

/// Mergeable evaluation state for one fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    per_class: BTreeMap<usize, Counts>,
    per_class_episode: BTreeMap<usize, (f64, u64)>,
    fg: Counts,
    bg: Counts,
    pub aa: AaAccumulator,
    pub episodes: u64,
}

impl MetricAccumulator {
    pub fn add(&mut self, r: &EpisodeResult) {
        self.per_class.entry(r.class).or_default().merge(r.fg);
        let e = self.per_class_episode.entry(r.class).or_default();
        e.0 += r.fg.iou();
        e.1 += 1;
        self.fg.merge(r.fg);
        self.bg.merge(r.bg);
        self.episodes += 1;
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        for (c, k) in &o.per_class {
            self.per_class.entry(*c).or_default().merge(*k);
        }
        for (c, (s, n)) in &o.per_class_episode {
            let e = self.per_class_episode.entry(*c).or_default();
            e.0 += s;
            e.1 += n;
        }
        self.fg.merge(o.fg);
        self.bg.merge(o.bg);
        self.aa.merge(&o.aa);
        self.episodes += o.episodes;
    }

    pub fn class_iou(&self, class: usize, mode: MiouMode) -> Option<f64> {
        match mode {
            MiouMode::Accumulated => self.per_class.get(&class).map(Counts::iou),
            MiouMode::PerEpisode => self
                .per_class_episode
                .get(&class)
                .filter(|(_, n)| *n > 0)
                .map(|(s, n)| s / *n as f64),
        }
    }

    pub fn miou(&self, classes: &[usize], mode: MiouMode) -> MiouResult {
        let per_class: Vec<(usize, Option<f64>)> = classes.iter().map(|&c| (c, self.class_iou(c, mode))).collect();
        let present: Vec<f64> = per_class.iter().filter_map(|(_, v)| *v).collect();
        let missing = per_class.iter().filter(|(_, v)| v.is_none()).map(|(c, _)| *c).collect();
        MiouResult {
            miou: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
            per_class,
            missing,
        }
    }

    /// Mean of foreground and background IoU over all episodes, ignoring class.
    pub fn fb_iou(&self) -> Option<f64> {
        (self.episodes > 0).then(|| (self.fg.iou() + self.bg.iou()) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub per_class_iou: Vec<(usize, Option<f64>)>,
    pub miou: Option<f64>,
    pub fb_iou: Option<f64>,
    pub aa: AaStats,
    pub missing: Vec<usize>,
}

impl FoldReport {
    pub fn from_accumulator(acc: &MetricAccumulator, test_classes: &[usize], mode: MiouMode) -> Self {
        let m = acc.miou(test_classes, mode);
        FoldReport {
            per_class_iou: m.per_class,
            miou: m.miou,
            fb_iou: acc.fb_iou(),
            aa: acc.aa.summary(),
            missing: m.missing,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_fold: BTreeMap<usize, FoldReport>,
    pub episode_count: u64,
    pub seed: u64,
    pub ablation: Ablation,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub const CSV_HEADER: &str = "fold,class,iou,miou,fb_iou,aa_sf_qf,aa_sb_qb,aa_avg";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (fold, r) in &self.per_fold {
            for (class, v) in &r.per_class_iou {
                let _ = writeln!(
                    s,
                    "{fold},{class},{},{},{},{},{},{}",
                    opt(*v),
                    opt(r.miou),
                    opt(r.fb_iou),
                    opt(r.aa.sf_qf),
                    opt(r.aa.sb_qb),
                    opt(r.aa.avg)
                );
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ablation {} | seed {} | {} episodes",
            self.ablation.label(),
            self.seed,
            self.episode_count
        );
        for (fold, r) in &self.per_fold {
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
            let _ = writeln!(s, "fold {fold}: mIoU {} FB-IoU {}", pct(r.miou), pct(r.fb_iou));
            for (c, v) in &r.per_class_iou {
                let _ = writeln!(s, "  class {c}: IoU {}", pct(*v));
            }
            for c in &r.missing {
                let _ = writeln!(s, "  warning: class {c} had no episodes");
            }
            let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(
                s,
                "  AA SF&QF {} SB&QB {} avg {} (per-pair SF&QF {} SB&QB {})",
                f(r.aa.sf_qf),
                f(r.aa.sb_qb),
                f(r.aa.avg),
                f(r.aa.pair_sf_qf),
                f(r.aa.pair_sb_qb)
            );
        }
        s
    }
}
