//! Score-map and episode renderings.

use crate::episodes::{Episode, FEAT_SIZE, IMAGE_SIZE};
use crate::error::{Result, TbsError};
use crate::pnm::{encode_p5, encode_p6, enlarge, overlay_contour, range_sidecar, scores_to_gray};
use crate::seg_head::Model;
use crate::tape::Graph;
use crate::tbs::{Ablation, Stage};

/// One output file, named relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VizFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

const CELL: usize = IMAGE_SIZE / FEAT_SIZE;

/// Per shot: background score before (`rb`) and after refinement and
/// pinning (`rb_pinned`) as P5 with range sidecars; query and supports with
/// mask outlines as P6.
pub fn visualize_episode(model: &Model<f32>, ep: &Episode, ablation: Ablation) -> Result<Vec<VizFile>> {
    if ablation.bypass() {
        return Err(TbsError::Config("score maps need use_qs or use_ts enabled".into()));
    }
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let fwd = model.forward(&mut g, &b, ep, ablation)?;
    let mut files = Vec::new();
    for (k, (_, _, trace)) in fwd.shots.iter().enumerate() {
        for (stage, label) in [(Stage::B, "rb"), (Stage::Pinned, "rb_pinned")] {
            let map = trace
                .score_map(&g, stage, FEAT_SIZE, FEAT_SIZE)
                .expect("stage computed when not bypassed");
            let (gray, lo, hi) = scores_to_gray(map.values.data());
            let name = format!("shot{k}_{label}");
            files.push(VizFile {
                name: format!("{name}.pgm"),
                bytes: encode_p5(IMAGE_SIZE, IMAGE_SIZE, &enlarge(&gray, FEAT_SIZE, FEAT_SIZE, CELL)),
            });
            files.push(VizFile {
                name: format!("{name}.range.txt"),
                bytes: range_sidecar(label, lo, hi).into_bytes(),
            });
        }
    }
    let samples = std::iter::once(("query".to_string(), &ep.query))
        .chain(ep.supports.iter().enumerate().map(|(k, s)| (format!("support{k}"), s)));
    for (name, s) in samples {
        let rgb = overlay_contour(s.image.data(), &s.mask, IMAGE_SIZE);
        files.push(VizFile {
            name: format!("{name}.ppm"),
            bytes: encode_p6(IMAGE_SIZE, IMAGE_SIZE, &rgb),
        });
    }
    Ok(files)
}

/// Variance of a score map over background cells; `None` without any.
pub fn background_variance(values: &[f32], mask: &[bool]) -> Option<f64> {
    let bg: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| !m).map(|(&v, _)| v as f64).collect();
    if bg.is_empty() {
        return None;
    }
    let mean = bg.iter().sum::<f64>() / bg.len() as f64;
    Some(bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bg.len() as f64)
}

/// Background variance of the first shot's `R^B` map.
pub fn rb_background_variance(model: &Model<f32>, ep: &Episode, ablation: Ablation) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let fwd = model.forward(&mut g, &b, ep, ablation)?;
    let (_, mask, trace) = &fwd.shots[0];
    Ok(trace
        .score_map(&g, Stage::B, FEAT_SIZE, FEAT_SIZE)
        .and_then(|m| background_variance(m.values.data(), mask)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_episode, Difficulty, GenConfig};

    #[test]
    fn pinned_foreground_renders_white() {
        let m = Model::<f32>::init(0);
        let ep = generate_episode(&GenConfig::default(), 11).unwrap();
        let files = visualize_episode(&m, &ep, Ablation::FULL).unwrap();
        let pinned = files.iter().find(|f| f.name == "shot0_rb_pinned.pgm").unwrap();
        let header = b"P5\n64 64\n255\n".len();
        let px = &pinned.bytes[header..];
        for (i, &fg) in ep.supports[0].mask_feat().iter().enumerate() {
            if fg {
                let (y, x) = (i / 8 * 8 + 4, i % 8 * 8 + 4);
                assert_eq!(px[y * 64 + x], 255);
            }
        }
    }

    #[test]
    fn files_cover_every_shot() {
        let m = Model::<f32>::init(0);
        let cfg = GenConfig {
            shots: 2,
            ..GenConfig::default()
        };
        let ep = generate_episode(&cfg, 5).unwrap();
        let names: Vec<String> = visualize_episode(&m, &ep, Ablation::FULL).unwrap().into_iter().map(|f| f.name).collect();
        for n in ["shot1_rb.pgm", "shot1_rb_pinned.range.txt", "query.ppm", "support1.ppm"] {
            assert!(names.iter().any(|x| x == n), "{n} missing from {names:?}");
        }
    }

    #[test]
    fn bypass_is_rejected() {
        let m = Model::<f32>::init(0);
        let ep = generate_episode(&GenConfig::default().only(Difficulty::Clean), 5).unwrap();
        assert!(visualize_episode(&m, &ep, Ablation::BASELINE).is_err());
    }

    #[test]
    fn variance_of_constant_background_is_zero() {
        assert_eq!(background_variance(&[0.3, 0.3, 9.0], &[false, false, true]), Some(0.0));
        assert_eq!(background_variance(&[1.0], &[true]), None);
    }
}
