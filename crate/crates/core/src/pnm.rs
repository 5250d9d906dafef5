//! Binary PGM (P5) and PPM (P6) output for score maps and episodes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, TbsError};

pub const CONTOUR_RGB: [u8; 3] = [255, 32, 32];

pub fn encode_p5(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "P5 payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_p6(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "P6 payload size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Linear map of `[min, max]` onto `0..=255`. A constant map becomes all 255.
/// Returns the gray values and the range used.
pub fn scores_to_gray(values: &[f32]) -> (Vec<u8>, f32, f32) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let gray = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            } else {
                255
            }
        })
        .collect();
    (gray, lo, hi)
}

/// Nearest-neighbour enlargement of an h×w plane by `factor`.
pub fn enlarge<T: Copy>(cells: &[T], h: usize, w: usize, factor: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cells.len() * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            out.push(cells[(y / factor) * w + x / factor]);
        }
    }
    out
}

/// Mask pixels with at least one 4-neighbour outside the mask or the image.
pub fn contour(mask: &[bool], size: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size && mask[y as usize * size + x as usize]
    };
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Grayscale image in `[0, 1]` to RGB with the mask outline drawn over it.
pub fn overlay_contour(image: &[f32], mask: &[bool], size: usize) -> Vec<u8> {
    let edge = contour(mask, size);
    let mut rgb = Vec::with_capacity(3 * size * size);
    for (&v, &e) in image.iter().zip(&edge) {
        if e {
            rgb.extend_from_slice(&CONTOUR_RGB);
        } else {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    rgb
}

/// Sidecar text recording the score range behind a P5 image.
pub fn range_sidecar(label: &str, lo: f32, hi: f32) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "map = {label}");
    let _ = writeln!(s, "min = {lo}");
    let _ = writeln!(s, "max = {hi}");
    let _ = writeln!(s, "# gray = round(255 * (score - min) / (max - min))");
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| TbsError::io(path, e))
}
