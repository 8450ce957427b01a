//! 8-bit binary PGM output.

use std::io::Write;
use std::path::Path;

use kspace_rl_core::kspace::PhaseIndicator;

use crate::error::CliError;

pub const BARCODE_ROWS: usize = 32;

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(CliError::io(path.display().to_string()))?;
    f.write_all(&encode(width, height, pixels))
        .map_err(CliError::io(path.display().to_string()))
}

/// Linear map of `values` onto 0..=255 with `max` as white.
pub fn scale_to_u8(values: &[f32], max: f32) -> Vec<u8> {
    let m = if max > 0.0 { max } else { 1.0 };
    values
        .iter()
        .map(|v| ((v / m).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Acquired phases white, the rest black, repeated over `BARCODE_ROWS` rows.
pub fn mask_barcode(mask: &PhaseIndicator) -> Vec<u8> {
    let row: Vec<u8> = mask
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    row.repeat(BARCODE_ROWS)
}

/// Pre-selected phases at 255, then the `t`-th learned selection at
/// `255 (M - t) / (M + 1)`; never-acquired phases stay black.
pub fn order_heatmap(phases: usize, preselected: &[usize], order: &[usize]) -> Vec<u8> {
    let mut row = vec![0u8; phases];
    for &p in preselected {
        row[p] = 255;
    }
    let m = order.len();
    for (t, &p) in order.iter().enumerate() {
        row[p] = (255.0 * (m - t) as f64 / (m + 1) as f64).round() as u8;
    }
    row.repeat(BARCODE_ROWS)
}
