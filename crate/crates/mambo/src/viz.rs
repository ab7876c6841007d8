//! File-based visualization: patch grids as binary portable pixmaps (P6)
//! and as CSV. One pixel per patch, row-major, no image library involved,
//! so outputs are byte-for-byte reproducible.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::BackgroundSet;

fn check_grid(values: usize, h: usize, w: usize) -> Result<()> {
    if values != h * w {
        return Err(Error::ShapeMismatch {
            context: "visualization grid",
            expected: h * w,
            got: values,
        });
    }
    Ok(())
}

/// Diverging blue-white-red ramp over [lo, hi].
fn ramp(value: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo {
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    if t < 0.5 {
        let u = t * 2.0;
        let c = (u * 255.0).round() as u8;
        [c, c, 255]
    } else {
        let u = (1.0 - t) * 2.0;
        let c = (u * 255.0).round() as u8;
        [255, c, c]
    }
}

/// Render a value grid as a P6 pixmap, one pixel per patch.
pub fn heat_ppm(values: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    check_grid(values.len(), h, w)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in values {
        out.extend_from_slice(&ramp(*v, lo, hi));
    }
    Ok(out)
}

/// Render a background selection as a black/white P6 pixmap: selected
/// patches are white.
pub fn mask_ppm(selection: &BackgroundSet, h: usize, w: usize) -> Result<Vec<u8>> {
    for &i in &selection.indices {
        if i >= h * w {
            return Err(Error::IndexOutOfRange {
                context: "mask pixmap",
                index: i,
                size: h * w,
            });
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        let c = if selection.contains(i) { 255 } else { 0 };
        out.extend_from_slice(&[c, c, c]);
    }
    Ok(out)
}

/// Value grid as CSV, one row per grid row. Values use the shortest
/// round-trip decimal form, so re-reading recovers them exactly.
pub fn grid_csv(values: &[f64], h: usize, w: usize) -> Result<String> {
    check_grid(values.len(), h, w)?;
    let mut out = String::new();
    for row in 0..h {
        let cells: Vec<String> = (0..w)
            .map(|col| values[row * w + col].to_string())
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Parse a grid CSV back into row-major values.
pub fn parse_grid_csv(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::invalid_config("grid csv", format!("cannot parse `{cell}`"))
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

/// Artifacts for one visualized sample.
#[derive(Debug, Clone)]
pub struct SampleMaps {
    pub refined_sim: Vec<f64>,
    pub delta: Vec<f64>,
    pub selection: BackgroundSet,
}

/// Write the similarity heatmap (pixmap + CSV), the extracted-background
/// mask, and the refinement-weight map (pixmap + CSV) for one sample.
/// Returns the created paths.
pub fn emit_sample_maps(
    dir: &Path,
    sample_id: &str,
    maps: &SampleMaps,
    h: usize,
    w: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let write = |name: String, bytes: Vec<u8>| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    let mut written = Vec::new();
    written.push(write(
        format!("{sample_id}_sim.ppm"),
        heat_ppm(&maps.refined_sim, h, w, -1.0, 1.0)?,
    )?);
    written.push(write(
        format!("{sample_id}_sim.csv"),
        grid_csv(&maps.refined_sim, h, w)?.into_bytes(),
    )?);
    written.push(write(
        format!("{sample_id}_mask.ppm"),
        mask_ppm(&maps.selection, h, w)?,
    )?);
    written.push(write(
        format!("{sample_id}_delta.ppm"),
        heat_ppm(&maps.delta, h, w, 0.0, 1.0)?,
    )?);
    written.push(write
        (format!("{sample_id}_delta.csv"),
        grid_csv(&maps.delta, h, w)?.into_bytes(),
    )?);
    Ok(written)
}
