//! Output plumbing: atomic file writes and the image/CSV formats the
//! commands emit. Every artifact is written to a sibling temp file and
//! renamed into place, so interrupted runs never leave partial outputs.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::RgbImage;
use layoutdiff::model::UNetConfig;
use layoutdiff::sampler::AttnRecord;

/// Writes `bytes` to `path` via temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?
        .to_string_lossy()
        .into_owned();
    let temp: PathBuf = path.with_file_name(format!("{name}.tmp-{}", std::process::id()));
    let result = std::fs::write(&temp, bytes)
        .with_context(|| format!("writing {}", temp.display()))
        .and_then(|()| {
            std::fs::rename(&temp, path)
                .with_context(|| format!("renaming into {}", path.display()))
        });
    if result.is_err() {
        let _ = std::fs::remove_file(&temp);
    }
    result
}

/// PNG-encodes and atomically writes an image.
pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let mut buf = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut buf), image::ImageOutputFormat::Png)
        .with_context(|| format!("encoding {}", path.display()))?;
    write_atomic(path, &buf)
}

/// 8-bit binary PGM with per-image min-max normalization.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - min) / span).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Dumps every attention map of a sampling run: one PGM per (step, layer,
/// token), named `step{SSS}-{layer}-tok{TT}.pgm`.
pub fn dump_attention(dir: &Path, records: &[AttnRecord], unet: &UNetConfig) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = 0;
    for record in records {
        let side = record.layer.grid_side(unet);
        let cells = side * side;
        let shape = record.map.shape();
        anyhow::ensure!(
            shape.len() == 2 && shape[0] == cells,
            "attention map for {} has shape {shape:?}, expected [{cells}, tokens]",
            record.layer.name()
        );
        let n_tokens = shape[1];
        for tok in 0..n_tokens {
            let column: Vec<f64> = (0..cells).map(|c| record.map.at2(c, tok)).collect();
            let name = format!(
                "step{:03}-{}-tok{:02}.pgm",
                record.step_index,
                record.layer.name(),
                tok
            );
            write_atomic(&dir.join(name), &pgm_bytes(side, side, &column))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Serializes rows as CSV with a fixed header. Values use the shortest
/// round-trip float formatting; `None` becomes an empty cell.
pub fn metrics_csv(header: &[&str], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for (label, values) in rows {
        out.push_str(label);
        for v in values {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}
