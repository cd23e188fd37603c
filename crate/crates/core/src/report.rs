//! Reports: contact-sheet PNGs of pairs (image row, mask row, overlay row)
//! and the downstream metrics CSV.

use crate::dataset::ImageMaskPair;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const CELL_GAP: usize = 2;

/// Write a contact sheet: one column per pair, rows showing the image, the
/// mask, and the image overlaid with the mask in red.
pub fn contact_sheet(pairs: &[ImageMaskPair], path: &Path, max_cols: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no pairs to render".into()));
    }
    let cols = pairs.len().min(max_cols.max(1));
    let (h, w, _c) = pairs[0].image.dim();
    let sheet_w = cols * w + (cols + 1) * CELL_GAP;
    let sheet_h = 3 * h + 4 * CELL_GAP;
    let mut img = image::RgbImage::from_pixel(sheet_w as u32, sheet_h as u32, image::Rgb([24, 24, 24]));
    for (col, pair) in pairs.iter().take(cols).enumerate() {
        let x0 = CELL_GAP + col * (w + CELL_GAP);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| (pair.image[[y, x, ch.min(pair.channels() - 1)]]
                    .clamp(0.0, 1.0)
                    * 255.0)
                    .round() as u8;
                let rgb = [px(0), px(1), px(2)];
                img.put_pixel((x0 + x) as u32, (CELL_GAP + y) as u32, image::Rgb(rgb));
                let m = (pair.mask[[y, x]] * 255.0) as u8;
                img.put_pixel(
                    (x0 + x) as u32,
                    (2 * CELL_GAP + h + y) as u32,
                    image::Rgb([m, m, m]),
                );
                let overlay = if pair.mask[[y, x]] == 1.0 {
                    [
                        (rgb[0] as f64 * 0.5 + 127.5) as u8,
                        (rgb[1] as f64 * 0.5) as u8,
                        (rgb[2] as f64 * 0.5) as u8,
                    ]
                } else {
                    rgb
                };
                img.put_pixel(
                    (x0 + x) as u32,
                    (3 * CELL_GAP + 2 * h + y) as u32,
                    image::Rgb(overlay),
                );
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// One downstream-evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub phase: String,
    pub dice: f64,
    pub iou: f64,
}

/// Write rows as `method,phase,dice,iou`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut body = String::from("method,phase,dice,iou\n");
    for r in rows {
        body.push_str(&format!("{},{},{:.6},{:.6}\n", r.method, r.phase, r.dice, r.iou));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Parse a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut out = Vec::new();
    for line in body.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            continue;
        }
        out.push(MetricsRow {
            method: cols[0].to_string(),
            phase: cols[1].to_string(),
            dice: cols[2].parse().map_err(|_| Error::Serialization(line.into()))?,
            iou: cols[3].parse().map_err(|_| Error::Serialization(line.into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_toy_dataset;
    use tempfile::tempdir;

    #[test]
    fn contact_sheet_renders_expected_geometry() {
        let dir = tempdir().unwrap();
        let pairs = make_toy_dataset(5, 16, 3);
        let path = dir.path().join("sheet.png");
        contact_sheet(&pairs, &path, 4).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width() as usize, 4 * 16 + 5 * CELL_GAP);
        assert_eq!(img.height() as usize, 3 * 16 + 4 * CELL_GAP);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempdir().unwrap();
        let rows = vec![
            MetricsRow { method: "concat".into(), phase: "synthetic_only".into(), dice: 0.75, iou: 0.6 },
            MetricsRow { method: "concat".into(), phase: "finetuned".into(), dice: 0.8, iou: 0.66 },
        ];
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, rows);
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("method,phase,dice,iou\n"));
    }
}
