//! Heatmap overlays and embedding export.
//!
//! Colormap: the min-max normalized map value `v` is drawn as
//! `(1 − v, 1 − v, v)` — yellow for low, blue for high — blended over the
//! frame at [`OVERLAY_ALPHA`]. Constant maps normalize to zero and tint the
//! frame uniformly yellow. Ground-truth boxes are outlined in red.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{invalid, Result};
use crate::frontend::{Image, FRAME_SIZE};
use crate::harness::model::{Batch, Model};
use crate::localize::upsample_bilinear;
use crate::synth::{save_png, BBox, Dataset, ManifestRecord};

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const OUTLINE_PX: usize = 2;

pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [1.0 - v, 1.0 - v, v]
}

/// Blends `map` (same size as the frame) over `frame` and outlines `bbox`.
pub fn overlay(frame: &Image, map: &Array2<f64>, bbox: Option<&BBox>) -> Result<Image> {
    let (h, w) = (frame.height(), frame.width());
    if map.dim() != (h, w) || frame.channels() != 3 {
        return invalid(format!("map {:?} does not match the {w}×{h} RGB frame", map.dim()));
    }
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = hi - lo;
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let v = if range > 0.0 { (map[[y, x]] - lo) / range } else { 0.0 };
            let color = colormap(v);
            for c in 0..3 {
                px[[y, x, c]] = (1.0 - OVERLAY_ALPHA) * frame.pixels[[y, x, c]] + OVERLAY_ALPHA * color[c];
            }
        }
    }
    if let Some(b) = bbox {
        for y in b.y0..b.y1.min(h) {
            for x in b.x0..b.x1.min(w) {
                let edge = y < b.y0 + OUTLINE_PX || y + OUTLINE_PX >= b.y1 || x < b.x0 + OUTLINE_PX || x + OUTLINE_PX >= b.x1;
                if edge {
                    px[[y, x, 0]] = 1.0;
                    px[[y, x, 1]] = 0.0;
                    px[[y, x, 2]] = 0.0;
                }
            }
        }
    }
    Ok(Image::new(px))
}

/// Writes one overlay per source of `record` into `out_dir` and returns
/// the paths, in source order.
pub fn visualize(model: &Model, dataset: &Dataset, record: &ManifestRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let batch = Batch::load(dataset, &[record], model.config.num_categories)?;
    let out = model.infer(&batch)?.remove(0);
    let frame = dataset.load_image(record)?;
    let size = (FRAME_SIZE, record.image_width());
    let mut paths = Vec::with_capacity(record.n_sources());
    for (n, (&cat, bbox)) in record.categories.iter().zip(&record.boxes).enumerate() {
        let map = upsample_bilinear(&out.feature_map(cat)?, size)?;
        let img = overlay(&frame, &map, Some(bbox))?;
        let path = out_dir.join(format!("seed{:08}_src{n}_cat{cat}.png", record.seed));
        save_png(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn embedding_header(dim: usize) -> String {
    let mut h = String::from("sample,source,modality,category");
    for k in 0..dim {
        write!(h, ",v{k}").expect("string write");
    }
    h
}

/// One CSV row per (sample, source, modality) holding the category id and
/// that source's embedding. Returns the number of data rows.
pub fn export_embeddings(model: &Model, dataset: &Dataset, out: &Path) -> Result<usize> {
    let mut text = embedding_header(model.config.dim);
    text.push('\n');
    let mut rows = 0;
    let all: Vec<&ManifestRecord> = dataset.records.iter().collect();
    for (chunk_idx, chunk) in all.chunks(16).enumerate() {
        let batch = Batch::load(dataset, chunk, model.config.num_categories)?;
        for (k, (r, o)) in chunk.iter().zip(model.infer(&batch)?).enumerate() {
            let sample = chunk_idx * 16 + k;
            for (n, &cat) in r.categories.iter().enumerate() {
                let (a, v) = o.embedding(cat)?;
                for (modality, vec) in [("audio", a), ("visual", v)] {
                    write!(text, "{sample},{n},{modality},{cat}").expect("string write");
                    for x in vec {
                        write!(text, ",{x}").expect("string write");
                    }
                    text.push('\n');
                    rows += 1;
                }
            }
        }
    }
    std::fs::write(out, text)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_tints_uniformly() {
        let frame = Image::filled(4, 6, 0.2);
        let img = overlay(&frame, &Array2::from_elem((4, 6), 3.0), None).unwrap();
        let first = [img.pixels[[0, 0, 0]], img.pixels[[0, 0, 1]], img.pixels[[0, 0, 2]]];
        assert!(img.pixels.indexed_iter().all(|((_, _, c), &v)| v == first[c]));
        assert_eq!(first, [0.6, 0.6, 0.1]);
        assert!(overlay(&frame, &Array2::zeros((3, 6)), None).is_err());
    }

    #[test]
    fn outline_marks_box_edges() {
        let frame = Image::filled(10, 10, 0.0);
        let b = BBox { x0: 2, y0: 2, x1: 8, y1: 8 };
        let img = overlay(&frame, &Array2::zeros((10, 10)), Some(&b)).unwrap();
        assert_eq!(img.pixels[[2, 5, 0]], 1.0);
        assert_eq!(img.pixels[[7, 5, 0]], 1.0);
        assert_ne!(img.pixels[[5, 5, 0]], 1.0);
        assert_ne!(img.pixels[[0, 0, 0]], 1.0);
    }

    #[test]
    fn header_lists_value_columns() {
        assert_eq!(embedding_header(3), "sample,source,modality,category,v0,v1,v2");
    }
}
