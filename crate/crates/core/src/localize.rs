//! Per-source localization maps and corner-aligned bilinear upsampling.

use ndarray::Array2;

use crate::autograd::Mat;
use crate::error::{invalid, Result};
use crate::objective::cosine;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub feature_map: Array2<f64>,
    pub image_map: Array2<f64>,
    pub source_category: usize,
}

/// `map[p] = cos(g_audio, raw_visual_p ⊙ g_visual)` laid out on the
/// `(rows, cols)` grid in row-major order.
pub fn similarity_map(g_audio: &Mat, raw_visual: &Mat, g_visual: &Mat, grid: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = grid;
    if raw_visual.nrows() != h * w {
        return invalid(format!("{} visual rows for a {h}×{w} grid", raw_visual.nrows()));
    }
    let d = raw_visual.ncols();
    if g_audio.dim() != (1, d) || g_visual.dim() != (1, d) {
        return invalid("class-aware vectors must be 1×D");
    }
    let a = g_audio.row(0).to_vec();
    let gv = g_visual.row(0);
    let vals: Vec<f64> = raw_visual
        .rows()
        .into_iter()
        .map(|r| {
            let masked: Vec<f64> = r.iter().zip(gv.iter()).map(|(x, y)| x * y).collect();
            cosine(&a, &masked)
        })
        .collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("grid size checked"))
}

/// Corner-aligned bilinear resize: output corners coincide with input
/// corners. A single row or column is replicated.
pub fn upsample_bilinear(map: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    let (th, tw) = target;
    if h == 0 || w == 0 || th == 0 || tw == 0 {
        return invalid("maps and targets must be non-empty");
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..tw).map(|x| coord(x, tw, w)).collect();
    let mut out = Array2::zeros(target);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, th, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
            let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
            out[[y, x]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(out)
}

pub fn localization_map(
    g_audio: &Mat,
    raw_visual: &Mat,
    g_visual: &Mat,
    grid: (usize, usize),
    image_size: (usize, usize),
    source_category: usize,
) -> Result<LocalizationMap> {
    let feature_map = similarity_map(g_audio, raw_visual, g_visual, grid)?;
    let image_map = upsample_bilinear(&feature_map, image_size)?;
    Ok(LocalizationMap { feature_map, image_map, source_category })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_mat;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_shape_vec((r, c), v.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let g_a = m(1, 2, &[1.0, 2.0]);
        let raw = m(4, 2, &[1.0, 2.0, 2.0, 4.0, 0.5, 1.0, 3.0, 6.0]);
        let map = similarity_map(&g_a, &raw, &m(1, 2, &[1.0, 1.0]), (2, 2)).unwrap();
        assert!(map.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let raw = m(2, 2, &[1.0, 5.0, 3.0, 7.0]);
        let map = similarity_map(&m(1, 2, &[1.0, 0.0]), &raw, &m(1, 2, &[0.0, 1.0]), (1, 2)).unwrap();
        assert!(map.iter().all(|&v| v.abs() < 1e-12));

        let map = similarity_map(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[1.0, 1.0]), &m(1, 2, &[1.0, 1.0]), (1, 1)).unwrap();
        assert_abs_diff_eq!(map[[0, 0]], 0.7071, epsilon = 1e-4);

        assert!(similarity_map(&g_a, &raw, &m(1, 2, &[1.0, 1.0]), (2, 2)).is_err());
    }

    #[test]
    fn similarity_invariant_to_audio_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g_a = normal_mat(&mut rng, 1, 6, 1.0);
        let raw = normal_mat(&mut rng, 14, 6, 1.0);
        let g_v = normal_mat(&mut rng, 1, 6, 1.0);
        let a = similarity_map(&g_a, &raw, &g_v, (2, 7)).unwrap();
        let b = similarity_map(&(&g_a * 13.0), &raw, &g_v, (2, 7)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn upsample_examples() {
        let c = Array2::from_elem((3, 4), 0.25);
        assert!(upsample_bilinear(&c, (10, 9)).unwrap().iter().all(|&v| v == 0.25));
        let one = Array2::from_elem((1, 1), -0.4);
        assert!(upsample_bilinear(&one, (5, 7)).unwrap().iter().all(|&v| v == -0.4));
        let two = m(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let up = upsample_bilinear(&two, (2, 4)).unwrap();
        for r in 0..2 {
            let row: Vec<f64> = up.row(r).to_vec();
            for (got, want) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
            }
        }
        let grid = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let up = upsample_bilinear(&grid, (7, 11)).unwrap();
        assert_eq!(up[[0, 0]], 1.0);
        assert_eq!(up[[0, 10]], 3.0);
        assert_eq!(up[[6, 0]], 4.0);
        assert_eq!(up[[6, 10]], 6.0);
        assert!(upsample_bilinear(&grid, (0, 3)).is_err());
    }

    #[test]
    fn localization_map_has_image_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = localization_map(
            &normal_mat(&mut rng, 1, 4, 1.0),
            &normal_mat(&mut rng, 98, 4, 1.0),
            &normal_mat(&mut rng, 1, 4, 1.0),
            (7, 14),
            (224, 448),
            3,
        )
        .unwrap();
        assert_eq!(lm.feature_map.dim(), (7, 14));
        assert_eq!(lm.image_map.dim(), (224, 448));
        assert_eq!(lm.source_category, 3);
    }

    proptest! {
        #[test]
        fn upsampling_stays_within_input_range(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            th in 1usize..40,
            tw in 1usize..40,
        ) {
            let map = Array2::from_shape_vec((3, 4), vals).unwrap();
            let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let up = upsample_bilinear(&map, (th, tw)).unwrap();
            prop_assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
