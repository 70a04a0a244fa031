use nalgebra::{DMatrix, Vector2};

use super::Affine2D;
use crate::masks::MaskObservation;

/// Norm below which a center-to-corner offset counts as zero.
pub const DEGENERATE_OFFSET: f64 = 1e-9;

/// Bounding-box cost between a LIP mask (center warped by `warp`) and an RGB
/// mask, in [0, 1].
pub fn instance_cost(lip: &MaskObservation, rgb: &MaskObservation, warp: &Affine2D) -> f64 {
    let (wv, hv) = (lip.width(), lip.height());
    let (wc, hc) = (rgb.width(), rgb.height());
    let ov = warp.apply(&lip.center());
    let dist = (ov - rgb.center()).norm();
    let shape = (wc - wv).abs() / (wc + wv) + (hc - hv).abs() / (hc + hv);
    let offset = 2.0 * (1.0 - (-dist / (hc + hv + wc + wv)).exp());
    (shape + offset) / 4.0
}

/// Cost between a LIP corner and an RGB corner, each taken relative to its
/// mask center. The LIP corner and center are warped first.
pub fn corner_cost(
    c_v: &Vector2<f64>,
    o_v: &Vector2<f64>,
    c_c: &Vector2<f64>,
    o_c: &Vector2<f64>,
    warp: &Affine2D,
) -> f64 {
    let dv = warp.apply(c_v) - warp.apply(o_v);
    let dc = c_c - o_c;
    let (nv, nc) = (dv.norm(), dc.norm());
    if nv < DEGENERATE_OFFSET && nc < DEGENERATE_OFFSET {
        return 0.0;
    }
    ((dv - dc).norm() / (nv + nc)).min(1.0)
}

/// Pairs `(i, j)` whose cost is the strict minimum of both row `i` and column
/// `j` and no larger than `tau`, sorted by row.
pub fn mutual_best_select(cost: &DMatrix<f64>, tau: f64) -> Vec<(usize, usize)> {
    let (m, n) = cost.shape();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let strict_argmin = |vals: &mut dyn Iterator<Item = f64>| -> Option<usize> {
        let mut best = None;
        let mut best_v = f64::INFINITY;
        let mut tied = false;
        for (k, v) in vals.enumerate() {
            if v < best_v {
                best_v = v;
                best = Some(k);
                tied = false;
            } else if v == best_v {
                tied = true;
            }
        }
        if tied { None } else { best }
    };
    let col_best: Vec<Option<usize>> = (0..n)
        .map(|j| strict_argmin(&mut cost.column(j).iter().copied()))
        .collect();
    (0..m)
        .filter_map(|i| {
            let j = strict_argmin(&mut cost.row(i).iter().copied())?;
            (col_best[j] == Some(i) && cost[(i, j)] <= tau).then_some((i, j))
        })
        .collect()
}
