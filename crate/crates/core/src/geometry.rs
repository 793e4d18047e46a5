//! Annotation geometry: polygons and brush runs, validated and rasterised
//! onto a label mask.
//!
//! Coordinates are continuous `[row, col]` pairs; pixel `(i, j)` covers
//! `[i, i+1) x [j, j+1)` and belongs to a polygon when its centre
//! `(i + 0.5, j + 0.5)` is inside under the even-odd rule. A polygon may
//! touch the frame, so vertices range over `[0, H] x [0, W]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::eem::Run;
use crate::error::{Error, Result};
use crate::types::LabelMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edit {
    Polygon { class_id: u8, points: Vec<[f64; 2]> },
    /// `[row, first_col, length]` runs.
    Brush { class_id: u8, runs: Vec<Run> },
}

impl Edit {
    pub fn class_id(&self) -> u8 {
        match self {
            Edit::Polygon { class_id, .. } | Edit::Brush { class_id, .. } => *class_id,
        }
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed segments `ab` and `cd` share at least one point.
pub fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Twice the signed area.
fn signed_area2(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|k| {
            let (p, q) = (points[k], points[(k + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum()
}

/// Checks vertex count, finiteness, bounds, area and simplicity.
pub fn validate_polygon(points: &[[f64; 2]], height: usize, width: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Geometry(m));
    if points.len() < 3 {
        return bad(format!("polygon needs at least 3 vertices, got {}", points.len()));
    }
    for (k, p) in points.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() {
            return bad(format!("vertex {k} is not finite"));
        }
        if p[0] < 0.0 || p[1] < 0.0 || p[0] > height as f64 || p[1] > width as f64 {
            return bad(format!("vertex {k} ({}, {}) outside the {height}x{width} frame", p[0], p[1]));
        }
    }
    if signed_area2(points) == 0.0 {
        return bad("polygon has zero area".into());
    }
    let n = points.len();
    for e in 0..n {
        let (a, b) = (points[e], points[(e + 1) % n]);
        if a == b {
            return bad(format!("edge {e} has zero length"));
        }
        for f in e + 1..n {
            let adjacent = f == e + 1 || (e == 0 && f == n - 1);
            let (c, d) = (points[f], points[(f + 1) % n]);
            if adjacent {
                // Adjacent edges share one vertex; they must not fold back
                // onto each other.
                let (shared, p, q) = if f == e + 1 { (b, a, d) } else { (a, b, c) };
                let dot = (p[0] - shared[0]) * (q[0] - shared[0]) + (p[1] - shared[1]) * (q[1] - shared[1]);
                if orient(p, shared, q) == 0.0 && dot > 0.0 {
                    return bad(format!("edges {e} and {f} overlap"));
                }
            } else if segments_intersect(a, b, c, d) {
                return bad(format!("edges {e} and {f} intersect"));
            }
        }
    }
    Ok(())
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(points: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = points.len();
    let mut inside = false;
    let mut k = n - 1;
    for m in 0..n {
        let (a, b) = (points[m], points[k]);
        if (a[0] > p[0]) != (b[0] > p[0]) {
            let col = a[1] + (p[0] - a[0]) * (b[1] - a[1]) / (b[0] - a[0]);
            if p[1] < col {
                inside = !inside;
            }
        }
        k = m;
    }
    inside
}

/// Pixels whose centre is inside the polygon.
pub fn rasterize_polygon(points: &[[f64; 2]], height: usize, width: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((height, width), false);
    let (lo_r, hi_r) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[0]), h.max(p[0])));
    let (lo_c, hi_c) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[1]), h.max(p[1])));
    let r0 = (lo_r - 0.5).ceil().max(0.0) as usize;
    let c0 = (lo_c - 0.5).ceil().max(0.0) as usize;
    let r1 = ((hi_r - 0.5).floor().max(-1.0) as isize + 1).min(height as isize).max(0) as usize;
    let c1 = ((hi_c - 0.5).floor().max(-1.0) as isize + 1).min(width as isize).max(0) as usize;
    for i in r0..r1 {
        for j in c0..c1 {
            out[[i, j]] = point_in_polygon(points, [i as f64 + 0.5, j as f64 + 0.5]);
        }
    }
    out
}

/// Applies `edits` in order on top of `initial`. Fails without partial
/// application on any malformed edit.
pub fn apply_edits(initial: &LabelMask, edits: &[Edit]) -> Result<LabelMask> {
    let (h, w) = initial.shape();
    for (k, e) in edits.iter().enumerate() {
        if e.class_id() >= initial.num_classes {
            return Err(Error::Geometry(format!(
                "edit {k}: class {} not below C = {}",
                e.class_id(),
                initial.num_classes
            )));
        }
        match e {
            Edit::Polygon { points, .. } => {
                validate_polygon(points, h, w).map_err(|err| Error::Geometry(format!("edit {k}: {err}")))?
            }
            Edit::Brush { runs, .. } => {
                for &[r, c, n] in runs {
                    if r >= h || n == 0 || c + n > w {
                        return Err(Error::Geometry(format!("edit {k}: run [{r}, {c}, {n}] outside the {h}x{w} frame")));
                    }
                }
            }
        }
    }
    let mut out = initial.clone();
    for e in edits {
        match e {
            Edit::Polygon { class_id, points } => {
                let m = rasterize_polygon(points, h, w);
                out.labels.zip_mut_with(&m, |l, &inside| {
                    if inside {
                        *l = *class_id;
                    }
                });
            }
            Edit::Brush { class_id, runs } => {
                for &[r, c, n] in runs {
                    out.labels.slice_mut(ndarray::s![r, c..c + n]).fill(*class_id);
                }
            }
        }
    }
    Ok(out)
}
