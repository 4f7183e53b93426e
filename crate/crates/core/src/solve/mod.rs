//! Camera pose from 2D-3D correspondences.

mod p3p;
mod ransac;
mod refine;

pub use p3p::{absolute_orientation, p3p, quartic_roots, COLLINEAR_AREA};
pub use ransac::{ransac_pnp, RansacConfig, RansacResult};
pub use refine::{
    refine_pose, reprojection_cost, reprojection_jacobian, residual, retract, Jacobian, Refinement, MAX_ITERATIONS,
    STEP_TOLERANCE,
};

use thiserror::Error;

use crate::geom::{backproject, Vec2, Vec3};
use crate::matching::MatchSet;
use crate::render::{nearest_pixel, RenderedView};

/// Depth jump (m) between 8-neighbours beyond which a pixel is treated as a silhouette.
pub const EDGE_DISCONTINUITY: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("world points are collinear")]
    CollinearPoints,
    #[error("no real solution")]
    NoRealSolution,
    #[error("{0} inliers, refinement needs 4")]
    InsufficientInliers(usize),
    #[error("{0} correspondences, need at least 4")]
    TooFewCorrespondences(usize),
    #[error("no model found (best had {best_inliers} inliers)")]
    NoModelFound { best_inliers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    /// Query pixel.
    pub pixel: Vec2,
    /// World point.
    pub point: Vec3,
}

/// Depth at a render pixel, interpolated in inverse depth from the four
/// surrounding samples, or `None` near silhouettes and empty pixels.
///
/// Inverse depth is affine in pixel coordinates over a planar facet, so the
/// interpolation is exact away from edges.
pub fn lifted_depth(view: &RenderedView, px: &Vec2) -> Option<f64> {
    let (w, h) = (view.width(), view.height());
    let (cx, cy) = nearest_pixel(px, w, h)?;
    let centre = view.depth_at(cx, cy);
    if !centre.is_finite() {
        return None;
    }
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let d = view.depth_at(x as usize, y as usize);
            if !d.is_finite() || (d - centre).abs() > EDGE_DISCONTINUITY {
                return None;
            }
        }
    }
    let x0 = px.x.floor().clamp(0.0, (w - 1) as f64);
    let y0 = px.y.floor().clamp(0.0, (h - 1) as f64);
    let (fx, fy) = ((px.x - x0).clamp(0.0, 1.0), (px.y - y0).clamp(0.0, 1.0));
    let (xi, yi) = (x0 as usize, y0 as usize);
    let (xj, yj) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
    let inv = |x: usize, y: usize| 1.0 / view.depth_at(x, y);
    let top = inv(xi, yi) * (1.0 - fx) + inv(xj, yi) * fx;
    let bottom = inv(xi, yj) * (1.0 - fx) + inv(xj, yj) * fx;
    let v = top * (1.0 - fy) + bottom * fy;
    (v > 0.0 && v.is_finite()).then(|| 1.0 / v)
}

/// Turns 2D-2D matches against `rendered` into 2D-3D correspondences for the query.
pub fn lift_matches(matches: &MatchSet, rendered: &RenderedView) -> Vec<Correspondence2D3D> {
    matches
        .pairs
        .iter()
        .filter_map(|p| {
            let depth = lifted_depth(rendered, &p.render)?;
            let point = backproject(&p.render, depth, &rendered.pose, &rendered.intrinsics).ok()?;
            Some(Correspondence2D3D { pixel: p.query, point })
        })
        .collect()
}
