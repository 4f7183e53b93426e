//! Levenberg-Marquardt pose refinement on reprojection error.

use nalgebra::{SMatrix, SVector};

use super::{Correspondence2D3D, SolveError};
use crate::geom::{exp_so3, orthonormalize, skew, Intrinsics, Pose, Vec2, Vec3};

pub const MAX_ITERATIONS: usize = 20;
pub const STEP_TOLERANCE: f64 = 1e-10;

pub type Jacobian = SMatrix<f64, 2, 6>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Applies the tangent increment `(omega, tau)`: `R' = exp(omega) R`, `t' = t + tau`.
pub fn retract(pose: &Pose, delta: &SVector<f64, 6>) -> Pose {
    let omega = Vec3::new(delta[0], delta[1], delta[2]);
    let tau = Vec3::new(delta[3], delta[4], delta[5]);
    Pose::new(
        orthonormalize(&(exp_so3(&omega) * pose.rotation)),
        pose.translation + tau,
    )
}

/// Pixel residual `project(point) - pixel`, `None` at or behind the camera.
pub fn residual(pose: &Pose, c: &Correspondence2D3D, k: &Intrinsics) -> Option<Vec2> {
    let cam = pose.transform(&c.point);
    (cam.z > 0.0).then(|| k.project_camera(&cam) - c.pixel)
}

/// Derivative of the projected pixel w.r.t. the tangent increment of [`retract`].
pub fn reprojection_jacobian(pose: &Pose, point: &Vec3, k: &Intrinsics) -> Jacobian {
    let rx = pose.rotation * point;
    let cam = rx + pose.translation;
    let iz = 1.0 / cam.z;
    let dproj = SMatrix::<f64, 2, 3>::new(
        k.fx * iz,
        0.0,
        -k.fx * cam.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * cam.y * iz * iz,
    );
    let mut j = Jacobian::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew(&rx)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    j
}

/// Sum of squared pixel residuals over the masked pairs, infinite if any is behind the camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence2D3D], k: &Intrinsics, mask: &[bool]) -> f64 {
    let mut cost = 0.0;
    for (c, _) in corrs.iter().zip(mask).filter(|(_, m)| **m) {
        match residual(pose, c, k) {
            Some(r) => cost += r.norm_squared(),
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Minimizes squared reprojection error over `mask`ed pairs; never increases the cost.
pub fn refine_pose(
    pose: &Pose,
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    mask: &[bool],
) -> Result<Refinement, SolveError> {
    let used = mask.iter().filter(|m| **m).count();
    if used < 4 {
        return Err(SolveError::InsufficientInliers(used));
    }
    let initial_cost = reprojection_cost(pose, corrs, k, mask);
    let mut current = *pose;
    let mut cost = initial_cost;
    let mut lambda = 1e-4;
    let mut iterations = 0;
    if cost.is_finite() {
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let mut h = SMatrix::<f64, 6, 6>::zeros();
            let mut g = SVector::<f64, 6>::zeros();
            for (c, _) in corrs.iter().zip(mask).filter(|(_, m)| **m) {
                let r = residual(&current, c, k).expect("finite cost implies positive depth");
                let j = reprojection_jacobian(&current, &c.point, k);
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
            if g.norm() == 0.0 {
                break;
            }
            let mut step_taken = None;
            while lambda < 1e12 {
                let mut damped = h;
                for i in 0..6 {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
                }
                let Some(delta) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
                    lambda *= 10.0;
                    continue;
                };
                let candidate = retract(&current, &delta);
                let c_new = reprojection_cost(&candidate, corrs, k, mask);
                if c_new < cost {
                    current = candidate;
                    cost = c_new;
                    lambda = (lambda * 0.1).max(1e-12);
                    step_taken = Some(delta.norm());
                    break;
                }
                lambda *= 10.0;
                if delta.norm() < STEP_TOLERANCE {
                    break;
                }
            }
            match step_taken {
                Some(norm) if norm >= STEP_TOLERANCE => {}
                _ => break,
            }
        }
    }
    Ok(Refinement {
        pose: current,
        initial_cost,
        final_cost: cost,
        iterations,
    })
}
