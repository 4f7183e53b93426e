//! Locally optimized RANSAC around the P3P solver.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{p3p, refine_pose, residual, Correspondence2D3D, SolveError};
use crate::geom::{Intrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub lo_refit_rounds: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 5.0,
            max_iterations: 2000,
            confidence: 0.9999,
            lo_refit_rounds: 3,
            min_inliers: 12,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.inlier_threshold_px > 0.0) {
            return Err(format!(
                "inlier_threshold_px must be > 0, got {}",
                self.inlier_threshold_px
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(format!("confidence must be in (0, 1), got {}", self.confidence));
        }
        if self.min_inliers < 4 {
            return Err(format!("min_inliers must be >= 4, got {}", self.min_inliers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub iterations_used: usize,
}

fn inlier_mask(pose: &Pose, corrs: &[Correspondence2D3D], k: &Intrinsics, threshold: f64) -> (Vec<bool>, usize) {
    let t2 = threshold * threshold;
    let mask: Vec<bool> = corrs
        .iter()
        .map(|c| residual(pose, c, k).is_some_and(|r| r.norm_squared() < t2))
        .collect();
    let count = mask.iter().filter(|m| **m).count();
    (mask, count)
}

/// Refines on the inliers of a widening-to-final threshold schedule.
fn local_optimization(
    pose: &Pose,
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Option<(Pose, Vec<bool>, usize)> {
    let rounds = cfg.lo_refit_rounds;
    let mut current = *pose;
    let mut best: Option<(Pose, Vec<bool>, usize)> = None;
    for round in 0..rounds {
        let scale = if rounds > 1 {
            2.0 - round as f64 / (rounds - 1) as f64
        } else {
            1.0
        };
        let (mask, _) = inlier_mask(&current, corrs, k, cfg.inlier_threshold_px * scale);
        let Ok(refined) = refine_pose(&current, corrs, k, &mask) else {
            break;
        };
        current = refined.pose;
        let (final_mask, count) = inlier_mask(&current, corrs, k, cfg.inlier_threshold_px);
        if best.as_ref().is_none_or(|b| count >= b.2) {
            best = Some((current, final_mask, count));
        }
    }
    best
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let good = inlier_ratio.powi(3);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust pose from 2D-3D correspondences.
///
/// The returned inlier count is the largest seen across hypotheses, local
/// optimizations and the final refinement.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<RansacResult, SolveError> {
    let n = corrs.len();
    if n < 4 {
        return Err(SolveError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(Pose, Vec<bool>, usize)> = None;
    let mut budget = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = sample(&mut rng, n, 3);
        let triple = [corrs[idx.index(0)], corrs[idx.index(1)], corrs[idx.index(2)]];
        let Ok(hypotheses) = p3p(&triple, k) else { continue };
        for pose in hypotheses {
            let (mask, count) = inlier_mask(&pose, corrs, k, cfg.inlier_threshold_px);
            if best.as_ref().is_some_and(|b| count <= b.2) {
                continue;
            }
            best = Some((pose, mask, count));
            // Refit only hypotheses with enough support to constrain six parameters.
            if count >= 4 {
                if let Some(lo) = local_optimization(&pose, corrs, k, cfg) {
                    if lo.2 >= count {
                        best = Some(lo);
                    }
                }
            }
            let ratio = best.as_ref().map_or(0.0, |b| b.2 as f64 / n as f64);
            budget = budget.min(required_iterations(ratio, cfg.confidence));
        }
    }
    let Some((mut pose, mut mask, mut count)) = best else {
        return Err(SolveError::NoModelFound { best_inliers: 0 });
    };
    if count < cfg.min_inliers {
        return Err(SolveError::NoModelFound { best_inliers: count });
    }
    if let Ok(refined) = refine_pose(&pose, corrs, k, &mask) {
        let (m, c) = inlier_mask(&refined.pose, corrs, k, cfg.inlier_threshold_px);
        if c >= count {
            pose = refined.pose;
            mask = m;
            count = c;
        }
    }
    Ok(RansacResult {
        pose,
        inlier_mask: mask,
        inlier_count: count,
        iterations_used: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_so3, pose_error, Vec2, Vec3};
    use rand::Rng;

    fn scene(seed: u64, n: usize) -> (Pose, Vec<Correspondence2D3D>, Intrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::centered(500.0, 640, 480);
        let gt = Pose::new(exp_so3(&Vec3::new(0.2, -0.4, 0.1)), Vec3::new(0.5, -1.0, 2.0));
        let inv = gt.inverse();
        let corrs = (0..n)
            .map(|_| {
                let px = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
                Correspondence2D3D {
                    pixel: px,
                    point: inv.transform(&(k.ray(&px) * rng.gen_range(4.0..50.0))),
                }
            })
            .collect();
        (gt, corrs, k)
    }

    #[test]
    fn too_few_correspondences() {
        let (_, corrs, k) = scene(1, 3);
        assert!(matches!(
            ransac_pnp(&corrs, &k, &RansacConfig::default()),
            Err(SolveError::TooFewCorrespondences(3))
        ));
    }

    #[test]
    fn noise_free_input_is_exact() {
        let (gt, corrs, k) = scene(2, 6);
        let cfg = RansacConfig {
            min_inliers: 6,
            ..Default::default()
        };
        let out = ransac_pnp(&corrs, &k, &cfg).unwrap();
        let e = pose_error(&out.pose, &gt);
        assert!(e.rotation_deg < 1e-6 && e.translation < 1e-8, "{e:?}");
        assert_eq!(out.inlier_count, 6);
    }

    #[test]
    fn random_pixels_find_no_model() {
        let (_, mut corrs, k) = scene(3, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in &mut corrs {
            c.pixel = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
        }
        let cfg = RansacConfig {
            max_iterations: 300,
            ..Default::default()
        };
        assert!(matches!(
            ransac_pnp(&corrs, &k, &cfg),
            Err(SolveError::NoModelFound { .. })
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let (_, mut corrs, k) = scene(5, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for c in corrs.iter_mut().take(40) {
            c.pixel = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
        }
        let cfg = RansacConfig::default();
        assert_eq!(
            ransac_pnp(&corrs, &k, &cfg).unwrap(),
            ransac_pnp(&corrs, &k, &cfg).unwrap()
        );
    }
}
