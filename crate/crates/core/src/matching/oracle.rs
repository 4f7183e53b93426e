//! Ground-truth correspondences with controlled noise and outliers.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{MatchError, MatchPair, MatchSet};
use crate::geom::{backproject, Vec2};
use crate::render::{nearest_pixel, RenderedView};

/// Relative depth tolerance of the occlusion test.
const OCCLUSION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMatches {
    pub matches: MatchSet,
    /// Parallel to `matches.pairs`; true where the render pixel was replaced.
    pub is_outlier: Vec<bool>,
}

impl OracleMatches {
    pub fn outlier_count(&self) -> usize {
        self.is_outlier.iter().filter(|&&o| o).count()
    }
}

/// Samples query pixels with geometry, transfers them into `rendered` through the
/// true query pose and depth, and perturbs the render side.
///
/// `n` query pixels are drawn and the visible ones kept, so views sharing less
/// of the query frustum yield fewer pairs. Gaussian noise of `noise_px` is added to
/// every render pixel, then `floor(outlier_frac * pairs)` of them are replaced by
/// uniform random pixels.
pub fn oracle_match(
    query_gt: &RenderedView,
    rendered: &RenderedView,
    noise_px: f64,
    outlier_frac: f64,
    n: usize,
    rng_seed: u64,
) -> Result<OracleMatches, MatchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("finite sigma");
    let qk = &query_gt.intrinsics;
    let rk = &rendered.intrinsics;
    let (rw, rh) = (rendered.width(), rendered.height());
    let finite: Vec<usize> = (0..query_gt.depth.len())
        .filter(|&i| query_gt.depth[i].is_finite())
        .collect();
    let mut pairs = Vec::with_capacity(n);
    for pick in sample(&mut rng, finite.len(), n.min(finite.len())) {
        let idx = finite[pick];
        let q = Vec2::new((idx % query_gt.width()) as f64, (idx / query_gt.width()) as f64);
        let Ok(world) = backproject(&q, query_gt.depth[idx], &query_gt.pose, qk) else {
            continue;
        };
        let cam = rendered.pose.transform(&world);
        if cam.z <= 0.0 {
            continue;
        }
        let r = rk.project_camera(&cam);
        let Some((x, y)) = nearest_pixel(&r, rw, rh) else {
            continue;
        };
        let d = rendered.depth_at(x, y);
        if !d.is_finite() || (cam.z - d).abs() > OCCLUSION_TOLERANCE * cam.z {
            continue;
        }
        let noisy = if noise_px > 0.0 {
            r + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            r
        };
        if !rk.contains(&noisy) {
            continue;
        }
        pairs.push(MatchPair {
            query: q,
            render: noisy,
            confidence: 1.0,
        });
    }
    if pairs.len() < 8 {
        return Err(MatchError::InsufficientOverlap(pairs.len()));
    }

    let m = pairs.len();
    let n_out = ((outlier_frac.clamp(0.0, 1.0) * m as f64) + 1e-9).floor() as usize;
    let mut is_outlier = vec![false; m];
    for i in sample(&mut rng, m, n_out.min(m)) {
        is_outlier[i] = true;
        pairs[i].render = Vec2::new(rng.gen_range(0.0..(rw - 1) as f64), rng.gen_range(0.0..(rh - 1) as f64));
    }
    Ok(OracleMatches {
        matches: MatchSet::new(String::new(), 0, pairs),
        is_outlier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, Intrinsics, Pose, Vec3};
    use crate::mesh::TriangleMesh;
    use crate::render::render;

    fn wall() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(-20.0, -20.0, 10.0),
                Vec3::new(20.0, -20.0, 12.0),
                Vec3::new(20.0, 20.0, 14.0),
                Vec3::new(-20.0, 20.0, 11.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn same_view_is_identity() {
        let k = Intrinsics::centered(100.0, 120, 90);
        let v = render(&wall(), &Pose::identity(), &k);
        let m = oracle_match(&v, &v, 0.0, 0.0, 100, 5).unwrap();
        assert_eq!(m.matches.len(), 100);
        assert_eq!(m.outlier_count(), 0);
        for p in &m.matches.pairs {
            assert!((p.query - p.render).norm() < 1e-9);
        }
    }

    #[test]
    fn exact_outlier_count_and_inlier_noise() {
        let k = Intrinsics::centered(100.0, 120, 90);
        let gt = Pose::identity();
        let other = Pose::from_center(nalgebra::Matrix3::identity(), Vec3::new(0.5, 0.2, -2.0));
        let q = render(&wall(), &gt, &k);
        let r = render(&wall(), &other, &k);
        let sigma = 0.7;
        let m = oracle_match(&q, &r, sigma, 0.3, 100, 6).unwrap();
        assert_eq!(m.matches.len(), 100);
        assert_eq!(m.outlier_count(), 30);
        let mut within = 0;
        for (p, out) in m.matches.pairs.iter().zip(&m.is_outlier) {
            if *out {
                continue;
            }
            let world = backproject(&p.query, q.depth_nearest(&p.query).unwrap(), &gt, &k).unwrap();
            let truth = project(&world, &other, &k).unwrap();
            if (truth - p.render).norm() <= 3.0 * sigma * 1.25 {
                within += 1;
            }
        }
        assert!(within >= 68, "{within}");
        m.matches.validate(&k, &k).unwrap();
    }

    #[test]
    fn disjoint_frusta_fail() {
        let k = Intrinsics::centered(100.0, 120, 90);
        let q = render(&wall(), &Pose::identity(), &k);
        let away = Pose::from_center(
            nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
            Vec3::zeros(),
        );
        let r = render(&wall(), &away, &k);
        assert!(matches!(
            oracle_match(&q, &r, 0.0, 0.0, 50, 1),
            Err(MatchError::InsufficientOverlap(0))
        ));
    }
}
