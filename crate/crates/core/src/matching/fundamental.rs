//! Fundamental-matrix RANSAC pruning of 2D-2D matches.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MatchSet;
use crate::geom::Vec2;

/// Below this best-model inlier ratio the input is treated as degenerate and passed through.
pub const DEGENERATE_INLIER_RATIO: f64 = 0.25;
const MIN_SAMPLE: usize = 8;
const STOP_CONFIDENCE: f64 = 0.999;
/// Samples whose second-smallest singular value falls below this fraction of the
/// largest have a multi-dimensional solution family (e.g. pure rotation) and fit nothing.
const DEGENERATE_SINGULAR_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMatches {
    pub matches: MatchSet,
    /// Indices into the input of the retained pairs.
    pub kept: Vec<usize>,
    /// Set when the input was returned unchanged by the degeneracy guard.
    pub degenerate: bool,
    /// Maps query pixels to epipolar lines in the render image.
    pub fundamental: Option<Matrix3<f64>>,
}

/// Similarity taking the points to zero mean and mean distance sqrt(2).
fn hartley_transform(pts: &[Vec2]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 {
        std::f64::consts::SQRT_2 / spread
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point fit of `F` with `r^T F q = 0` over all given pairs.
///
/// Returns `None` when the pairs do not determine a unique `F`.
pub fn eight_point(q: &[Vec2], r: &[Vec2]) -> Option<Matrix3<f64>> {
    if q.len() < MIN_SAMPLE || q.len() != r.len() {
        return None;
    }
    let (tq, tr) = (hartley_transform(q), hartley_transform(r));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in q.iter().zip(r) {
        let x = tq * Vector3::new(a.x, a.y, 1.0);
        let y = tr * Vector3::new(b.x, b.y, 1.0);
        let row = SMatrix::<f64, 1, 9>::from_row_slice(&[
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ]);
        ata += row.transpose() * row;
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[8]].max(0.0);
    let second = eig.eigenvalues[order[1]].max(0.0);
    if largest <= 0.0 || (second / largest).sqrt() < DEGENERATE_SINGULAR_RATIO {
        return None;
    }
    let f = eig.eigenvectors.column(order[0]);
    let fn_ = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = fn_.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    // Singular values come sorted in decreasing order.
    s[2] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * vt;
    let f = tr.transpose() * rank2 * tq;
    let norm = f.norm();
    (norm > 0.0 && norm.is_finite()).then(|| f / norm)
}

/// First-order geometric distance (px) of a pair to the epipolar constraint.
pub fn sampson_distance(f: &Matrix3<f64>, q: &Vec2, r: &Vec2) -> f64 {
    let x = Vector3::new(q.x, q.y, 1.0);
    let y = Vector3::new(r.x, r.y, 1.0);
    let fx = f * x;
    let ftx = f.transpose() * y;
    let num = y.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

fn inliers_of(f: &Matrix3<f64>, q: &[Vec2], r: &[Vec2], threshold: f64) -> Vec<usize> {
    (0..q.len())
        .filter(|&i| sampson_distance(f, &q[i], &r[i]) < threshold)
        .collect()
}

fn passthrough(matches: &MatchSet) -> FilteredMatches {
    FilteredMatches {
        matches: matches.clone(),
        kept: (0..matches.len()).collect(),
        degenerate: true,
        fundamental: None,
    }
}

/// RANSAC over eight-point fits, keeping pairs with Sampson distance below
/// `threshold_px`. Small or degenerate inputs are returned unchanged and flagged.
pub fn filter_fundamental(matches: &MatchSet, cfg: &FilterConfig, rng_seed: u64) -> FilteredMatches {
    let n = matches.len();
    if n < MIN_SAMPLE {
        return passthrough(matches);
    }
    let q: Vec<Vec2> = matches.pairs.iter().map(|p| p.query).collect();
    let r: Vec<Vec2> = matches.pairs.iter().map(|p| p.render).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut best: Option<(Matrix3<f64>, Vec<usize>)> = None;
    let mut budget = cfg.max_iters;
    let mut iter = 0;
    let (mut sq, mut sr) = (Vec::with_capacity(MIN_SAMPLE), Vec::with_capacity(MIN_SAMPLE));
    while iter < budget {
        iter += 1;
        sq.clear();
        sr.clear();
        for i in sample(&mut rng, n, MIN_SAMPLE) {
            sq.push(q[i]);
            sr.push(r[i]);
        }
        let Some(f) = eight_point(&sq, &sr) else { continue };
        let inl = inliers_of(&f, &q, &r, cfg.threshold_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            let miss = 1.0 - w.powi(MIN_SAMPLE as i32);
            if miss <= 0.0 {
                budget = iter;
            } else if miss < 1.0 {
                let needed = ((1.0 - STOP_CONFIDENCE).ln() / miss.ln()).ceil();
                budget = budget.min(needed.max(1.0) as usize);
            }
            best = Some((f, inl));
        }
    }

    let Some((mut f, mut kept)) = best else {
        return passthrough(matches);
    };
    if let Some(refit) = eight_point(
        &kept.iter().map(|&i| q[i]).collect::<Vec<_>>(),
        &kept.iter().map(|&i| r[i]).collect::<Vec<_>>(),
    ) {
        let inl = inliers_of(&refit, &q, &r, cfg.threshold_px);
        if inl.len() >= kept.len() {
            f = refit;
            kept = inl;
        }
    }
    if (kept.len() as f64) < DEGENERATE_INLIER_RATIO * n as f64 {
        return passthrough(matches);
    }
    FilteredMatches {
        matches: matches.subset(&kept),
        kept,
        degenerate: false,
        fundamental: Some(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, rot_z, Intrinsics, Pose, Vec3};
    use crate::matching::MatchPair;
    use rand::Rng;

    fn scene_pairs(baseline: f64, n: usize, seed: u64) -> MatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::centered(300.0, 640, 480);
        let a = Pose::identity();
        let b = Pose::from_center(rot_z(0.1), Vec3::new(baseline, 0.1 * baseline, 0.0));
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let p = Vec3::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(6.0..30.0),
            );
            if let (Ok(u), Ok(v)) = (project(&p, &a, &k), project(&p, &b, &k)) {
                if k.contains(&u) && k.contains(&v) {
                    pairs.push(MatchPair {
                        query: u,
                        render: v,
                        confidence: 1.0,
                    });
                }
            }
        }
        MatchSet::new("q", 0, pairs)
    }

    #[test]
    fn exact_pairs_satisfy_the_fit() {
        let m = scene_pairs(1.0, 40, 1);
        let q: Vec<Vec2> = m.pairs.iter().map(|p| p.query).collect();
        let r: Vec<Vec2> = m.pairs.iter().map(|p| p.render).collect();
        let f = eight_point(&q, &r).unwrap();
        assert!(f.determinant().abs() < 1e-9);
        for (a, b) in q.iter().zip(&r) {
            assert!(sampson_distance(&f, a, b) < 1e-6);
        }
    }

    #[test]
    fn seven_pairs_pass_through() {
        let m = scene_pairs(1.0, 7, 2);
        let out = filter_fundamental(&m, &FilterConfig::default(), 0);
        assert!(out.degenerate);
        assert_eq!(out.matches, m);
    }

    #[test]
    fn pure_rotation_triggers_guard() {
        let m = scene_pairs(0.0, 60, 3);
        let out = filter_fundamental(&m, &FilterConfig::default(), 0);
        assert!(out.degenerate);
        assert_eq!(out.matches.len(), 60);
    }

    #[test]
    fn pruning_is_deterministic_subset() {
        let mut m = scene_pairs(1.5, 80, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in m.pairs.iter_mut().take(25) {
            p.render = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
        }
        let a = filter_fundamental(&m, &FilterConfig::default(), 11);
        let b = filter_fundamental(&m, &FilterConfig::default(), 11);
        assert_eq!(a, b);
        assert!(!a.degenerate);
        assert!(a.kept.windows(2).all(|w| w[0] < w[1]));
        assert!(a.kept.iter().filter(|&&i| i >= 25).count() >= 54);
        assert!(a.kept.iter().filter(|&&i| i < 25).count() <= 3);
    }
}
