//! Three-point resection: Grunert's quartic plus Horn's absolute orientation.

use nalgebra::{DMatrix, Matrix3, Matrix4, Quaternion, Schur, SymmetricEigen, UnitQuaternion};

use super::{Correspondence2D3D, SolveError};
use crate::geom::{Intrinsics, Pose, Vec3};

pub const COLLINEAR_AREA: f64 = 1e-9;

/// Real roots of the polynomial with coefficients `c` (highest degree first).
///
/// Companion-matrix eigenvalues with two Newton polish steps each. Leading
/// coefficients that vanish relative to the rest lower the degree.
pub fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let first = c.iter().position(|v| v.abs() > 1e-14 * scale);
    match first {
        Some(i) if i < 4 => real_roots(&c[i..]),
        _ => Vec::new(),
    }
}

fn real_roots(c: &[f64]) -> Vec<f64> {
    // The unshifted companion of e.g. x^4 + 1 can stall the QR iteration; a
    // rescaled variable x = s y changes the matrix and usually converges.
    for s in [1.0, 1.618_033_988_749_895, 0.577_215_664_901_532_9] {
        let n = c.len() - 1;
        let scaled: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, ci)| ci * f64::powi(s, (n - i) as i32))
            .collect();
        let lead = scaled[0];
        let companion = DMatrix::from_fn(n, n, |r, col| {
            if col == n - 1 {
                -scaled[n - r] / lead
            } else if r == col + 1 {
                1.0
            } else {
                0.0
            }
        });
        let Some(schur) = Schur::try_new(companion, f64::EPSILON, 200) else {
            continue;
        };
        return schur
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
            .map(|z| newton_polish(c, z.re * s, 2))
            .collect();
    }
    Vec::new()
}

fn newton_polish(c: &[f64], mut x: f64, steps: usize) -> f64 {
    for _ in 0..steps {
        let (mut p, mut dp) = (0.0, 0.0);
        for &ci in c {
            dp = dp * x + p;
            p = p * x + ci;
        }
        if dp.abs() < f64::MIN_POSITIVE {
            break;
        }
        let next = x - p / dp;
        if !next.is_finite() {
            break;
        }
        x = next;
    }
    x
}

/// Rotation and translation with `cam = R world + t` from three or more pairs (Horn 1987).
pub fn absolute_orientation(world: &[Vec3], cam: &[Vec3]) -> Pose {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vec3>() / n;
    let cc = cam.iter().sum::<Vec3>() / n;
    let mut m = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        m += (w - cw) * (c - cc).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,       -sxx + syy - szz,  syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,       -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    let r = rot.to_rotation_matrix().into_inner();
    Pose::new(r, cc - r * cw)
}

/// Newton iterations on the three law-of-cosines equations for the ray distances.
fn polish_distances(s: &mut [f64; 3], cos: [f64; 3], sq: [f64; 3]) {
    // Pairs (i, j) with cosine index and squared side.
    const PAIRS: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..3 {
        let mut jac = Matrix3::zeros();
        let mut f = Vec3::zeros();
        for (row, &(i, j)) in PAIRS.iter().enumerate() {
            f[row] = s[i] * s[i] + s[j] * s[j] - 2.0 * s[i] * s[j] * cos[row] - sq[row];
            jac[(row, i)] = 2.0 * s[i] - 2.0 * s[j] * cos[row];
            jac[(row, j)] = 2.0 * s[j] - 2.0 * s[i] * cos[row];
        }
        let Some(step) = jac.lu().solve(&f) else { return };
        let next = [s[0] - step[0], s[1] - step[1], s[2] - step[2]];
        if next.iter().any(|v| !v.is_finite()) {
            return;
        }
        *s = next;
    }
}

/// All poses (at most four) consistent with three 2D-3D correspondences.
pub fn p3p(corrs: &[Correspondence2D3D; 3], k: &Intrinsics) -> Result<Vec<Pose>, SolveError> {
    let p = [corrs[0].point, corrs[1].point, corrs[2].point];
    if (p[1] - p[0]).cross(&(p[2] - p[0])).norm() * 0.5 <= COLLINEAR_AREA {
        return Err(SolveError::CollinearPoints);
    }
    let f = [0, 1, 2].map(|i| k.ray(&corrs[i].pixel).normalize());
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);
    let a2 = (p[1] - p[2]).norm_squared();
    let b2 = (p[0] - p[2]).norm_squared();
    let c2 = (p[0] - p[1]).norm_squared();

    // Grunert's quartic in v = s3 / s1, coefficients as tabulated by Haralick et al.
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (cos_a * cos_a, cos_b * cos_b, cos_g * cos_g);
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2;
    let a3 = 4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g + 2.0 * c2 / b2 * ca2 * cos_b);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2 - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cg2);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cg2 * cos_b - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2;

    let mut poses: Vec<Pose> = Vec::with_capacity(4);
    for v in quartic_roots([a4, a3, a2c, a1, a0]) {
        let denom_s1 = 1.0 + v * v - 2.0 * v * cos_b;
        if v <= 0.0 || denom_s1 <= 0.0 {
            continue;
        }
        let s1 = (b2 / denom_s1).sqrt();
        let s3 = v * s1;
        // s2 from the difference of the a- and c-equations, or their quadratic when that is singular.
        let mut s2_candidates = Vec::with_capacity(2);
        let den = 2.0 * (s3 * cos_a - s1 * cos_g);
        if den.abs() > 1e-10 * s1.max(s3) {
            s2_candidates.push((s3 * s3 - s1 * s1 - a2 + c2) / den);
        } else {
            let disc = s1 * s1 * cg2 - (s1 * s1 - c2);
            if disc >= 0.0 {
                s2_candidates.push(s1 * cos_g + disc.sqrt());
                s2_candidates.push(s1 * cos_g - disc.sqrt());
            }
        }
        for s2 in s2_candidates {
            if !(s2 > 0.0) {
                continue;
            }
            let mut s = [s1, s2, s3];
            polish_distances(&mut s, [cos_a, cos_b, cos_g], [a2, b2, c2]);
            if s.iter().any(|v| !(*v > 0.0)) {
                continue;
            }
            let cam = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
            let side_err = [(1, 2, a2), (0, 2, b2), (0, 1, c2)]
                .iter()
                .map(|&(i, j, sq)| ((cam[i] - cam[j]).norm_squared() - sq).abs() / sq)
                .fold(0.0, f64::max);
            if side_err > 1e-6 {
                continue;
            }
            let pose = absolute_orientation(&p, &cam);
            if p.iter().any(|x| pose.transform(x).z <= 0.0) {
                continue;
            }
            let duplicate = poses.iter().any(|q| {
                (q.rotation - pose.rotation).norm() < 1e-9
                    && (q.translation - pose.translation).norm() < 1e-9 * (1.0 + pose.translation.norm())
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    if poses.is_empty() {
        return Err(SolveError::NoRealSolution);
    }
    poses.truncate(4);
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_so3, pose_error, project, Vec2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quartic_with_known_roots() {
        // (x-1)(x-2)(x+3)(x-0.5)
        let c = [1.0, -0.5, -7.0, 9.5, -3.0];
        let mut r = quartic_roots(c);
        r.sort_by(f64::total_cmp);
        let expect = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(quartic_roots([1.0, 0.0, 0.0, 0.0, 1.0]).is_empty());
    }

    #[test]
    fn horn_recovers_rigid_motion() {
        let r = exp_so3(&Vec3::new(0.3, -0.2, 1.1));
        let t = Vec3::new(1.0, -2.0, 3.0);
        let w = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 1.0),
        ];
        let c: Vec<Vec3> = w.iter().map(|p| r * p + t).collect();
        let pose = absolute_orientation(&w, &c);
        assert!((pose.rotation - r).norm() < 1e-12);
        assert!((pose.translation - t).norm() < 1e-12);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let k = Intrinsics::centered(500.0, 640, 480);
        let c = [0.0, 1.0, 2.0].map(|x| Correspondence2D3D {
            pixel: Vec2::new(320.0 + x, 240.0),
            point: Vec3::new(x, 0.0, 5.0),
        });
        assert!(matches!(p3p(&c, &k), Err(SolveError::CollinearPoints)));
    }

    #[test]
    fn recovers_forward_projected_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Intrinsics::centered(500.0, 640, 480);
        let mut done = 0;
        while done < 200 {
            let gt = Pose::new(
                exp_so3(&Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )),
                Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
            );
            let inv = gt.inverse();
            let mut corrs = Vec::new();
            while corrs.len() < 3 {
                let px = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
                let depth = rng.gen_range(2.0..30.0);
                let cam = k.ray(&px) * depth;
                corrs.push(Correspondence2D3D {
                    pixel: px,
                    point: inv.transform(&cam),
                });
            }
            let corrs = [corrs[0], corrs[1], corrs[2]];
            let sols = p3p(&corrs, &k).unwrap();
            assert!(sols.len() <= 4);
            let best = sols
                .iter()
                .map(|s| pose_error(s, &gt))
                .min_by(|a, b| a.rotation_deg.total_cmp(&b.rotation_deg))
                .unwrap();
            assert!(best.rotation_deg < 1e-6 && best.translation < 1e-8, "{best:?}");
            for s in &sols {
                for c in &corrs {
                    assert!((project(&c.point, s, &k).unwrap() - c.pixel).norm() < 1e-6);
                }
            }
            done += 1;
        }
    }
}
