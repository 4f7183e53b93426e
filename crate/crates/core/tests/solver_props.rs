use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcloc::geom::{exp_so3, pose_error, project, Intrinsics, Pose, Vec2, Vec3};
use rcloc::solve::{p3p, ransac_pnp, refine_pose, reprojection_cost, Correspondence2D3D, RansacConfig};

fn k() -> Intrinsics {
    Intrinsics::centered(500.0, 640, 480)
}

/// Random pose with `n` points in front of it, projected exactly.
fn scene(seed: u64, n: usize) -> (Pose, Vec<Correspondence2D3D>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k();
    let gt = Pose::new(
        exp_so3(&Vec3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        )),
        Vec3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ),
    );
    let inv = gt.inverse();
    let corrs = (0..n)
        .map(|_| {
            let px = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
            Correspondence2D3D {
                pixel: px,
                point: inv.transform(&(k.ray(&px) * rng.gen_range(3.0..50.0))),
            }
        })
        .collect();
    (gt, corrs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn p3p_solutions_reproject_their_points(seed in any::<u64>()) {
        let (_, corrs) = scene(seed, 3);
        let sample = [corrs[0], corrs[1], corrs[2]];
        if let Ok(sols) = p3p(&sample, &k()) {
            prop_assert!(sols.len() <= 4);
            for s in &sols {
                prop_assert!(s.validate(1e-9).is_ok());
                for c in &sample {
                    prop_assert!((project(&c.point, s, &k()).unwrap() - c.pixel).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn refinement_never_increases_cost(seed in any::<u64>(), scale in 0.0..0.05f64) {
        let (gt, mut corrs) = scene(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for c in &mut corrs {
            c.pixel += Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let start = Pose::new(
            exp_so3(&(Vec3::new(rng.gen(), rng.gen(), rng.gen()) * scale)) * gt.rotation,
            gt.translation + Vec3::new(rng.gen(), rng.gen(), rng.gen()) * scale * 10.0,
        );
        let mask = vec![true; corrs.len()];
        let r = refine_pose(&start, &corrs, &k(), &mask).unwrap();
        prop_assert!(r.final_cost <= r.initial_cost);
        prop_assert!((reprojection_cost(&r.pose, &corrs, &k(), &mask) - r.final_cost).abs() <= 1e-9 * (1.0 + r.final_cost));
    }

    #[test]
    fn noise_free_ransac_is_exact(seed in any::<u64>(), n in 6usize..40) {
        let (gt, corrs) = scene(seed, n);
        let cfg = RansacConfig { min_inliers: 6, ..Default::default() };
        let out = ransac_pnp(&corrs, &k(), &cfg).unwrap();
        let e = pose_error(&out.pose, &gt);
        prop_assert!(e.rotation_deg < 1e-6 && e.translation < 1e-8, "{:?}", e);
        prop_assert_eq!(out.inlier_count, n);
        prop_assert!(out.inlier_mask.iter().all(|&m| m));
    }
}

#[test]
fn ransac_is_deterministic_and_reports_its_mask() {
    for seed in 0..10 {
        let (_, mut corrs) = scene(100 + seed, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in corrs.iter_mut().take(50) {
            c.pixel = Vec2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
        }
        let cfg = RansacConfig {
            rng_seed: seed,
            ..Default::default()
        };
        let a = ransac_pnp(&corrs, &k(), &cfg).unwrap();
        let b = ransac_pnp(&corrs, &k(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inlier_mask.iter().filter(|&&m| m).count(), a.inlier_count);
        assert!(a.inlier_count >= 70, "{}", a.inlier_count);
    }
}
