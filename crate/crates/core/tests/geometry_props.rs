use proptest::prelude::*;
use rcloc::geom::{
    azimuth_deg, backproject, exp_so3, pose_error, project, rotation_angle, rotation_from_gravity_compass,
    wrap_degrees, Intrinsics, Pose, PriorPosition, SensorPrior, Vec2, Vec3,
};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), vec3(50.0)).prop_map(|(w, t)| Pose::new(exp_so3(&w), t))
}

fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (100.0..2000.0f64, 0.5..2.0f64, 64u32..2000, 64u32..2000)
        .prop_map(|(f, aspect, w, h)| Intrinsics::new(f, f * aspect, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h))
}

proptest! {
    #[test]
    fn backprojection_inverts_projection(
        pose in pose(),
        k in intrinsics(),
        u in 0.0..1.0f64,
        v in 0.0..1.0f64,
        depth in 0.1..500.0f64,
    ) {
        let px = Vec2::new(u * (k.width - 1) as f64, v * (k.height - 1) as f64);
        let world = backproject(&px, depth, &pose, &k).unwrap();
        let back = project(&world, &pose, &k).unwrap();
        prop_assert!((back - px).norm() < 1e-9 * (1.0 + depth));
        prop_assert!((pose.transform(&world).z - depth).abs() < 1e-9 * (1.0 + depth));
    }

    #[test]
    fn inverse_composes_to_identity(a in pose(), b in pose(), p in vec3(100.0)) {
        let id = a.compose(&a.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!(id.translation.norm() < 1e-10);
        let ab = a.compose(&b);
        prop_assert!((ab.transform(&p) - a.transform(&b.transform(&p))).norm() < 1e-9);
        prop_assert!((a.inverse().transform(&a.transform(&p)) - p).norm() < 1e-9);
    }

    #[test]
    fn gravity_and_heading_recover_rotation(pose in pose()) {
        let forward = pose.forward();
        prop_assume!(forward.xy().norm() > 1e-3);
        let prior = SensorPrior {
            position: PriorPosition::Metric { x: 0.0, y: 0.0 },
            compass_heading: azimuth_deg(&forward),
            gravity_dir: pose.rotation * Vec3::new(0.0, 0.0, -1.0),
            altitude_m: None,
        };
        let r = rotation_from_gravity_compass(&prior).unwrap();
        prop_assert!(rotation_angle(&(r * pose.rotation.transpose())).to_degrees() < 1e-6);
    }

    #[test]
    fn pose_error_is_a_symmetric_metric(a in pose(), b in pose(), c in pose()) {
        let (ab, ba) = (pose_error(&a, &b), pose_error(&b, &a));
        prop_assert!((ab.translation - ba.translation).abs() < 1e-9);
        prop_assert!((ab.rotation_deg - ba.rotation_deg).abs() < 1e-7);
        prop_assert!((0.0..=180.0).contains(&ab.rotation_deg));
        let aa = pose_error(&a, &a);
        prop_assert!(aa.translation < 1e-9 && aa.rotation_deg < 1e-9);
        let ac = pose_error(&a, &c);
        let bc = pose_error(&b, &c);
        prop_assert!(ac.translation <= ab.translation + bc.translation + 1e-9);
        prop_assert!(ac.rotation_deg <= ab.rotation_deg + bc.rotation_deg + 1e-6);
    }

    #[test]
    fn wrapped_degrees_stay_in_range(d in -1e6..1e6f64) {
        let w = wrap_degrees(d);
        prop_assert!((0.0..360.0).contains(&w));
        let turns = (d - w) / 360.0;
        prop_assert!((turns - turns.round()).abs() < 1e-6);
    }
}
