//! Synthetic benchmarks, recall metrics and ablation drivers.

mod ablation;
mod fixture;

pub use ablation::{run_ablation, AblationCell, AblationReport, CellReport, SeedMode, TrendCheck};
pub use fixture::{fixture_city, CityParams};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{pose_error, wrap_degrees, Intrinsics, Mat3, Pose, PoseError, PriorPosition, SensorPrior, Vec3};
use crate::imaging::GrayImage;
use crate::mesh::{floor_height, raycast};
use crate::pipeline::{derive_seed, LocalizationResult, Query, Scene};
use crate::render::render;

/// Consecutive rejected draws before a scene is declared too small.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("pose sampler rejected {0} consecutive draws")]
    SceneTooSmall(usize),
    #[error("no ground-truth pose for query {0}")]
    MissingGroundTruth(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid benchmark settings: {0}")]
    Invalid(String),
}

/// Joint (metres, degrees) acceptance levels, tightest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Thresholds(Vec<(f64, f64)>);

impl Thresholds {
    pub fn new(levels: Vec<(f64, f64)>) -> Result<Self, BenchError> {
        if levels.is_empty() {
            return Err(BenchError::InvalidThresholds("no levels".into()));
        }
        if levels
            .iter()
            .any(|(t, r)| !(*t > 0.0 && *r > 0.0 && t.is_finite() && r.is_finite()))
        {
            return Err(BenchError::InvalidThresholds(
                "levels must be positive and finite".into(),
            ));
        }
        for w in levels.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(BenchError::InvalidThresholds(format!(
                    "{:?} does not strictly exceed {:?}",
                    w[1], w[0]
                )));
            }
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label(&self, i: usize) -> String {
        let (t, r) = self.0[i];
        format!("{}m_{}deg", t, r)
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self(vec![(0.25, 2.0), (0.5, 5.0), (1.0, 10.0)])
    }
}

impl TryFrom<Vec<(f64, f64)>> for Thresholds {
    type Error = BenchError;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self, BenchError> {
        Self::new(v)
    }
}

impl From<Thresholds> for Vec<(f64, f64)> {
    fn from(t: Thresholds) -> Self {
        t.0
    }
}

/// Recall per threshold over `errors`; `None` marks a failed query.
pub fn recall_of_errors(errors: &[Option<PoseError>], thresholds: &Thresholds) -> Vec<f64> {
    let n = errors.len();
    thresholds
        .levels()
        .iter()
        .map(|&(t, r)| {
            if n == 0 {
                return 0.0;
            }
            let hits = errors
                .iter()
                .filter(|e| e.is_some_and(|e| e.translation <= t && e.rotation_deg <= r))
                .count();
            hits as f64 / n as f64
        })
        .collect()
}

/// Error of a result against its ground truth, or `None` when no pose was solved.
pub fn result_error(result: &LocalizationResult, gt: &Pose) -> Option<PoseError> {
    (!result.trace.is_empty()).then(|| pose_error(&result.final_pose, gt))
}

/// Fraction of queries localized within each threshold. Queries that never
/// produced a pose count as misses.
pub fn recall(
    results: &[LocalizationResult],
    ground_truth: &HashMap<String, Pose>,
    thresholds: &Thresholds,
) -> Result<Vec<f64>, BenchError> {
    let errors = results
        .iter()
        .map(|r| {
            ground_truth
                .get(&r.query_id)
                .map(|gt| result_error(r, gt))
                .ok_or_else(|| BenchError::MissingGroundTruth(r.query_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(recall_of_errors(&errors, thresholds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoseSampler {
    /// Street-level camera 1.5 m above the floor, pitch in [-10, 20] degrees.
    Ground,
    /// Camera 15 to 40 m above the floor, pitch in [-60, -20] degrees.
    Aerial,
}

impl PoseSampler {
    fn pitch_range(&self) -> (f64, f64) {
        match self {
            Self::Ground => (-10.0, 20.0),
            Self::Aerial => (-60.0, -20.0),
        }
    }

    fn height_range(&self) -> (f64, f64) {
        match self {
            Self::Ground => (1.5, 1.5),
            Self::Aerial => (15.0, 40.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorNoise {
    pub xy_m: f64,
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_queries: usize,
    pub sampler: PoseSampler,
    pub noise: PriorNoise,
    pub intrinsics: Intrinsics,
    pub min_coverage: f64,
    /// Ground queries: fraction of the map footprint trimmed from each side.
    pub margin: f64,
    /// Ground queries: minimum horizontal distance to any wall.
    pub clearance_m: f64,
    pub scene_id: String,
    pub rng_seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_queries: 200,
            sampler: PoseSampler::Ground,
            noise: PriorNoise {
                xy_m: 5.0,
                yaw_deg: 60.0,
            },
            intrinsics: Intrinsics::centered(250.0, 320, 240),
            min_coverage: 0.3,
            margin: 0.15,
            clearance_m: 2.0,
            scene_id: "city".into(),
            rng_seed: 0,
        }
    }
}

/// Applied prior error, kept for stratified reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub dx: f64,
    pub dy: f64,
    pub dyaw_deg: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub id: String,
    pub image: GrayImage,
    pub gt_pose: Pose,
    pub prior: SensorPrior,
    pub intrinsics: Intrinsics,
    pub scene_id: String,
    pub perturbation: Perturbation,
}

impl BenchmarkCase {
    pub fn to_query(&self) -> Query {
        Query {
            id: self.id.clone(),
            image: self.image.clone(),
            intrinsics: self.intrinsics,
            prior: self.prior,
            gt_pose: Some(self.gt_pose),
            external_matches: HashMap::new(),
        }
    }
}

/// World-to-camera rotation with the optical axis at compass `heading_deg`,
/// tilted up by `pitch_deg`, no roll.
pub fn look_rotation(heading_deg: f64, pitch_deg: f64) -> Mat3 {
    let (psi, phi) = (heading_deg.to_radians(), pitch_deg.to_radians());
    let forward = Vec3::new(psi.sin() * phi.cos(), psi.cos() * phi.cos(), phi.sin());
    let right = Vec3::new(psi.cos(), -psi.sin(), 0.0);
    let down = forward.cross(&right);
    Mat3::from_columns(&[right, down, forward]).transpose()
}

/// Sensor reading of a camera at `gt` with the given position and heading errors.
pub fn perturbed_prior(gt: &Pose, heading_deg: f64, p: &Perturbation) -> SensorPrior {
    let c = gt.center();
    SensorPrior {
        position: PriorPosition::Metric {
            x: c.x + p.dx,
            y: c.y + p.dy,
        },
        compass_heading: wrap_degrees(heading_deg + p.dyaw_deg),
        gravity_dir: (gt.rotation * Vec3::new(0.0, 0.0, -1.0)).normalize(),
        altitude_m: Some(c.z),
    }
}

fn clear_of_walls(scene: &Scene, centre: &Vec3, clearance: f64) -> bool {
    (0..8).all(|i| {
        let a = i as f64 * std::f64::consts::FRAC_PI_4;
        let dir = Vec3::new(a.cos(), a.sin(), 0.0);
        raycast(&scene.mesh, &scene.bvh, centre, &dir).is_none_or(|h| h.t > clearance)
    })
}

fn sample_case(scene: &Scene, spec: &BenchmarkSpec, index: usize) -> Result<BenchmarkCase, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, "bench_case", &[index as u64]));
    let bb = scene.mesh.aabb();
    let ext = bb.extent();
    let (mx, my) = match spec.sampler {
        PoseSampler::Ground => (ext.x * spec.margin, ext.y * spec.margin),
        PoseSampler::Aerial => (0.0, 0.0),
    };
    let k = &spec.intrinsics;
    for _ in 0..MAX_REJECTIONS {
        let x = rng.gen_range(bb.min.x + mx..=bb.max.x - mx);
        let y = rng.gen_range(bb.min.y + my..=bb.max.y - my);
        let heading = rng.gen_range(0.0..360.0);
        let (p0, p1) = spec.sampler.pitch_range();
        let pitch = rng.gen_range(p0..=p1);
        let (h0, h1) = spec.sampler.height_range();
        let above = if h1 > h0 { rng.gen_range(h0..=h1) } else { h0 };
        let p = Perturbation {
            dx: uniform(&mut rng, spec.noise.xy_m),
            dy: uniform(&mut rng, spec.noise.xy_m),
            dyaw_deg: uniform(&mut rng, spec.noise.yaw_deg),
        };
        let Some(floor) = floor_height(&scene.mesh, &scene.bvh, x, y) else {
            continue;
        };
        if matches!(spec.sampler, PoseSampler::Ground) && floor > bb.min.z + 0.5 {
            continue;
        }
        let centre = Vec3::new(x, y, floor + above);
        if matches!(spec.sampler, PoseSampler::Ground) && !clear_of_walls(scene, &centre, spec.clearance_m) {
            continue;
        }
        let gt = Pose::from_center(look_rotation(heading, pitch), centre);
        let view = render(&scene.mesh, &gt, k);
        if view.covered_fraction() < spec.min_coverage {
            continue;
        }
        let image = GrayImage::from_rgb(&view.rgb, view.width(), view.height())
            .expect("render matches intrinsics")
            .quantized();
        return Ok(BenchmarkCase {
            id: format!("{}_{index:04}", spec.scene_id),
            image,
            gt_pose: gt,
            prior: perturbed_prior(&gt, heading, &p),
            intrinsics: *k,
            scene_id: spec.scene_id.clone(),
            perturbation: p,
        });
    }
    Err(BenchError::SceneTooSmall(MAX_REJECTIONS))
}

fn uniform(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

/// Samples ground-truth poses over the scene, renders the query images and
/// perturbs x, y and heading uniformly to form the priors.
///
/// Each case draws from its own stream, so case `i` does not depend on `n_queries`.
pub fn make_benchmark(scene: &Scene, spec: &BenchmarkSpec) -> Result<Vec<BenchmarkCase>, BenchError> {
    if scene.mesh.is_empty() {
        return Err(BenchError::EmptyMesh);
    }
    spec.intrinsics
        .validate()
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    if !(spec.noise.xy_m >= 0.0 && spec.noise.yaw_deg >= 0.0 && spec.noise.yaw_deg <= 180.0) {
        return Err(BenchError::Invalid(
            "noise must be >= 0 with yaw at most 180 degrees".into(),
        ));
    }
    if !(0.0..0.5).contains(&spec.margin) || !(0.0..=1.0).contains(&spec.min_coverage) {
        return Err(BenchError::Invalid(
            "margin must be in [0, 0.5), min_coverage in [0, 1]".into(),
        ));
    }
    (0..spec.n_queries)
        .into_par_iter()
        .map(|i| sample_case(scene, spec, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_from_gravity_compass;
    use crate::pipeline::{prior_pose, Status, TraceEntry};

    fn small_scene() -> Scene {
        Scene::new(fixture_city(&CityParams::small()), None)
    }

    #[test]
    fn thresholds_must_increase() {
        assert!(Thresholds::new(vec![(0.5, 5.0), (0.25, 10.0)]).is_err());
        assert!(Thresholds::new(vec![(0.25, 2.0), (0.5, 2.0)]).is_err());
        assert!(Thresholds::new(vec![]).is_err());
        let t: Thresholds = serde_json::from_str("[[0.25, 2], [1, 10]]").unwrap();
        assert_eq!(t.len(), 2);
        assert!(serde_json::from_str::<Thresholds>("[[1, 10], [0.25, 2]]").is_err());
    }

    #[test]
    fn recall_buckets() {
        let t = Thresholds::default();
        let exact = vec![
            Some(PoseError {
                translation: 0.0,
                rotation_deg: 0.0
            });
            4
        ];
        assert_eq!(recall_of_errors(&exact, &t), vec![1.0, 1.0, 1.0]);
        let mut mixed = vec![
            Some(PoseError {
                translation: 0.1,
                rotation_deg: 1.0
            });
            5
        ];
        mixed.extend(vec![
            Some(PoseError {
                translation: 0.7,
                rotation_deg: 7.0
            });
            5
        ]);
        assert_eq!(recall_of_errors(&mixed, &t), vec![0.5, 0.5, 1.0]);
        assert_eq!(recall_of_errors(&[None, None], &t), vec![0.0; 3]);
    }

    #[test]
    fn recall_needs_ground_truth() {
        let r = LocalizationResult {
            query_id: "x".into(),
            final_pose: Pose::identity(),
            prior_pose: Pose::identity(),
            status: Status::Converged,
            trace: vec![TraceEntry {
                iteration: 0,
                pose: (&Pose::identity()).into(),
                match_count: 10,
                inlier_count: 10,
                accepted: true,
            }],
            selected_seed_id: Some(0),
            timings: Default::default(),
        };
        let mut gt = HashMap::new();
        assert_eq!(
            recall(std::slice::from_ref(&r), &gt, &Thresholds::default()),
            Err(BenchError::MissingGroundTruth("x".into()))
        );
        gt.insert("x".to_string(), Pose::identity());
        assert_eq!(recall(&[r], &gt, &Thresholds::default()).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn look_rotation_matches_sensor_model() {
        for &(h, p) in &[(0.0, 0.0), (37.0, 12.0), (250.0, -45.0), (359.0, -60.0)] {
            let r = look_rotation(h, p);
            assert!((r * r.transpose() - Mat3::identity()).norm() < 1e-12);
            let gt = Pose::from_center(r, Vec3::new(1.0, 2.0, 3.0));
            let zero = Perturbation {
                dx: 0.0,
                dy: 0.0,
                dyaw_deg: 0.0,
            };
            let prior = perturbed_prior(&gt, h, &zero);
            let back = rotation_from_gravity_compass(&prior).unwrap();
            assert!((back - r).norm() < 1e-9, "{h} {p}");
        }
    }

    #[test]
    fn zero_noise_priors_equal_ground_truth() {
        let scene = small_scene();
        let spec = BenchmarkSpec {
            n_queries: 8,
            noise: PriorNoise {
                xy_m: 0.0,
                yaw_deg: 0.0,
            },
            ..Default::default()
        };
        for case in make_benchmark(&scene, &spec).unwrap() {
            let p = prior_pose(&case.prior, &scene, 1.5).unwrap();
            let e = pose_error(&p, &case.gt_pose);
            assert!(e.translation < 1e-9 && e.rotation_deg < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn cases_satisfy_sampler_constraints() {
        let scene = small_scene();
        let spec = BenchmarkSpec {
            n_queries: 12,
            ..Default::default()
        };
        let cases = make_benchmark(&scene, &spec).unwrap();
        assert_eq!(cases.len(), 12);
        for c in &cases {
            let view = render(&scene.mesh, &c.gt_pose, &c.intrinsics);
            assert!(view.covered_fraction() >= 0.3);
            assert!((c.gt_pose.center().z - 1.5).abs() < 1e-9);
            let p = c.perturbation;
            assert!(p.dx.abs() <= 5.0 && p.dy.abs() <= 5.0 && p.dyaw_deg.abs() <= 60.0);
        }
        let again = make_benchmark(&scene, &BenchmarkSpec { n_queries: 5, ..spec }).unwrap();
        assert_eq!(again[4].gt_pose, cases[4].gt_pose);
        assert_eq!(again[4].image, cases[4].image);
    }

    #[test]
    fn aerial_cases_look_down() {
        let scene = small_scene();
        let spec = BenchmarkSpec {
            n_queries: 6,
            sampler: PoseSampler::Aerial,
            ..Default::default()
        };
        for c in make_benchmark(&scene, &spec).unwrap() {
            let f = c.gt_pose.forward();
            let pitch = f.z.asin().to_degrees();
            assert!((-60.0 - 1e-9..=-20.0 + 1e-9).contains(&pitch));
            let floor = floor_height(&scene.mesh, &scene.bvh, c.gt_pose.center().x, c.gt_pose.center().y).unwrap();
            let above = c.gt_pose.center().z - floor;
            assert!((15.0 - 1e-9..=40.0 + 1e-9).contains(&above));
        }
    }

    #[test]
    fn tiny_scene_is_rejected() {
        let mesh = crate::mesh::TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(0.1, 0.0, 0.0),
                Vec3::new(0.0, 0.1, 0.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let scene = Scene::new(mesh, None);
        let spec = BenchmarkSpec {
            n_queries: 1,
            ..Default::default()
        };
        assert_eq!(
            make_benchmark(&scene, &spec).unwrap_err(),
            BenchError::SceneTooSmall(MAX_REJECTIONS)
        );
    }
}
