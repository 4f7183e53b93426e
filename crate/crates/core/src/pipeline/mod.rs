//! Sensor prior to refined pose: seed augmentation, best-seed selection and
//! iterative render-and-compare refinement.

mod config;
mod manifest;

pub use config::{FilterSettings, MatcherConfig, PipelineConfig};
pub use manifest::{
    load_manifest, parse_manifest, read_results, write_results, write_timings, ManifestError, PoseRecord, PriorRecord,
    QueryRecord, ResultRecord,
};

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{rot_z, rotation_from_gravity_compass, GeoOrigin, GeomError, Intrinsics, Pose, SensorPrior, Vec3};
use crate::imaging::GrayImage;
use crate::matching::{detect_and_describe, filter_fundamental, match_descriptors, oracle_match, Keypoint, MatchSet};
use crate::mesh::{floor_height, Bvh, TriangleMesh};
use crate::render::{render, render_batch, RenderedView};
use crate::solve::{lift_matches, ransac_pnp, RansacConfig, SolveError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no floor below ({x:.2}, {y:.2})")]
    NoFloorFound { x: f64, y: f64 },
    #[error("best seed has {best} matches, need {needed}")]
    MatchingFailed { best: usize, needed: usize },
    #[error("pose solver failed: {0}")]
    SolverFailed(#[from] SolveError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("oracle matching needs the query's ground-truth pose")]
    MissingGroundTruth,
}

/// Reference map shared read-only by all queries.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    pub origin: Option<GeoOrigin>,
}

impl Scene {
    pub fn new(mesh: TriangleMesh, origin: Option<GeoOrigin>) -> Self {
        let bvh = Bvh::build(&mesh);
        Self { mesh, bvh, origin }
    }
}

#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub image: GrayImage,
    pub intrinsics: Intrinsics,
    pub prior: SensorPrior,
    /// Required by the oracle matcher, used for evaluation otherwise.
    pub gt_pose: Option<Pose>,
    /// Externally computed matches by seed id (ingest matcher).
    pub external_matches: HashMap<usize, MatchSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MatchingFailed,
    SolverFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 0 is the solve on the selected seed.
    pub iteration: usize,
    pub pose: PoseRecord,
    pub match_count: usize,
    pub inlier_count: usize,
    /// False when the divergence guard rejected this update.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub render_s: f64,
    pub match_s: f64,
    pub solve_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: String,
    pub final_pose: Pose,
    pub prior_pose: Pose,
    pub status: Status,
    pub trace: Vec<TraceEntry>,
    pub selected_seed_id: Option<usize>,
    /// Wall-clock time per stage; excluded from result files.
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct SeedSelection {
    pub seed_id: usize,
    pub matches: MatchSet,
    pub rendered: RenderedView,
    /// Surviving matches per seed.
    pub counts: Vec<usize>,
}

/// Mixes `parts` into a 64-bit seed; used for every stochastic step.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Per-query seed, independent of batch order and thread count.
pub fn query_seed(rng_seed: u64, query_id: &str) -> u64 {
    derive_seed(rng_seed, query_id, &[])
}

/// Coarse pose from the device sensors.
///
/// Height is the prior's altitude when present, otherwise the floor below the
/// position plus `phone_height`.
pub fn prior_pose(prior: &SensorPrior, scene: &Scene, phone_height: f64) -> Result<Pose, PipelineError> {
    prior.validate()?;
    let (x, y) = prior.metric_xy(scene.origin.as_ref())?;
    let z = match prior.altitude_m {
        Some(alt) => alt,
        None => floor_height(&scene.mesh, &scene.bvh, x, y).ok_or(PipelineError::NoFloorFound { x, y })? + phone_height,
    };
    let r = rotation_from_gravity_compass(prior)?;
    Ok(Pose::from_center(r, Vec3::new(x, y, z)))
}

/// Seed 0 is `prior`; the rest shift x, y and turn about world z uniformly within the ranges.
pub fn generate_seeds(prior: &Pose, cfg: &PipelineConfig, rng_seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seeds = Vec::with_capacity(cfg.k);
    seeds.push(*prior);
    let centre = prior.center();
    let uniform = |rng: &mut ChaCha8Rng, range: f64| {
        if range > 0.0 {
            rng.gen_range(-range..=range)
        } else {
            0.0
        }
    };
    for _ in 1..cfg.k {
        let dx = uniform(&mut rng, cfg.xy_range);
        let dy = uniform(&mut rng, cfg.xy_range);
        let yaw = uniform(&mut rng, cfg.yaw_range).to_radians();
        // Camera-to-world rotation R^T turned by Rz(yaw) gives R Rz(-yaw).
        let r = prior.rotation * rot_z(-yaw);
        seeds.push(Pose::from_center(r, centre + Vec3::new(dx, dy, 0.0)));
    }
    seeds
}

/// Per-query matching state shared across seeds and rounds.
struct Matcher<'a> {
    query: &'a Query,
    cfg: &'a PipelineConfig,
    qseed: u64,
    query_keypoints: Vec<Keypoint>,
    query_truth: Option<RenderedView>,
}

impl<'a> Matcher<'a> {
    fn new(query: &'a Query, scene: &Scene, cfg: &'a PipelineConfig, qseed: u64) -> Result<Self, PipelineError> {
        let mut m = Self {
            query,
            cfg,
            qseed,
            query_keypoints: Vec::new(),
            query_truth: None,
        };
        match &cfg.matcher {
            MatcherConfig::Classical { max_keypoints, .. } => {
                m.query_keypoints = detect_and_describe(&query.image, *max_keypoints).unwrap_or_default();
            }
            MatcherConfig::Oracle { .. } => {
                let gt = query.gt_pose.ok_or(PipelineError::MissingGroundTruth)?;
                m.query_truth = Some(render(&scene.mesh, &gt, &query.intrinsics));
            }
            MatcherConfig::Ingest => {}
        }
        Ok(m)
    }

    /// Raw then filtered matches against one rendering.
    fn matches(&self, rendered: &RenderedView, seed_id: usize, round: usize) -> MatchSet {
        let mut set = match &self.cfg.matcher {
            MatcherConfig::Classical { max_keypoints, ratio } => {
                let gray = GrayImage::from_rgb(&rendered.rgb, rendered.width(), rendered.height())
                    .expect("render buffer matches its intrinsics");
                let kps = detect_and_describe(&gray, *max_keypoints).unwrap_or_default();
                match_descriptors(&self.query_keypoints, &kps, *ratio)
            }
            MatcherConfig::Oracle {
                noise_px,
                outlier_frac,
                n_matches,
            } => {
                let truth = self.query_truth.as_ref().expect("built in Matcher::new");
                // All seeds of a round share the seed, so they are scored on the same query pixels.
                let seed = derive_seed(self.qseed, "oracle", &[round as u64]);
                oracle_match(truth, rendered, *noise_px, *outlier_frac, *n_matches, seed)
                    .map(|o| o.matches)
                    .unwrap_or_default()
            }
            MatcherConfig::Ingest => self.query.external_matches.get(&seed_id).cloned().unwrap_or_default(),
        };
        set.query_id = self.query.id.clone();
        set.seed_id = seed_id;
        let f = &self.cfg.filter;
        if f.enabled && (round == 0 || f.every_round) {
            let seed = derive_seed(self.qseed, "fundamental", &[round as u64, seed_id as u64]);
            set = filter_fundamental(&set, &f.as_filter(), seed).matches;
        }
        set
    }
}

/// Renders every seed and keeps the one with the most surviving matches (lowest id on ties).
pub fn select_seed(
    query: &Query,
    seeds: &[Pose],
    scene: &Scene,
    cfg: &PipelineConfig,
) -> Result<SeedSelection, PipelineError> {
    let qseed = query_seed(cfg.rng_seed, &query.id);
    let matcher = Matcher::new(query, scene, cfg, qseed)?;
    select_with(&matcher, seeds, scene).map(|(s, _, _)| s)
}

fn select_with(matcher: &Matcher, seeds: &[Pose], scene: &Scene) -> Result<(SeedSelection, f64, f64), PipelineError> {
    let k = &matcher.query.intrinsics;
    let t = Instant::now();
    let views = render_batch(&scene.mesh, seeds, k);
    let render_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let sets: Vec<MatchSet> = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| matcher.matches(v, i, 0))
        .collect();
    let match_s = t.elapsed().as_secs_f64();
    let counts: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = i;
        }
    }
    let needed = matcher.cfg.ransac.min_inliers;
    if counts[best] < needed {
        return Err(PipelineError::MatchingFailed {
            best: counts[best],
            needed,
        });
    }
    let matches = sets.into_iter().nth(best).expect("best indexes sets");
    let rendered = views.into_iter().nth(best).expect("best indexes views");
    Ok((
        SeedSelection {
            seed_id: best,
            matches,
            rendered,
            counts,
        },
        render_s,
        match_s,
    ))
}

fn solve(
    matches: &MatchSet,
    rendered: &RenderedView,
    k: &Intrinsics,
    ransac: &RansacConfig,
    seed: u64,
) -> Result<(Pose, usize), SolveError> {
    let corrs = lift_matches(matches, rendered);
    if corrs.len() < ransac.min_inliers {
        return Err(SolveError::NoModelFound {
            best_inliers: corrs.len(),
        });
    }
    let cfg = RansacConfig {
        rng_seed: seed,
        ..*ransac
    };
    let out = ransac_pnp(&corrs, k, &cfg)?;
    Ok((out.pose, out.inlier_count))
}

fn failed(query: &Query, pose: Pose, prior: Pose, status: Status, start: Instant) -> LocalizationResult {
    LocalizationResult {
        query_id: query.id.clone(),
        final_pose: pose,
        prior_pose: prior,
        status,
        trace: Vec::new(),
        selected_seed_id: None,
        timings: StageTimings {
            total_s: start.elapsed().as_secs_f64(),
            ..Default::default()
        },
    }
}

/// Full method for one query. Failures are reported through [`Status`].
pub fn localize(query: &Query, scene: &Scene, cfg: &PipelineConfig) -> LocalizationResult {
    let start = Instant::now();
    let qseed = query_seed(cfg.rng_seed, &query.id);
    let prior = match prior_pose(&query.prior, scene, cfg.phone_height) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("event=prior_fallback query={} reason=\"{e}\"", query.id);
            let z = scene.mesh.aabb().min.z;
            let base = if z.is_finite() { z } else { 0.0 };
            let (x, y) = query.prior.metric_xy(scene.origin.as_ref()).unwrap_or((0.0, 0.0));
            let r = rotation_from_gravity_compass(&query.prior).unwrap_or_else(|_| crate::geom::Mat3::identity());
            let p = Pose::from_center(r, Vec3::new(x, y, base + cfg.phone_height));
            return failed(query, p, p, Status::MatchingFailed, start);
        }
    };
    let matcher = match Matcher::new(query, scene, cfg, qseed) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("event=matcher_unavailable query={} reason=\"{e}\"", query.id);
            return failed(query, prior, prior, Status::MatchingFailed, start);
        }
    };
    let seeds = generate_seeds(&prior, cfg, derive_seed(qseed, "seeds", &[]));
    let mut timings = StageTimings::default();

    let (selection, render_s, match_s) = match select_with(&matcher, &seeds, scene) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("event=seed_selection_failed query={} reason=\"{e}\"", query.id);
            return failed(query, prior, prior, Status::MatchingFailed, start);
        }
    };
    timings.render_s += render_s;
    timings.match_s += match_s;

    let k = &query.intrinsics;
    let t = Instant::now();
    let first = solve(
        &selection.matches,
        &selection.rendered,
        k,
        &cfg.ransac,
        derive_seed(qseed, "ransac", &[0]),
    );
    timings.solve_s += t.elapsed().as_secs_f64();
    let (mut estimate, mut inliers) = match first {
        Ok(s) => s,
        Err(e) => {
            log::debug!("event=solve_failed query={} iteration=0 reason=\"{e}\"", query.id);
            let mut r = failed(query, prior, prior, Status::SolverFailed, start);
            r.selected_seed_id = Some(selection.seed_id);
            return r;
        }
    };
    let mut trace = vec![TraceEntry {
        iteration: 0,
        pose: PoseRecord::from(&estimate),
        match_count: selection.matches.len(),
        inlier_count: inliers,
        accepted: true,
    }];
    let mut status = Status::Converged;

    for round in 1..cfg.h {
        // Ingested matches for refinement rounds use seed ids after the k seeds.
        let seed_id = cfg.k + round - 1;
        if matches!(cfg.matcher, MatcherConfig::Ingest) && !query.external_matches.contains_key(&seed_id) {
            log::debug!("event=no_refinement_matches query={} iteration={round}", query.id);
            break;
        }
        let t = Instant::now();
        let view = render(&scene.mesh, &estimate, k);
        timings.render_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let matches = matcher.matches(&view, seed_id, round);
        timings.match_s += t.elapsed().as_secs_f64();
        if matches.len() < cfg.ransac.min_inliers {
            status = Status::MatchingFailed;
            break;
        }
        let t = Instant::now();
        let solved = solve(
            &matches,
            &view,
            k,
            &cfg.ransac,
            derive_seed(qseed, "ransac", &[round as u64]),
        );
        timings.solve_s += t.elapsed().as_secs_f64();
        let (pose, count) = match solved {
            Ok(s) => s,
            Err(e) => {
                log::debug!("event=solve_failed query={} iteration={round} reason=\"{e}\"", query.id);
                status = Status::SolverFailed;
                break;
            }
        };
        let moved = (pose.center() - estimate.center()).norm();
        let diverged = moved > cfg.divergence_distance() && count < inliers;
        trace.push(TraceEntry {
            iteration: round,
            pose: PoseRecord::from(&pose),
            match_count: matches.len(),
            inlier_count: count,
            accepted: !diverged,
        });
        if diverged {
            log::debug!(
                "event=divergence_guard query={} iteration={round} moved_m={moved:.3}",
                query.id
            );
            break;
        }
        estimate = pose;
        inliers = count;
    }
    timings.total_s = start.elapsed().as_secs_f64();
    LocalizationResult {
        query_id: query.id.clone(),
        final_pose: estimate,
        prior_pose: prior,
        status,
        trace,
        selected_seed_id: Some(selection.seed_id),
        timings,
    }
}

impl LocalizationResult {
    /// The result a run with only `h` solves would have produced.
    ///
    /// Rounds are seeded by index and never look ahead, so a longer run's
    /// trace prefix is exactly the shorter run. Timings are kept as measured.
    pub fn truncated(&self, h: usize) -> LocalizationResult {
        let h = h.max(1);
        if self.trace.len() < h {
            // The run stopped before round h, for the same reason a shorter run would.
            return self.clone();
        }
        let trace: Vec<TraceEntry> = self.trace[..h].to_vec();
        let final_pose = trace
            .iter()
            .rev()
            .find(|e| e.accepted)
            .map(|e| e.pose.to_pose())
            .unwrap_or(self.prior_pose);
        LocalizationResult {
            final_pose,
            status: Status::Converged,
            trace,
            ..self.clone()
        }
    }
}

/// Localizes every query on a pool of `parallelism` threads; output order follows `queries`.
pub fn localize_batch(
    queries: &[Query],
    scene: &Scene,
    cfg: &PipelineConfig,
    parallelism: usize,
) -> Vec<LocalizationResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| queries.par_iter().map(|q| localize(q, scene, cfg)).collect())
}
