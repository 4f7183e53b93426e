use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rcloc::bench::{
    fixture_city, make_benchmark, recall, result_error, run_ablation, AblationReport, CityParams, TrendCheck,
};
use rcloc::geom::{Intrinsics, Pose};
use rcloc::matching::{ingest_matches, MatchSet};
use rcloc::mesh::{load_mesh, save_obj, LoadOptions};
use rcloc::pipeline::{
    load_manifest, localize_batch, read_results, write_results, write_timings, MatcherConfig, PoseRecord, PriorRecord,
    Query, QueryRecord, Scene, Status,
};
use rcloc::render::{render_with, RenderOptions};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::plot_cdf;
use crate::CliError;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn require_file(what: &str, path: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::Config(format!("no {what} path given")))?;
    if !path.is_file() {
        return Err(CliError::Io(format!("{what} not found: {}", path.display())));
    }
    Ok(path.clone())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io(path, e))
}

fn load_scene(cfg: &RunConfig, path: &Path) -> Result<Scene, CliError> {
    let mesh = load_mesh(
        path,
        LoadOptions {
            bake_texture: cfg.bake_texture,
        },
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    log::info!(
        "event=mesh_loaded path={} triangles={} textured={}",
        path.display(),
        mesh.triangle_count(),
        mesh.texture().is_some()
    );
    Ok(Scene::new(mesh, cfg.geo_origin))
}

/// Validates all inputs before rendering anything.
fn prepare_localize(cfg: &RunConfig) -> Result<(Scene, Vec<Query>), CliError> {
    let mesh_path = require_file("mesh", cfg.mesh.as_ref())?;
    let manifest_path = require_file("manifest", cfg.manifest.as_ref())?;
    let ingest = matches!(cfg.pipeline.matcher, MatcherConfig::Ingest);
    let matches_path = if ingest {
        Some(require_file("match file (ingest matcher)", cfg.matches.as_ref())?)
    } else {
        None
    };
    let records = load_manifest(&manifest_path).map_err(|e| CliError::Config(e.to_string()))?;
    let sets: Vec<MatchSet> = match &matches_path {
        Some(p) => {
            // Bounds are checked per query below; parse against the largest frame.
            let w = records.iter().map(|r| r.intrinsics.width).max().unwrap_or(1);
            let h = records.iter().map(|r| r.intrinsics.height).max().unwrap_or(1);
            let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, w, h);
            ingest_matches(p, &k).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => Vec::new(),
    };
    let mut queries = Vec::with_capacity(records.len());
    for rec in &records {
        let q = rec.load(&sets).map_err(|e| CliError::Config(e.to_string()))?;
        for m in q.external_matches.values() {
            m.validate(&q.intrinsics, &q.intrinsics)
                .map_err(|e| CliError::Config(format!("matches for {} seed {}: {e}", q.id, m.seed_id)))?;
        }
        queries.push(q);
    }
    let scene = load_scene(cfg, &mesh_path)?;
    Ok((scene, queries))
}

#[derive(Serialize)]
struct LocalizeSummary {
    queries: usize,
    converged: usize,
    matching_failed: usize,
    solver_failed: usize,
    /// Present when every query has a ground-truth pose.
    recall: Option<Vec<f64>>,
}

pub fn localize(cfg: &RunConfig) -> Result<(), CliError> {
    let (scene, queries) = prepare_localize(cfg)?;
    create_dir(&cfg.output_dir)?;
    cfg.write(&cfg.output_dir)?;
    log::info!(
        "event=localize_start queries={} jobs={}",
        queries.len(),
        cfg.parallelism
    );
    let results = localize_batch(&queries, &scene, &cfg.pipeline, cfg.parallelism);
    let out = &cfg.output_dir;
    write_results(&out.join("results.jsonl"), &results).map_err(|e| CliError::Io(e.to_string()))?;
    write_timings(&out.join("timings.jsonl"), &results).map_err(|e| CliError::Io(e.to_string()))?;
    let count = |s: Status| results.iter().filter(|r| r.status == s).count();
    let gt: HashMap<String, Pose> = queries
        .iter()
        .filter_map(|q| Some((q.id.clone(), q.gt_pose?)))
        .collect();
    let summary = LocalizeSummary {
        queries: results.len(),
        converged: count(Status::Converged),
        matching_failed: count(Status::MatchingFailed),
        solver_failed: count(Status::SolverFailed),
        recall: (gt.len() == queries.len() && !queries.is_empty())
            .then(|| recall(&results, &gt, &cfg.thresholds).ok())
            .flatten(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    log::info!(
        "event=localize_done queries={} converged={} matching_failed={} solver_failed={}",
        summary.queries,
        summary.converged,
        summary.matching_failed,
        summary.solver_failed
    );
    Ok(())
}

pub struct RenderArgs {
    pub mesh: PathBuf,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub out: PathBuf,
    pub bake_texture: bool,
    pub flat: bool,
}

/// Writes `<out>.png` and `<out>.depth`.
pub fn render(args: &RenderArgs) -> Result<(), CliError> {
    args.intrinsics
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    args.pose.validate(1e-6).map_err(|e| CliError::Config(e.to_string()))?;
    let mesh = load_mesh(
        &args.mesh,
        LoadOptions {
            bake_texture: args.bake_texture,
        },
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    let opts = RenderOptions {
        shading: !args.flat,
        ..Default::default()
    };
    let view = render_with(&mesh, &args.pose, &args.intrinsics, &opts);
    let png = args.out.with_extension("png");
    let depth = args.out.with_extension("depth");
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    view.save_png(&png).map_err(|e| io(&png, e))?;
    let f = fs::File::create(&depth).map_err(|e| io(&depth, e))?;
    view.write_depth(std::io::BufWriter::new(f))
        .map_err(|e| io(&depth, e))?;
    log::info!(
        "event=render_done png={} depth={} covered={:.3}",
        png.display(),
        depth.display(),
        view.covered_fraction()
    );
    Ok(())
}

/// The configured mesh with textures kept, or the built-in city.
fn bench_scene(cfg: &RunConfig) -> Result<(Scene, String), CliError> {
    match &cfg.mesh {
        Some(p) => {
            let p = require_file("mesh", Some(p))?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
            Ok((load_scene(cfg, &p)?, id))
        }
        None => Ok((
            Scene::new(fixture_city(&CityParams::standard()), cfg.geo_origin),
            "city".into(),
        )),
    }
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    report: &'a AblationReport,
    trends: &'a [TrendCheck],
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.bench.grid.is_empty() {
        return Err(CliError::Config("bench.grid is empty".into()));
    }
    for c in &cfg.bench.grid {
        if c.h == 0 {
            return Err(CliError::Config("bench.grid entries need h >= 1".into()));
        }
    }
    if matches!(cfg.pipeline.matcher, MatcherConfig::Ingest) {
        return Err(CliError::Config("bench needs the classical or oracle matcher".into()));
    }
    let (scene, scene_id) = bench_scene(cfg)?;
    create_dir(&cfg.output_dir)?;
    cfg.write(&cfg.output_dir)?;
    let spec = cfg.bench.spec(&scene_id, cfg.pipeline.rng_seed);
    let cases = make_benchmark(&scene, &spec).map_err(|e| CliError::Config(e.to_string()))?;
    log::info!("event=bench_generated queries={} scene={scene_id}", cases.len());
    let report = run_ablation(
        &scene,
        &cases,
        &cfg.pipeline,
        &cfg.bench.grid,
        &cfg.thresholds,
        cfg.parallelism,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let out = &cfg.output_dir;
    let csv_path = out.join("report.csv");
    let f = fs::File::create(&csv_path).map_err(|e| io(&csv_path, e))?;
    report.write_csv(f).map_err(|e| io(&csv_path, e))?;
    let trends = report.check_trends();
    write_json(
        &out.join("summary.json"),
        &BenchSummary {
            report: &report,
            trends: &trends,
        },
    )?;
    if cfg.bench.plot {
        let path = out.join("error_cdf.png");
        plot_cdf(&report).save(&path).map_err(|e| io(&path, e))?;
    }
    for t in &trends {
        log::info!(
            "event=trend name={} passed={} detail=\"{}\"",
            t.name,
            t.passed,
            t.detail
        );
    }
    if cfg.bench.assert_trends {
        let failed: Vec<&str> = trends.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect();
        if trends.is_empty() {
            return Err(CliError::Trend("grid has no trend to check".into()));
        }
        if !failed.is_empty() {
            return Err(CliError::Trend(format!("failed trends: {}", failed.join(", "))));
        }
    }
    Ok(())
}

/// Writes the benchmark as a mesh, query images and a manifest with ground truth.
pub fn make_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let (scene, scene_id) = bench_scene(cfg)?;
    let out = &cfg.output_dir;
    create_dir(&out.join("images"))?;
    let spec = cfg.bench.spec(&scene_id, cfg.pipeline.rng_seed);
    let cases = make_benchmark(&scene, &spec).map_err(|e| CliError::Config(e.to_string()))?;
    let mesh_path = match &cfg.mesh {
        Some(p) => p.clone(),
        None => {
            let p = out.join("city.obj");
            save_obj(&scene.mesh, &p).map_err(|e| CliError::Io(e.to_string()))?;
            p
        }
    };
    let mut lines = String::new();
    for c in &cases {
        let rel = PathBuf::from("images").join(format!("{}.png", c.id));
        let path = out.join(&rel);
        c.image.to_luma8().save(&path).map_err(|e| io(&path, e))?;
        let rec = QueryRecord {
            id: c.id.clone(),
            image: rel,
            intrinsics: c.intrinsics,
            prior: PriorRecord::from_prior(&c.prior),
            gt_pose: Some(PoseRecord::from(&c.gt_pose)),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let manifest = out.join("manifest.jsonl");
    fs::write(&manifest, lines).map_err(|e| io(&manifest, e))?;
    let mut run = cfg.clone();
    run.mesh = Some(mesh_path);
    run.manifest = Some(manifest);
    run.output_dir = out.join("run");
    // Renders must sample the texture for the classical matcher to see detail.
    run.bake_texture = false;
    run.write(out)?;
    log::info!("event=make_bench_done queries={} dir={}", cases.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    queries: usize,
    thresholds: Vec<(f64, f64)>,
    recall: Vec<f64>,
    median_translation_m: Option<f64>,
    median_rotation_deg: Option<f64>,
}

pub fn eval(results_path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let manifest_path = require_file("manifest", cfg.manifest.as_ref())?;
    let results_path = require_file("results", Some(&results_path.to_path_buf()))?;
    let records = load_manifest(&manifest_path).map_err(|e| CliError::Config(e.to_string()))?;
    let gt: HashMap<String, Pose> = records
        .iter()
        .filter_map(|r| Some((r.id.clone(), r.gt_pose?.to_pose())))
        .collect();
    let rows = read_results(&results_path).map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<_> = rows
        .iter()
        .map(|r| rcloc::pipeline::LocalizationResult {
            query_id: r.query_id.clone(),
            final_pose: r.final_pose.to_pose(),
            prior_pose: r.prior_pose.to_pose(),
            status: r.status,
            trace: r.trace.clone(),
            selected_seed_id: r.selected_seed_id,
            timings: Default::default(),
        })
        .collect();
    let recalls = recall(&results, &gt, &cfg.thresholds).map_err(|e| CliError::Config(e.to_string()))?;
    let errors: Vec<_> = results
        .iter()
        .filter_map(|r| result_error(r, &gt[&r.query_id]))
        .collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (!v.is_empty()).then(|| v[v.len() / 2])
    };
    let summary = EvalSummary {
        queries: results.len(),
        thresholds: cfg.thresholds.levels().to_vec(),
        recall: recalls,
        median_translation_m: median(errors.iter().map(|e| e.translation).collect()),
        median_rotation_deg: median(errors.iter().map(|e| e.rotation_deg).collect()),
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}
