use std::fs;
use std::path::{Path, PathBuf};

use rcloc::bench::{AblationCell, BenchmarkSpec, PoseSampler, PriorNoise, Thresholds};
use rcloc::geom::{GeoOrigin, Intrinsics};
use rcloc::pipeline::{MatcherConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs; written back as `config.json` next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Match CSV for the ingest matcher.
    pub matches: Option<PathBuf>,
    /// Sample the texture into vertex colours at load time.
    pub bake_texture: bool,
    pub geo_origin: Option<GeoOrigin>,
    pub parallelism: usize,
    pub thresholds: Thresholds,
    pub pipeline: PipelineConfig,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            manifest: None,
            output_dir: PathBuf::from("out"),
            matches: None,
            bake_texture: true,
            geo_origin: None,
            parallelism: 1,
            thresholds: Thresholds::default(),
            pipeline: PipelineConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

/// Benchmark generation and ablation grid. The benchmark seed is `pipeline.rng_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub n_queries: usize,
    pub sampler: PoseSampler,
    pub noise: PriorNoise,
    pub intrinsics: Intrinsics,
    pub min_coverage: f64,
    pub margin: f64,
    pub clearance_m: f64,
    pub grid: Vec<AblationCell>,
    pub assert_trends: bool,
    /// Also write an error-CDF plot.
    pub plot: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let spec = BenchmarkSpec::default();
        Self {
            n_queries: spec.n_queries,
            sampler: spec.sampler,
            noise: spec.noise,
            intrinsics: spec.intrinsics,
            min_coverage: spec.min_coverage,
            margin: spec.margin,
            clearance_m: spec.clearance_m,
            grid: AblationCell::full_grid(),
            assert_trends: false,
            plot: false,
        }
    }
}

impl BenchSettings {
    pub fn spec(&self, scene_id: &str, rng_seed: u64) -> BenchmarkSpec {
        BenchmarkSpec {
            n_queries: self.n_queries,
            sampler: self.sampler,
            noise: self.noise,
            intrinsics: self.intrinsics,
            min_coverage: self.min_coverage,
            margin: self.margin,
            clearance_m: self.clearance_m,
            scene_id: scene_id.to_string(),
            rng_seed,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Match CSV; implies the ingest matcher unless --matcher is given.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long, value_enum)]
    pub matcher: Option<MatcherKind>,
    /// Number of benchmark queries.
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MatcherKind {
    Classical,
    Oracle,
    Ingest,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match &o.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &o.mesh {
            cfg.mesh = Some(v.clone());
        }
        if let Some(v) = &o.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &o.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &o.matches {
            cfg.matches = Some(v.clone());
            if o.matcher.is_none() {
                cfg.pipeline.matcher = MatcherConfig::Ingest;
            }
        }
        if let Some(v) = o.jobs {
            cfg.parallelism = v;
        }
        if let Some(v) = o.seed {
            cfg.pipeline.rng_seed = v;
        }
        if let Some(v) = o.k {
            cfg.pipeline.k = v;
        }
        if let Some(v) = o.h {
            cfg.pipeline.h = v;
        }
        if let Some(v) = o.queries {
            cfg.bench.n_queries = v;
        }
        if let Some(kind) = o.matcher {
            let same = matches!(
                (kind, &cfg.pipeline.matcher),
                (MatcherKind::Classical, MatcherConfig::Classical { .. })
                    | (MatcherKind::Oracle, MatcherConfig::Oracle { .. })
                    | (MatcherKind::Ingest, MatcherConfig::Ingest)
            );
            if !same {
                cfg.pipeline.matcher = match kind {
                    MatcherKind::Classical => MatcherConfig::classical(),
                    MatcherKind::Oracle => MatcherConfig::oracle(1.0, 0.2),
                    MatcherKind::Ingest => MatcherConfig::Ingest,
                };
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline
            .validate()
            .map_err(|e| CliError::Config(format!("pipeline: {e}")))?;
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        let path = dir.join("config.json");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"parallelism": 2, "pipeline": {"k": 4, "rng_seed": 9}}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            k: Some(7),
            matches: Some("m.csv".into()),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!((cfg.parallelism, cfg.pipeline.k, cfg.pipeline.rng_seed), (2, 7, 9));
        assert_eq!(cfg.pipeline.matcher, MatcherConfig::Ingest);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"mesh_path": "x"}"#).unwrap();
        let o = Overrides {
            config: Some(path.clone()),
            ..Default::default()
        };
        assert!(matches!(RunConfig::resolve(&o), Err(CliError::Config(_))));
        fs::write(&path, r#"{"pipeline": {"h": 0}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(&o), Err(CliError::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(&Overrides {
            seed: Some(3),
            matcher: Some(MatcherKind::Oracle),
            ..Default::default()
        })
        .unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
