//! Grid runs over iteration count and seed augmentation.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{recall_of_errors, result_error, BenchError, BenchmarkCase, Thresholds};
use crate::geom::PoseError;
use crate::pipeline::{localize_batch, LocalizationResult, PipelineConfig, Query, Scene, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// The prior alone.
    None,
    Xy,
    Yaw,
    Both,
}

impl SeedMode {
    pub const ALL: [SeedMode; 4] = [SeedMode::None, SeedMode::Xy, SeedMode::Yaw, SeedMode::Both];

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Xy => "xy",
            Self::Yaw => "yaw",
            Self::Both => "both",
        }
    }

    /// `base` with the perturbations this mode disables zeroed.
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        match self {
            Self::None => {
                cfg.k = 1;
                cfg.xy_range = 0.0;
                cfg.yaw_range = 0.0;
            }
            Self::Xy => cfg.yaw_range = 0.0,
            Self::Yaw => cfg.xy_range = 0.0,
            Self::Both => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub h: usize,
    pub seeds: SeedMode,
}

impl AblationCell {
    /// h in 1..=3 crossed with all seed modes.
    pub fn full_grid() -> Vec<AblationCell> {
        SeedMode::ALL
            .iter()
            .flat_map(|&seeds| (1..=3).map(move |h| AblationCell { h, seeds }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub status: Status,
    /// `None` when no pose was solved.
    pub error: Option<PoseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: AblationCell,
    pub recalls: Vec<f64>,
    /// Queries that never produced a pose.
    pub failed: usize,
    pub outcomes: Vec<QueryOutcome>,
    /// Set when the cell's configuration was rejected.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub thresholds: Thresholds,
    pub n_queries: usize,
    pub cells: Vec<CellReport>,
}

fn evaluate(cell: AblationCell, cases: &[BenchmarkCase], results: &[LocalizationResult], t: &Thresholds) -> CellReport {
    let outcomes: Vec<QueryOutcome> = cases
        .iter()
        .zip(results)
        .map(|(c, r)| QueryOutcome {
            id: c.id.clone(),
            status: r.status,
            error: result_error(r, &c.gt_pose),
        })
        .collect();
    let errors: Vec<Option<PoseError>> = outcomes.iter().map(|o| o.error).collect();
    CellReport {
        cell,
        recalls: recall_of_errors(&errors, t),
        failed: errors.iter().filter(|e| e.is_none()).count(),
        outcomes,
        error: None,
    }
}

/// Localizes the same benchmark for every cell with the same base seed.
pub fn run_ablation(
    scene: &Scene,
    cases: &[BenchmarkCase],
    base: &PipelineConfig,
    cells: &[AblationCell],
    thresholds: &Thresholds,
    parallelism: usize,
) -> Result<AblationReport, BenchError> {
    if cells.is_empty() {
        return Err(BenchError::Invalid("empty ablation grid".into()));
    }
    let queries: Vec<Query> = cases.iter().map(|c| c.to_query()).collect();
    // One run per seed mode at its largest h; shorter cells are trace prefixes.
    let mut runs: HashMap<SeedMode, Vec<LocalizationResult>> = HashMap::new();
    for mode in SeedMode::ALL {
        let Some(h_max) = cells.iter().filter(|c| c.seeds == mode && c.h >= 1).map(|c| c.h).max() else {
            continue;
        };
        let mut cfg = mode.apply(base);
        cfg.h = h_max;
        if cfg.validate().is_ok() {
            runs.insert(mode, localize_batch(&queries, scene, &cfg, parallelism));
        }
    }
    let mut reports = Vec::with_capacity(cells.len());
    for &cell in cells {
        let mut cfg = cell.seeds.apply(base);
        cfg.h = cell.h;
        let run = cfg.validate().and_then(|()| {
            runs.get(&cell.seeds)
                .ok_or_else(|| "configuration at the largest h was rejected".to_string())
        });
        let run = match run {
            Ok(run) => run,
            Err(e) => {
                reports.push(CellReport {
                    cell,
                    recalls: vec![0.0; thresholds.len()],
                    failed: cases.len(),
                    outcomes: Vec::new(),
                    error: Some(e),
                });
                continue;
            }
        };
        let results: Vec<LocalizationResult> = run.iter().map(|r| r.truncated(cell.h)).collect();
        let report = evaluate(cell, cases, &results, thresholds);
        log::info!(
            "event=ablation_cell h={} seeds={} recalls={:?} failed={}",
            cell.h,
            cell.seeds.name(),
            report.recalls,
            report.failed
        );
        reports.push(report);
    }
    Ok(AblationReport {
        thresholds: thresholds.clone(),
        n_queries: cases.len(),
        cells: reports,
    })
}

impl AblationReport {
    pub fn recall(&self, h: usize, seeds: SeedMode) -> Option<&[f64]> {
        self.cells
            .iter()
            .find(|c| c.cell == AblationCell { h, seeds } && c.error.is_none())
            .map(|c| c.recalls.as_slice())
    }

    /// One row per cell, one recall column per threshold.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["h".to_string(), "seeds".into(), "queries".into(), "failed".into()];
        header.extend((0..self.thresholds.len()).map(|i| format!("recall_{}", self.thresholds.label(i))));
        header.push("error".into());
        out.write_record(&header)?;
        for c in &self.cells {
            let mut row = vec![
                c.cell.h.to_string(),
                c.cell.seeds.name().to_string(),
                self.n_queries.to_string(),
                c.failed.to_string(),
            ];
            row.extend(c.recalls.iter().map(|r| format!("{r:.4}")));
            row.push(c.error.clone().unwrap_or_default());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Iteration gain at the tightest threshold and seed ordering at the loosest.
    ///
    /// Recall must not drop as h grows and must rise strictly from the smallest
    /// to the largest h. With all four seed modes present at the largest h,
    /// both must beat xy and yaw, and each of those must beat none.
    pub fn check_trends(&self) -> Vec<TrendCheck> {
        let mut checks = Vec::new();
        let tight = 0;
        let loose = self.thresholds.len() - 1;
        let mut by_mode: HashMap<SeedMode, Vec<(usize, f64)>> = HashMap::new();
        for c in self.cells.iter().filter(|c| c.error.is_none()) {
            by_mode
                .entry(c.cell.seeds)
                .or_default()
                .push((c.cell.h, c.recalls[tight]));
        }
        for mode in SeedMode::ALL {
            let Some(series) = by_mode.get_mut(&mode) else { continue };
            series.sort_by_key(|s| s.0);
            series.dedup_by_key(|s| s.0);
            if series.len() < 2 {
                continue;
            }
            let monotone = series.windows(2).all(|w| w[1].1 >= w[0].1);
            let gain = series.last().unwrap().1 > series[0].1;
            checks.push(TrendCheck {
                name: format!("iterations/{}", mode.name()),
                passed: monotone && gain,
                detail: format!("recall@{} by h: {:?}", self.thresholds.label(tight), series),
            });
        }
        let max_h = self.cells.iter().filter(|c| c.error.is_none()).map(|c| c.cell.h).max();
        if let Some(h) = max_h {
            let r: Vec<Option<f64>> = SeedMode::ALL
                .iter()
                .map(|&m| self.recall(h, m).map(|r| r[loose]))
                .collect();
            if let [Some(none), Some(xy), Some(yaw), Some(both)] = r[..] {
                checks.push(TrendCheck {
                    name: "seeds".into(),
                    passed: both > xy && both > yaw && xy > none && yaw > none,
                    detail: format!(
                        "recall@{} at h={h}: none={none:.3} xy={xy:.3} yaw={yaw:.3} both={both:.3}",
                        self.thresholds.label(loose)
                    ),
                });
            }
        }
        checks
    }
}
