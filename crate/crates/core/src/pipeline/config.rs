use serde::{Deserialize, Serialize};

use crate::matching::FilterConfig;
use crate::solve::RansacConfig;

/// Source of 2D-2D matches between the query and each rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatcherConfig {
    /// Harris corners with patch descriptors.
    Classical {
        #[serde(default = "default_max_keypoints")]
        max_keypoints: usize,
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
    /// Ground-truth transfer; needs the query's true pose.
    Oracle {
        #[serde(default = "default_noise")]
        noise_px: f64,
        #[serde(default = "default_outliers")]
        outlier_frac: f64,
        #[serde(default = "default_oracle_n")]
        n_matches: usize,
    },
    /// Matches read from a CSV file, keyed by query id and seed id.
    Ingest,
}

fn default_max_keypoints() -> usize {
    500
}
fn default_ratio() -> f64 {
    0.9
}
fn default_noise() -> f64 {
    1.0
}
fn default_outliers() -> f64 {
    0.2
}
fn default_oracle_n() -> usize {
    200
}

impl MatcherConfig {
    pub fn classical() -> Self {
        Self::Classical {
            max_keypoints: default_max_keypoints(),
            ratio: default_ratio(),
        }
    }

    pub fn oracle(noise_px: f64, outlier_frac: f64) -> Self {
        Self::Oracle {
            noise_px,
            outlier_frac,
            n_matches: default_oracle_n(),
        }
    }
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self::classical()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed count, including the unperturbed prior.
    pub k: usize,
    /// Number of pose solves (seed selection counts as the first).
    pub h: usize,
    pub xy_range: f64,
    pub yaw_range: f64,
    pub phone_height: f64,
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
    pub filter: FilterSettings,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub enabled: bool,
    /// Also prune refinement rounds, not only seed selection.
    pub every_round: bool,
    pub threshold_px: f64,
    pub max_iters: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            enabled: true,
            every_round: true,
            threshold_px: f.threshold_px,
            max_iters: f.max_iters,
        }
    }
}

impl FilterSettings {
    pub fn as_filter(&self) -> FilterConfig {
        FilterConfig {
            threshold_px: self.threshold_px,
            max_iters: self.max_iters,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 15,
            h: 3,
            xy_range: 5.0,
            yaw_range: 60.0,
            phone_height: 1.5,
            matcher: MatcherConfig::default(),
            ransac: RansacConfig::default(),
            filter: FilterSettings::default(),
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 {
            return Err("k must be >= 1".into());
        }
        if self.h < 1 {
            return Err("h must be >= 1".into());
        }
        for (name, v) in [("xy_range", self.xy_range), ("yaw_range", self.yaw_range)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.phone_height.is_finite()) {
            return Err("phone_height must be finite".into());
        }
        match &self.matcher {
            MatcherConfig::Classical { ratio, max_keypoints } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(format!("matcher.ratio must be in (0, 1], got {ratio}"));
                }
                if *max_keypoints == 0 {
                    return Err("matcher.max_keypoints must be > 0".into());
                }
            }
            MatcherConfig::Oracle {
                noise_px, outlier_frac, ..
            } => {
                if !(*noise_px >= 0.0) || !(0.0..=1.0).contains(outlier_frac) {
                    return Err("oracle matcher needs noise_px >= 0 and outlier_frac in [0, 1]".into());
                }
            }
            MatcherConfig::Ingest => {}
        }
        if !(self.filter.threshold_px > 0.0) {
            return Err("filter.threshold_px must be > 0".into());
        }
        self.ransac.validate()
    }

    /// Distance beyond which a lower-support update counts as divergence.
    pub fn divergence_distance(&self) -> f64 {
        2.0 * self.xy_range.max(1.0)
    }
}
