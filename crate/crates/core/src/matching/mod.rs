//! 2D-2D correspondences between a query image and a rendered view.
//!
//! Three sources feed the same [`MatchSet`] type: the classical Harris/patch
//! matcher, a ground-truth oracle for synthetic tests, and CSV ingestion of
//! externally computed matches. [`filter_fundamental`] prunes any of them.

mod features;
mod fundamental;
mod ingest;
mod oracle;

pub use features::{detect_and_describe, match_descriptors, Keypoint, DESCRIPTOR_LEN, PATCH_RADIUS};
pub use fundamental::{
    eight_point, filter_fundamental, sampson_distance, FilterConfig, FilteredMatches, DEGENERATE_INLIER_RATIO,
};
pub use ingest::{ingest_matches, ingest_matches_from, write_matches, MatchKey, CSV_HEADER};
pub use oracle::{oracle_match, OracleMatches};

use std::collections::HashSet;

use thiserror::Error;

use crate::geom::{Intrinsics, Vec2};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("image is {width}x{height}, detection needs at least 32x32")]
    ImageTooSmall { width: usize, height: usize },
    #[error("only {0} visible pairs survived, need 8")]
    InsufficientOverlap(usize),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}:{line}: pixel ({u}, {v}) outside the image")]
    OutOfBounds { path: String, line: u64, u: f64, v: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub query: Vec2,
    pub render: Vec2,
    /// In `[0, 1]`, higher is better.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub query_id: String,
    pub seed_id: usize,
}

impl MatchSet {
    pub fn new(query_id: impl Into<String>, seed_id: usize, pairs: Vec<MatchPair>) -> Self {
        Self {
            pairs,
            query_id: query_id.into(),
            seed_id,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Copy holding only the pairs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i]).collect(),
            query_id: self.query_id.clone(),
            seed_id: self.seed_id,
        }
    }

    /// Checks the bounds and uniqueness invariants against both images.
    pub fn validate(&self, query_k: &Intrinsics, render_k: &Intrinsics) -> Result<(), String> {
        let mut seen = HashSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if !query_k.contains(&p.query) || !render_k.contains(&p.render) {
                return Err(format!("pair {i} out of bounds"));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(format!("pair {i} confidence {}", p.confidence));
            }
            let key = [p.query.x, p.query.y, p.render.x, p.render.y].map(f64::to_bits);
            if !seen.insert(key) {
                return Err(format!("pair {i} duplicated"));
            }
        }
        Ok(())
    }
}
