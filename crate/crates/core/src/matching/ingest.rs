//! CSV wire format for externally computed matches.
//!
//! ```text
//! query_id,seed_id,u_q,v_q,u_r,v_r,confidence
//! img_0001,0,120.5,88.0,118.25,90.5,0.93
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MatchError, MatchPair, MatchSet};
use crate::geom::{Intrinsics, Vec2};

pub const CSV_HEADER: [&str; 7] = ["query_id", "seed_id", "u_q", "v_q", "u_r", "v_r", "confidence"];

pub type MatchKey = (String, usize);

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    query_id: String,
    seed_id: usize,
    u_q: f64,
    v_q: f64,
    u_r: f64,
    v_r: f64,
    confidence: f64,
}

pub fn ingest_matches(path: &Path, k: &Intrinsics) -> Result<Vec<MatchSet>, MatchError> {
    let file = File::open(path).map_err(|source| MatchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_matches_from(file, &path.display().to_string(), k)
}

/// Parses match rows grouped by `(query_id, seed_id)` in order of first appearance.
///
/// Both pixels of every row must lie inside `k`. Repeated pairs are dropped.
pub fn ingest_matches_from<R: Read>(reader: R, label: &str, k: &Intrinsics) -> Result<Vec<MatchSet>, MatchError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: u64, message: String| MatchError::Parse {
        path: label.to_string(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }

    let mut sets: Vec<MatchSet> = Vec::new();
    let mut index: HashMap<MatchKey, usize> = HashMap::new();
    let mut seen: HashSet<(usize, [u64; 4])> = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&header))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let q = Vec2::new(row.u_q, row.v_q);
        let r = Vec2::new(row.u_r, row.v_r);
        for p in [q, r] {
            if !k.contains(&p) {
                return Err(MatchError::OutOfBounds {
                    path: label.to_string(),
                    line,
                    u: p.x,
                    v: p.y,
                });
            }
        }
        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(parse_err(line, format!("confidence {} outside [0, 1]", row.confidence)));
        }
        let key = (row.query_id, row.seed_id);
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            sets.push(MatchSet::new(key.0.clone(), key.1, Vec::new()));
            sets.len() - 1
        });
        if seen.insert((slot, [q.x, q.y, r.x, r.y].map(f64::to_bits))) {
            sets[slot].pairs.push(MatchPair {
                query: q,
                render: r,
                confidence: row.confidence,
            });
        } else {
            log::warn!("event=duplicate_match file={label} line={line}");
        }
    }
    Ok(sets)
}

pub fn write_matches<W: Write>(writer: W, sets: &[MatchSet]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(writer);
    for set in sets {
        for p in &set.pairs {
            w.serialize(Row {
                query_id: set.query_id.clone(),
                seed_id: set.seed_id,
                u_q: p.query.x,
                v_q: p.query.y,
                u_r: p.render.x,
                v_r: p.render.y,
                confidence: p.confidence,
            })?;
        }
    }
    if sets.iter().all(|s| s.is_empty()) {
        w.write_record(CSV_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::centered(100.0, 64, 48)
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(ingest_matches_from(&b""[..], "m.csv", &k()).unwrap().is_empty());
    }

    #[test]
    fn rows_are_grouped_with_confidence() {
        let text = "query_id,seed_id,u_q,v_q,u_r,v_r,confidence\nq1,0,1,2,3,4,0.5\nq1,0,5,6,7,8,0.25\nq1,0,9,1,2,3,1\n";
        let sets = ingest_matches_from(text.as_bytes(), "m.csv", &k()).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].len(), 3);
        assert_eq!(sets[0].pairs[1].confidence, 0.25);
        assert_eq!(sets[0].pairs[2].render, Vec2::new(2.0, 3.0));
    }

    #[test]
    fn negative_pixel_names_row() {
        let text = "query_id,seed_id,u_q,v_q,u_r,v_r,confidence\nq1,0,1,2,3,4,0.5\nq1,1,-4,2,3,4,0.5\n";
        let err = ingest_matches_from(text.as_bytes(), "m.csv", &k()).unwrap_err();
        assert!(
            matches!(err, MatchError::OutOfBounds { line: 3, u, .. } if u == -4.0),
            "{err}"
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "query_id,seed_id,u_q,v_q,u_r,v_r,confidence\nq1,0,1,2,3,4,0.5\nq1,x,1,2,3,4,0.5\n";
        let err = ingest_matches_from(text.as_bytes(), "m.csv", &k()).unwrap_err();
        assert!(matches!(err, MatchError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn write_then_read_round_trips() {
        let sets = vec![
            MatchSet::new(
                "a",
                2,
                vec![MatchPair {
                    query: Vec2::new(1.5, 2.25),
                    render: Vec2::new(3.0, 4.0),
                    confidence: 0.75,
                }],
            ),
            MatchSet::new(
                "b",
                0,
                vec![MatchPair {
                    query: Vec2::new(0.1, 0.2),
                    render: Vec2::new(0.3, 0.4),
                    confidence: 0.1,
                }],
            ),
        ];
        let mut buf = Vec::new();
        write_matches(&mut buf, &sets).unwrap();
        assert!(buf.starts_with(b"query_id,seed_id,u_q,v_q,u_r,v_r,confidence\n"));
        assert_eq!(ingest_matches_from(buf.as_slice(), "m.csv", &k()).unwrap(), sets);
    }
}
