//! Per-sample score tables shared by every scorer.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    LearnedEstimator,
    AvgDistance,
    TargetPpl,
    DeltaPpl,
}

impl ScorerKind {
    /// The ranking direction fixed for each scorer.
    pub fn direction(self) -> Direction {
        match self {
            ScorerKind::LearnedEstimator => Direction::HigherIsCloser,
            ScorerKind::AvgDistance | ScorerKind::TargetPpl | ScorerKind::DeltaPpl => {
                Direction::LowerIsCloser
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsCloser,
    LowerIsCloser,
}

impl Direction {
    /// Ordering of two `(value, id)` keys by closeness: `Less` means `a`
    /// ranks ahead of `b`. Ties in value go to the smaller id.
    pub fn rank_cmp(self, a: (f64, u64), b: (f64, u64)) -> Ordering {
        let by_value = match self {
            Direction::HigherIsCloser => b.0.total_cmp(&a.0),
            Direction::LowerIsCloser => a.0.total_cmp(&b.0),
        };
        by_value.then(a.1.cmp(&b.1))
    }

    /// True when `a` is at least as close as `b`.
    pub fn at_least_as_close(self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherIsCloser => a >= b,
            Direction::LowerIsCloser => a <= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: u64,
    pub dataset: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreHeader {
    scorer: ScorerKind,
    direction: Direction,
    #[serde(default)]
    config: serde_json::Value,
}

/// Scores for the records of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scorer: ScorerKind,
    pub direction: Direction,
    pub entries: Vec<ScoreEntry>,
    /// Provenance of the producing run.
    pub config: serde_json::Value,
}

impl ScoreTable {
    pub fn new(scorer: ScorerKind, entries: Vec<ScoreEntry>) -> Self {
        ScoreTable {
            scorer,
            direction: scorer.direction(),
            entries,
            config: serde_json::Value::Null,
        }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }

    /// Writes the header line followed by one entry per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| self.to_writer(out))
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = ScoreHeader {
            scorer: self.scorer,
            direction: self.direction,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<ScoreTable> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<ScoreTable> {
        let mut lines = reader.lines().enumerate();
        let header: ScoreHeader = loop {
            match lines.next() {
                Some((n, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: n + 1,
                        msg: e.to_string(),
                    })?;
                }
                None => return Err(Error::empty("score file has no header")),
            }
        };
        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ScoreEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
            if !e.value.is_finite() {
                return Err(Error::NonFinite { id: e.id });
            }
            entries.push(e);
        }
        Ok(ScoreTable {
            scorer: header.scorer,
            direction: header.direction,
            entries,
            config: header.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_per_scorer() {
        assert_eq!(
            ScorerKind::LearnedEstimator.direction(),
            Direction::HigherIsCloser
        );
        assert_eq!(
            ScorerKind::AvgDistance.direction(),
            Direction::LowerIsCloser
        );
        assert_eq!(ScorerKind::TargetPpl.direction(), Direction::LowerIsCloser);
        assert_eq!(ScorerKind::DeltaPpl.direction(), Direction::LowerIsCloser);
    }

    #[test]
    fn rank_cmp_breaks_ties_by_id() {
        let d = Direction::HigherIsCloser;
        assert_eq!(d.rank_cmp((0.5, 2), (0.5, 1)), Ordering::Greater);
        assert_eq!(d.rank_cmp((0.9, 2), (0.5, 1)), Ordering::Less);
        let d = Direction::LowerIsCloser;
        assert_eq!(d.rank_cmp((0.9, 2), (0.5, 1)), Ordering::Greater);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = ScoreTable::new(
            ScorerKind::DeltaPpl,
            vec![
                ScoreEntry {
                    id: 3,
                    dataset: "a".into(),
                    value: -2.0,
                },
                ScoreEntry {
                    id: 4,
                    dataset: "b".into(),
                    value: 0.1 + 0.2,
                },
            ],
        )
        .with_config(serde_json::json!({"seed": 1}));
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.starts_with("{\"scorer\":\"delta_ppl\",\"direction\":\"lower_is_closer\""));
        let back = ScoreTable::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}
