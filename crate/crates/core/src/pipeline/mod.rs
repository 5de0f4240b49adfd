//! Check-in ingestion, monthly trajectory assembly, spatiotemporal
//! clustering, filtering, splitting and synthetic corpus generation.

mod cluster;
mod ingest;
mod split;
mod synth;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

pub use cluster::{assemble_monthly, cluster_points, filter_trajectories, FilterRule};
pub use ingest::{ingest, ingest_path, write_checkins_jsonl, IngestReport, SourceFormat};
pub use split::{split_corpus, CorpusSplit, UserGroups};
pub use synth::{synth_generate, SynthBox, SynthConfig};

use crate::error::{Error, Result};
use crate::geocell::{CellId, GeoPoint};

/// Default clustering window: ten minutes.
pub const DEFAULT_WINDOW_S: i64 = 600;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckIn {
    pub user: String,
    pub point: GeoPoint,
    pub ts: i64,
}

/// UTC calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of_timestamp(ts: i64) -> Result<Self> {
        let dt = DateTime::from_timestamp(ts, 0)
            .ok_or_else(|| Error::input(format!("timestamp {ts} out of range")))?;
        Ok(Self {
            year: dt.year(),
            month: dt.month(),
        })
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// Unix seconds at 00:00 UTC on the first day of the month.
    pub fn start_ts(self) -> i64 {
        chrono::NaiveDate::from_ymd_opt(self.year, self.month, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|d| d.and_utc().timestamp())
            .expect("valid year-month")
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl std::str::FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::input(format!("month {s:?} is not YYYY-MM"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if y.len() != 4 || m.len() != 2 || !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self { year, month })
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One user's check-ins within one UTC month, time-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub user: String,
    pub month: YearMonth,
    pub points: Vec<CheckIn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub cell: CellId,
    pub t_start: i64,
    pub t_end: i64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteredTrajectory {
    /// Only present until labels for the downstream tasks are extracted.
    #[serde(skip)]
    pub user: Option<String>,
    pub month: YearMonth,
    pub points: Vec<ClusterPoint>,
}

impl ClusteredTrajectory {
    pub fn distinct_cells(&self) -> usize {
        let mut cells: Vec<&CellId> = self.points.iter().map(|p| &p.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        cells.len()
    }

    pub fn cells(&self) -> Vec<&str> {
        self.points.iter().map(|p| p.cell.as_str()).collect()
    }
}

/// Writes one trajectory per line.
pub fn write_corpus(path: &Path, trajs: &[ClusteredTrajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::Format {
            what: "corpus",
            msg: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<ClusteredTrajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ClusteredTrajectory = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "corpus",
            msg: format!("{}:{}: {e}", path.display(), n + 1),
        })?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_month_roundtrip() {
        let ym: YearMonth = "2023-01".parse().unwrap();
        assert_eq!(ym.to_string(), "2023-01");
        assert_eq!(YearMonth::of_timestamp(ym.start_ts()).unwrap(), ym);
        assert_eq!(YearMonth::of_timestamp(ym.start_ts() - 1).unwrap().to_string(), "2022-12");
        assert_eq!(ym.next().to_string(), "2023-02");
        assert_eq!("2023-12".parse::<YearMonth>().unwrap().next().to_string(), "2024-01");
        assert!("2023-13".parse::<YearMonth>().is_err());
        assert!("2023-1".parse::<YearMonth>().is_err());
    }

    #[test]
    fn corpus_line_format() {
        let t = ClusteredTrajectory {
            user: Some("secret".into()),
            month: "2022-07".parse().unwrap(),
            points: vec![ClusterPoint {
                cell: CellId::parse("xn76k5").unwrap(),
                t_start: 10,
                t_end: 20,
                count: 2,
            }],
        };
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(
            line,
            r#"{"month":"2022-07","points":[{"cell":"xn76k5","t_start":10,"t_end":20,"count":2}]}"#
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&p, &[t.clone()]).unwrap();
        let back = read_corpus(&p).unwrap();
        assert_eq!(back[0].user, None);
        assert_eq!(back[0].points, t.points);
    }
}
