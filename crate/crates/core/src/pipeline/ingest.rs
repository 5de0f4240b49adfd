use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use super::CheckIn;
use crate::error::{Error, Result};
use crate::geocell::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    JsonLines,
    /// Header `user,lat,lon,ts`.
    Csv,
}

impl SourceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SourceFormat::Csv,
            _ => SourceFormat::JsonLines,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub checkins: Vec<CheckIn>,
    pub total_rows: usize,
    pub rejected: usize,
}

fn validate(user: &str, lat: f64, lon: f64, ts: i64) -> Option<CheckIn> {
    if ts < 0 {
        return None;
    }
    let point = GeoPoint::new(lat, lon).ok()?;
    Some(CheckIn {
        user: user.to_owned(),
        point,
        ts,
    })
}

fn parse_json_row(line: &str) -> Option<CheckIn> {
    let v: Value = serde_json::from_str(line).ok()?;
    let user = match v.get("user")? {
        Value::String(s) => s.clone(),
        _ => return None,
    };
    let lat = v.get("lat")?.as_f64()?;
    let lon = v.get("lon")?.as_f64()?;
    // integer seconds only
    let ts = v.get("ts")?.as_i64()?;
    validate(&user, lat, lon, ts)
}

fn parse_csv_row(rec: &csv::StringRecord) -> Option<CheckIn> {
    if rec.len() != 4 {
        return None;
    }
    let lat: f64 = rec[1].trim().parse().ok()?;
    let lon: f64 = rec[2].trim().parse().ok()?;
    let ts: i64 = rec[3].trim().parse().ok()?;
    validate(rec[0].trim(), lat, lon, ts)
}

/// Reads check-ins, skipping (and counting) invalid rows. The result is
/// sorted by `(user, ts)`. More than half of the rows rejected is an error.
pub fn ingest<R: Read>(source: R, format: SourceFormat) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    match format {
        SourceFormat::JsonLines => {
            for line in BufReader::new(source).lines() {
                let line = line.map_err(|e| Error::io("<check-in source>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                report.total_rows += 1;
                match parse_json_row(&line) {
                    Some(c) => report.checkins.push(c),
                    None => report.rejected += 1,
                }
            }
        }
        SourceFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(source);
            let headers = rdr
                .headers()
                .map_err(|e| Error::Format {
                    what: "check-in CSV",
                    msg: e.to_string(),
                })?
                .clone();
            let expected = ["user", "lat", "lon", "ts"];
            if !headers.is_empty() && headers.iter().map(str::trim).ne(expected) {
                return Err(Error::Format {
                    what: "check-in CSV",
                    msg: format!("header must be user,lat,lon,ts, got {:?}", headers),
                });
            }
            for rec in rdr.records() {
                report.total_rows += 1;
                match rec.ok().as_ref().and_then(parse_csv_row) {
                    Some(c) => report.checkins.push(c),
                    None => report.rejected += 1,
                }
            }
        }
    }
    if report.rejected * 2 > report.total_rows {
        return Err(Error::CorpusQuality {
            rejected: report.rejected,
            total: report.total_rows,
        });
    }
    if report.rejected > 0 {
        log::warn!("skipped {} of {} check-in rows", report.rejected, report.total_rows);
    }
    report
        .checkins
        .sort_by(|a, b| a.user.cmp(&b.user).then(a.ts.cmp(&b.ts)));
    Ok(report)
}

pub fn ingest_path(path: &Path) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest(file, SourceFormat::from_path(path))
}

/// Writes check-ins in the JSON Lines input schema.
pub fn write_checkins_jsonl(path: &Path, checkins: &[CheckIn]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in checkins {
        let row = serde_json::json!({
            "user": c.user,
            "lat": c.point.lat(),
            "lon": c.point.lon(),
            "ts": c.ts,
        });
        serde_json::to_writer(&mut w, &row).expect("json value serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_row_is_skipped() {
        let src = concat!(
            r#"{"user":"a","lat":91,"lon":0,"ts":5}"#,
            "\n",
            r#"{"user":"a","lat":10,"lon":0,"ts":5}"#,
            "\n",
            r#"{"user":"a","lat":11,"lon":0,"ts":6}"#,
            "\n"
        );
        let r = ingest(src.as_bytes(), SourceFormat::JsonLines).unwrap();
        assert_eq!(r.rejected, 1);
        assert_eq!(r.checkins.len(), 2);
    }

    #[test]
    fn empty_source() {
        let r = ingest(&b""[..], SourceFormat::JsonLines).unwrap();
        assert!(r.checkins.is_empty());
        let r = ingest(&b"user,lat,lon,ts\n"[..], SourceFormat::Csv).unwrap();
        assert!(r.checkins.is_empty());
    }

    #[test]
    fn sorted_by_user_then_time() {
        let src = "user,lat,lon,ts\nb,1,1,30\na,1,1,20\na,2,2,10\n";
        let r = ingest(src.as_bytes(), SourceFormat::Csv).unwrap();
        let keys: Vec<(&str, i64)> = r.checkins.iter().map(|c| (c.user.as_str(), c.ts)).collect();
        assert_eq!(keys, [("a", 10), ("a", 20), ("b", 30)]);
    }

    #[test]
    fn unparseable_timestamps_rejected() {
        let src = concat!(
            r#"{"user":"a","lat":1,"lon":1,"ts":"yesterday"}"#,
            "\n",
            r#"{"user":"a","lat":1,"lon":1,"ts":1.5}"#,
            "\n",
            r#"{"user":"a","lat":1,"lon":1,"ts":-3}"#,
            "\n",
            r#"{"user":"a","lat":1,"lon":1,"ts":3}"#,
            "\n",
            r#"{"user":"a","lat":1,"lon":1,"ts":4}"#,
            "\n",
            r#"{"user":"a","lat":1,"lon":1,"ts":5}"#,
            "\n",
        );
        let r = ingest(src.as_bytes(), SourceFormat::JsonLines).unwrap();
        assert_eq!((r.rejected, r.checkins.len()), (3, 3));
    }

    #[test]
    fn majority_rejected_is_quality_error() {
        let src = "user,lat,lon,ts\na,100,0,1\na,0,0,x\na,0,0,3\n";
        assert!(matches!(
            ingest(src.as_bytes(), SourceFormat::Csv),
            Err(Error::CorpusQuality { rejected: 2, total: 3 })
        ));
    }

    #[test]
    fn bad_csv_header() {
        assert!(ingest(&b"lat,lon\n1,2\n"[..], SourceFormat::Csv).is_err());
    }

    #[test]
    fn jsonl_roundtrip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let cs = vec![CheckIn {
            user: "u1".into(),
            point: GeoPoint::new(35.5, 139.25).unwrap(),
            ts: 1_700_000_000,
        }];
        write_checkins_jsonl(&p, &cs).unwrap();
        assert_eq!(ingest_path(&p).unwrap().checkins, cs);
    }
}
