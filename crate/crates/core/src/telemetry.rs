//! Telemetry CSV files: header `id,t,x,y` with an optional `error_class`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub id: String,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<String>,
}

/// All fixes of one individual, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub records: Vec<TelemetryRecord>,
}

pub fn read_csv(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    for required in ["id", "t", "x", "y"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::format(path, format!("missing column `{required}`")));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in reader.deserialize::<TelemetryRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("record {}: {e}", line + 1)))?;
        if !(rec.t.is_finite() && rec.x.is_finite() && rec.y.is_finite()) {
            return Err(Error::format(
                path,
                format!("record {} has non-finite values", line + 1),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[TelemetryRecord]) -> Result<()> {
    let with_class = records.iter().any(|r| r.error_class.is_some());
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    if with_class {
        writer.write_record(["id", "t", "x", "y", "error_class"]).map_err(csv_err)?;
    } else {
        writer.write_record(["id", "t", "x", "y"]).map_err(csv_err)?;
    }
    for r in records {
        let mut row = vec![r.id.clone(), r.t.to_string(), r.x.to_string(), r.y.to_string()];
        if with_class {
            row.push(r.error_class.clone().unwrap_or_default());
        }
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Groups records by id, ordered by first appearance; fixes keep file order.
pub fn group_by_id(records: &[TelemetryRecord]) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    for r in records {
        match tracks.iter_mut().find(|t| t.id == r.id) {
            Some(t) => t.records.push(r.clone()),
            None => tracks.push(Track {
                id: r.id.clone(),
                records: vec![r.clone()],
            }),
        }
    }
    tracks
}
