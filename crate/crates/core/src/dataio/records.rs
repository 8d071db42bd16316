use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::encoders::{ModelConfig, OSM_CELLS, OSM_CHANNELS};
use crate::geogrid::Coordinate;

use super::{write_atomic, DataError};

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub id: String,
    pub coordinate: Coordinate,
    /// 37 x 6 counts, cell-major in canonical ring order.
    pub osm_counts: Option<Vec<u32>>,
    pub gs_features: Option<Vec<f64>>,
    /// Auxiliary probe targets such as `region`, `density`, `price`.
    pub labels: BTreeMap<String, f64>,
}

impl LocationRecord {
    /// Counts as reals, the form the encoders take.
    pub fn osm_values(&self) -> Option<Vec<f64>> {
        self.osm_counts
            .as_ref()
            .map(|c| c.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn label(&self, name: &str) -> Option<f64> {
        self.labels.get(name).copied()
    }
}

#[derive(Serialize)]
struct Wire<'a> {
    id: &'a str,
    lon: f64,
    lat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    osm_counts: Option<&'a [u32]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gs_features: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    labels: &'a BTreeMap<String, f64>,
}

/// Serialises records as JSON lines. Reals are written in shortest
/// round-trip form, so a reload is bit-exact.
pub fn dataset_to_string(records: &[LocationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let wire = Wire {
            id: &r.id,
            lon: r.coordinate.lon(),
            lat: r.coordinate.lat(),
            osm_counts: r.osm_counts.as_deref(),
            gs_features: r.gs_features.as_deref(),
            labels: &r.labels,
        };
        out.push_str(&serde_json::to_string(&wire).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, records: &[LocationRecord]) -> Result<(), DataError> {
    write_atomic(path, dataset_to_string(records).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LocationRecord>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_dataset_bytes(&bytes)
}

/// Parses raw file contents, rejecting invalid UTF-8 with the offending line.
pub fn parse_dataset_bytes(bytes: &[u8]) -> Result<Vec<LocationRecord>, DataError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_dataset(text),
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(DataError::Parse {
                line,
                field: "<line>".into(),
                reason: "invalid UTF-8".into(),
            })
        }
    }
}

/// Parses JSON lines. Blank lines are skipped; line numbers are 1-based.
/// All records must agree on which views they carry and on the feature
/// length.
pub fn parse_dataset(text: &str) -> Result<Vec<LocationRecord>, DataError> {
    let mut records = Vec::new();
    let mut first: Option<(usize, bool, Option<usize>)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record = parse_line(raw, line)?;
        let shape = (
            line,
            record.osm_counts.is_some(),
            record.gs_features.as_ref().map(Vec::len),
        );
        match first {
            None => first = Some(shape),
            Some((first_line, osm, gs)) => {
                if shape.1 != osm {
                    return Err(parse_err(
                        line,
                        "osm_counts",
                        format!("presence differs from line {first_line}"),
                    ));
                }
                if shape.2 != gs {
                    return Err(parse_err(
                        line,
                        "gs_features",
                        format!("presence or length differs from line {first_line}"),
                    ));
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_err(line: usize, field: &str, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_line(raw: &str, line: usize) -> Result<LocationRecord, DataError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| parse_err(line, "<line>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(parse_err(line, "<line>", "expected a JSON object"));
    };
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "id" | "lon" | "lat" | "osm_counts" | "gs_features" | "labels"
        ) {
            return Err(parse_err(line, key, "unknown field"));
        }
    }
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(parse_err(line, "id", "expected a string")),
        None => return Err(parse_err(line, "id", "missing")),
    };
    let lon = number(&obj, "lon", line)?;
    let lat = number(&obj, "lat", line)?;
    let coordinate = Coordinate::new(lon, lat).map_err(|e| parse_err(line, "lon/lat", e.to_string()))?;

    let osm_counts = match obj.get("osm_counts") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let expected = OSM_CELLS * OSM_CHANNELS;
            if items.len() != expected {
                return Err(parse_err(
                    line,
                    "osm_counts",
                    format!("expected {expected} values, got {}", items.len()),
                ));
            }
            let mut counts = Vec::with_capacity(expected);
            for (k, v) in items.iter().enumerate() {
                let count = match v {
                    Value::Number(n) => n.as_u64().and_then(|c| u32::try_from(c).ok()),
                    _ => None,
                };
                match count {
                    Some(c) => counts.push(c),
                    None => {
                        let reason = if v.as_f64().is_some_and(|x| x < 0.0) {
                            format!("entry {k} is negative")
                        } else {
                            format!("entry {k} is not a non-negative integer")
                        };
                        return Err(parse_err(line, "osm_counts", reason));
                    }
                }
            }
            Some(counts)
        }
        Some(_) => return Err(parse_err(line, "osm_counts", "expected an array")),
    };

    let gs_features = match obj.get("gs_features") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let mut feats = Vec::with_capacity(items.len());
            for (k, v) in items.iter().enumerate() {
                match v.as_f64() {
                    Some(x) if x.is_finite() => feats.push(x),
                    _ => {
                        return Err(parse_err(
                            line,
                            "gs_features",
                            format!("entry {k} is not a finite number"),
                        ))
                    }
                }
            }
            if feats.is_empty() {
                return Err(parse_err(line, "gs_features", "empty array"));
            }
            Some(feats)
        }
        Some(_) => return Err(parse_err(line, "gs_features", "expected an array")),
    };

    let mut labels = BTreeMap::new();
    match obj.get("labels") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                match v.as_f64() {
                    Some(x) if x.is_finite() => {
                        labels.insert(k.clone(), x);
                    }
                    _ => return Err(parse_err(line, &format!("labels.{k}"), "expected a finite number")),
                }
            }
        }
        Some(_) => return Err(parse_err(line, "labels", "expected an object")),
    }

    Ok(LocationRecord {
        id,
        coordinate,
        osm_counts,
        gs_features,
        labels,
    })
}

fn number(obj: &Map<String, Value>, field: &str, line: usize) -> Result<f64, DataError> {
    match obj.get(field) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| parse_err(line, field, "expected a number")),
        None => Err(parse_err(line, field, "missing")),
    }
}

/// Checks that every record carries the views `config` enables, reporting
/// the first offending record (1-based position).
pub fn check_views(records: &[LocationRecord], config: &ModelConfig) -> Result<(), DataError> {
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if config.osm_enabled() && r.osm_counts.is_none() {
            return Err(DataError::ViewMismatch {
                line,
                view: "OSM counts",
                reason: "record has no osm_counts".into(),
            });
        }
        if config.gs_enabled() {
            match &r.gs_features {
                None => {
                    return Err(DataError::ViewMismatch {
                        line,
                        view: "GS features",
                        reason: "record has no gs_features".into(),
                    })
                }
                Some(f) if f.len() != config.gs_input_dim => {
                    return Err(DataError::ViewMismatch {
                        line,
                        view: "GS features",
                        reason: format!(
                            "record has {} features, config expects {}",
                            f.len(),
                            config.gs_input_dim
                        ),
                    })
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}
