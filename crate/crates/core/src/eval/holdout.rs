use std::collections::BTreeSet;
use std::path::Path;

use crate::dataio::{write_atomic, LocationRecord};

use super::EvalError;

/// Area held out of probe training.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Simple polygon of `(lon, lat)` vertices; boundary points are inside.
    Polygon(Vec<(f64, f64)>),
    /// Record positions.
    Indices(BTreeSet<usize>),
    /// Records whose label `name` equals `value`.
    Label { name: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub inside: Vec<usize>,
    pub outside: Vec<usize>,
    /// Set when either side is empty; callers usually want to warn.
    pub empty_side: bool,
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    cross == 0.0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Partitions record positions by membership in `region`, both sides in
/// ascending order.
pub fn region_holdout_split(records: &[LocationRecord], region: &Region) -> Result<HoldoutSplit, EvalError> {
    let member: Box<dyn Fn(usize, &LocationRecord) -> bool + '_> = match region {
        Region::Polygon(poly) => {
            if poly.len() < 3 {
                return Err(EvalError::InvalidRegion("a polygon needs at least 3 vertices".into()));
            }
            if poly.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(EvalError::InvalidRegion("non-finite polygon vertex".into()));
            }
            Box::new(move |_, r| in_polygon((r.coordinate.lon(), r.coordinate.lat()), poly))
        }
        Region::Indices(set) => {
            if let Some(&i) = set.iter().find(|&&i| i >= records.len()) {
                return Err(EvalError::InvalidRegion(format!(
                    "index {i} out of range for {} records",
                    records.len()
                )));
            }
            Box::new(move |i, _| set.contains(&i))
        }
        Region::Label { name, value } => Box::new(move |_, r| r.label(name) == Some(*value)),
    };
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if member(i, r) {
            inside.push(i);
        } else {
            outside.push(i);
        }
    }
    let empty_side = inside.is_empty() || outside.is_empty();
    if empty_side {
        log::warn!(
            "region holdout has an empty side ({} inside, {} outside)",
            inside.len(),
            outside.len()
        );
    }
    Ok(HoldoutSplit {
        inside,
        outside,
        empty_side,
    })
}

/// Named numeric columns for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// CSV with a header row; reals in shortest round-trip form.
pub fn plot_data_to_string(table: &PlotTable) -> Result<String, EvalError> {
    if table.rows.is_empty() {
        return Err(EvalError::PlotData("table is empty".into()));
    }
    if let Some(i) = table.rows.iter().position(|r| r.len() != table.columns.len()) {
        return Err(EvalError::PlotData(format!("row {i} has the wrong width")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| EvalError::PlotData(e.to_string());
    w.write_record(&table.columns).map_err(err)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| EvalError::PlotData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of numbers is UTF-8"))
}

pub fn emit_plot_data(table: &PlotTable, path: &Path) -> Result<(), EvalError> {
    let text = plot_data_to_string(table)?;
    write_atomic(path, text.as_bytes()).map_err(|e| match e {
        crate::dataio::DataError::Io { path, source } => EvalError::Io { path, source },
        other => EvalError::PlotData(other.to_string()),
    })
}

pub fn read_plot_data(path: &Path) -> Result<PlotTable, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::PlotData(e.to_string()))?;
    let columns = r
        .headers()
        .map_err(|e| EvalError::PlotData(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| EvalError::PlotData(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| EvalError::PlotData(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(PlotTable { columns, rows })
}
