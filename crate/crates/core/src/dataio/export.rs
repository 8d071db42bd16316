use std::path::Path;

use crate::encoders::SpatialEmbeddingModel;
use crate::geogrid::Coordinate;

use super::{write_atomic, DataError};

/// CSV with header `id,lon,lat,e_1..e_d`, one row per coordinate. Reals use
/// the shortest representation that parses back to the same `f64`.
pub fn export_embeddings(
    model: &SpatialEmbeddingModel,
    points: &[(String, Coordinate)],
) -> Result<Vec<u8>, DataError> {
    let d = model.embed_dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "lon".into(), "lat".into()];
    header.extend((1..=d).map(|i| format!("e_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    // batched encoding produces the same bits as single-coordinate calls
    let coords: Vec<Coordinate> = points.iter().map(|(_, c)| *c).collect();
    let embeddings = if coords.is_empty() {
        None
    } else {
        Some(model.location_encode_batch(&coords)?)
    };
    for (i, (id, c)) in points.iter().enumerate() {
        let mut row = vec![id.clone(), c.lon().to_string(), c.lat().to_string()];
        if let Some(e) = &embeddings {
            row.extend(e.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| DataError::InvalidArgument(e.to_string()))
}

pub fn write_embeddings(
    path: &Path,
    model: &SpatialEmbeddingModel,
    points: &[(String, Coordinate)],
) -> Result<(), DataError> {
    write_atomic(path, &export_embeddings(model, points)?)
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::InvalidArgument(format!("csv: {e}"))
}
