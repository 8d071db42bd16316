use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::SpatialEmbeddingModel;
use crate::geogrid::Coordinate;

use super::{EvalError, FeatureMatrix, PlotTable, Regressor};

/// Result of a grouped permutation importance run.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub group: String,
    pub value: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl ImportanceReport {
    pub fn to_table(reports: &[ImportanceReport]) -> String {
        let mut out = String::from("group,value,repeats,seed\n");
        for r in reports {
            out.push_str(&format!("{},{},{},{}\n", r.group, r.value, r.repeats, r.seed));
        }
        out
    }
}

/// Mean absolute change in prediction when the rows of `group`'s columns
/// are permuted together, averaged over `repeats` seeded permutations.
pub fn permutation_importance(
    model: &dyn Regressor,
    x: &FeatureMatrix,
    group: &str,
    seed: u64,
    repeats: usize,
) -> Result<ImportanceReport, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Shape("repeats must be positive".into()));
    }
    x.group(group)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..repeats)
        .map(|_| {
            let mut p: Vec<usize> = (0..x.rows()).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    Ok(ImportanceReport {
        group: group.to_string(),
        value: permutation_importance_with(model, x, group, &perms)?,
        repeats,
        seed,
    })
}

/// [`permutation_importance`] over explicitly supplied row permutations.
/// Row `i` of the permuted matrix takes its group values from row
/// `perm[i]`; every group column shares the same `perm`.
pub fn permutation_importance_with(
    model: &dyn Regressor,
    x: &FeatureMatrix,
    group: &str,
    perms: &[Vec<usize>],
) -> Result<f64, EvalError> {
    let cols = x.group(group)?;
    let n = x.rows();
    if n == 0 || perms.is_empty() {
        return Err(EvalError::Shape("need rows and at least one permutation".into()));
    }
    let base = model.predict(x);
    let mut total = 0.0;
    let mut row = vec![0.0; x.cols()];
    for perm in perms {
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(EvalError::Shape(format!("not a permutation of 0..{n}")));
        }
        let mut change = 0.0;
        for i in 0..n {
            row.copy_from_slice(x.row(i));
            let donor = x.row(perm[i]);
            for &c in cols {
                row[c] = donor[c];
            }
            change += (model.predict_row(&row) - base[i]).abs();
        }
        total += change / n as f64;
    }
    Ok(total / perms.len() as f64)
}

/// Partial dependence over a list of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PdTable {
    pub points: Vec<Coordinate>,
    pub values: Vec<f64>,
}

impl PdTable {
    pub fn to_plot_table(&self) -> PlotTable {
        PlotTable {
            columns: vec!["lon".into(), "lat".into(), "pd".into()],
            rows: self
                .points
                .iter()
                .zip(&self.values)
                .map(|(c, v)| vec![c.lon(), c.lat(), *v])
                .collect(),
        }
    }
}

/// For each point, the mean prediction over rows with the location group
/// replaced by the point: raw `[lon, lat]` when `embedder` is `None`,
/// otherwise the point's location embedding. `rows` restricts the average
/// (for example to training rows); `None` uses every row.
pub fn partial_dependence(
    model: &dyn Regressor,
    x: &FeatureMatrix,
    group: &str,
    points: &[Coordinate],
    embedder: Option<&SpatialEmbeddingModel>,
    rows: Option<&[usize]>,
) -> Result<PdTable, EvalError> {
    let cols = x.group(group)?.to_vec();
    let replacements: Vec<Vec<f64>> = match embedder {
        None if cols.len() == 2 => points.iter().map(|c| vec![c.lon(), c.lat()]).collect(),
        None => return Err(EvalError::MissingEmbedder { width: cols.len() }),
        Some(m) => {
            if m.embed_dim() != cols.len() {
                return Err(EvalError::Shape(format!(
                    "embedder produces {} values, group {group:?} has {} columns",
                    m.embed_dim(),
                    cols.len()
                )));
            }
            if points.is_empty() {
                Vec::new()
            } else {
                let e = m.location_encode_batch(points)?;
                (0..points.len()).map(|i| e.row(i).to_vec()).collect()
            }
        }
    };
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..x.rows()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return Err(EvalError::Shape("partial dependence needs at least one row".into()));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= x.rows()) {
        return Err(EvalError::Shape(format!("row {bad} out of range")));
    }
    // one substituted copy of the selected rows per point, predicted as a block
    let mut block = x.select_rows(rows);
    let q = x.cols();
    let mut values = Vec::with_capacity(points.len());
    for rep in &replacements {
        let data: Vec<f64> = {
            let mut d = block.data().to_vec();
            for row in d.chunks_mut(q) {
                for (&c, &v) in cols.iter().zip(rep) {
                    row[c] = v;
                }
            }
            d
        };
        block = FeatureMatrix::new(rows.len(), x.names().to_vec(), data)?;
        let preds = model.predict(&block);
        values.push(preds.iter().sum::<f64>() / preds.len() as f64);
    }
    Ok(PdTable {
        points: points.to_vec(),
        values,
    })
}
