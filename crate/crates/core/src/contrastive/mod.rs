//! Symmetric InfoNCE between location and multi-view embeddings, the
//! minibatch training loop, and retrieval diagnostics.

mod train;

pub use train::{
    embed_pairs, retrieval_accuracy, retrieval_accuracy_from, train, EpochLog, TrainOutcome, TrainState,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    matmul, symmetric_cross_entropy_value, transpose, Graph, Tensor, TensorError, Var,
};
use crate::dataio::DataError;
use crate::encoders::EncoderError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("row {row} of {which} has zero norm")]
    ZeroNorm { which: &'static str, row: usize },
    #[error("{0}")]
    Shape(String),
    #[error("need at least {needed} records, got {actual}")]
    TooFewRecords { needed: usize, actual: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("non-finite contrastive loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn unit_rows(m: &Tensor, which: &'static str) -> Result<Tensor, TrainError> {
    if m.shape().len() != 2 {
        return Err(TrainError::Shape(format!("{which} must be a matrix, got {:?}", m.shape())));
    }
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.rows() {
        let row = m.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TrainError::ZeroNorm { which, row: i });
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Ok(Tensor::new(m.shape().to_vec(), data)?)
}

/// `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor, TrainError> {
    let a = unit_rows(a, "A")?;
    let b = unit_rows(b, "B")?;
    if a.cols() != b.cols() {
        return Err(TrainError::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut s = matmul(&a, &transpose(&b)?)?;
    // rounding can push a unit dot product a hair past 1
    for v in s.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(s)
}

/// Symmetric InfoNCE with the diagonal as positives: the mean of the
/// row-wise and column-wise cross-entropies of `cos(z_le_i, z_mv_j) / tau`.
pub fn contrastive_loss(z_le: &Tensor, z_mv: &Tensor, tau: f64) -> Result<f64, TrainError> {
    if !(tau > 0.0) {
        return Err(TrainError::Shape(format!("temperature must be positive, got {tau}")));
    }
    if z_le.shape() != z_mv.shape() || z_le.rows() == 0 {
        return Err(TrainError::Shape(format!(
            "embedding batches must match and be non-empty: {:?} vs {:?}",
            z_le.shape(),
            z_mv.shape()
        )));
    }
    let mut logits = cosine_sim_matrix(z_le, z_mv)?;
    for v in logits.data_mut() {
        *v /= tau;
    }
    let loss = symmetric_cross_entropy_value(&logits);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(loss)
}

/// The same loss recorded on a tape.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    z_le: Var,
    z_mv: Var,
    tau: f64,
) -> Result<Var, TensorError> {
    let le = g.normalize_rows(z_le)?;
    let mv = g.normalize_rows(z_mv)?;
    let mv_t = g.transpose(mv)?;
    let sim = g.matmul(le, mv_t)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    g.symmetric_cross_entropy(logits)
}

/// Random split into `ceil(0.9 n)` training and the remaining validation
/// indices, each sorted ascending.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 10 {
        return Err(TrainError::TooFewRecords { needed: 10, actual: n });
    }
    let n_train = (9 * n).div_ceil(10);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// [`split_indices`] applied to a slice.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let (train, val) = split_indices(items.len(), seed)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests;
