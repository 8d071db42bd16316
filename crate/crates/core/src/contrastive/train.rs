use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Graph, ParamStore, Tensor, TensorError};
use crate::dataio::{check_views, Checkpoint, LocationRecord, TrainingMetadata};
use crate::encoders::{EncoderError, ModelConfig, NormStats, PreparedBatch, SpatialEmbeddingModel};

use super::{contrastive_loss_graph, cosine_sim_matrix, split_indices, TrainError};

/// Seed offsets so the split and the batch order draw from streams
/// unrelated to parameter initialisation.
const SPLIT_STREAM: u64 = 0x5_1117;
const SHUFFLE_STREAM: u64 = 0x5_4ff1e;
const EMBED_CHUNK: usize = 256;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_seconds: f64,
}

impl EpochLog {
    /// A single JSON object, as written to training logs.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "elapsed_seconds": self.elapsed_seconds,
        })
        .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    epoch: usize,
    best_val_loss: f64,
    best_epoch: usize,
    patience_counter: usize,
    patience: usize,
    rng: ChaCha8Rng,
    adam: AdamState,
}

impl TrainState {
    pub fn new(config: &ModelConfig, params: &ParamStore) -> Self {
        Self {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            patience_counter: 0,
            patience: config.patience,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(SHUFFLE_STREAM)),
            adam: AdamState::new(config.adam(), params),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best_val_loss
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn patience_counter(&self) -> usize {
        self.patience_counter
    }

    /// Records the validation loss of the epoch just finished. Returns
    /// `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = self.epoch;
            self.patience_counter = 0;
            (true, false)
        } else if self.patience_counter >= self.patience {
            (false, true)
        } else {
            self.patience_counter += 1;
            (false, false)
        }
    }
}

/// Rows `idx` of a tensor along its leading axis.
fn take_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let stride = t.len() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("sized above")
}

fn select(all: &PreparedBatch, idx: &[usize]) -> PreparedBatch {
    PreparedBatch {
        basis: take_rows(&all.basis, idx),
        osm: all.osm.as_ref().map(|t| take_rows(t, idx)),
        gs: all.gs.as_ref().map(|t| take_rows(t, idx)),
    }
}

fn prepare(model: &SpatialEmbeddingModel, records: &[&LocationRecord]) -> Result<PreparedBatch, TrainError> {
    let coords: Vec<_> = records.iter().map(|r| r.coordinate).collect();
    let osm: Option<Vec<Vec<f64>>> = if model.config().osm_enabled() {
        records.iter().map(|r| r.osm_values()).collect()
    } else {
        None
    };
    let osm_refs: Option<Vec<&[f64]>> = osm.as_ref().map(|v| v.iter().map(Vec::as_slice).collect());
    let gs_refs: Option<Vec<&[f64]>> = if model.config().gs_enabled() {
        records.iter().map(|r| r.gs_features.as_deref()).collect()
    } else {
        None
    };
    Ok(model.prepare_batch(&coords, osm_refs.as_deref(), gs_refs.as_deref())?)
}

fn batch_loss(model: &SpatialEmbeddingModel, batch: &PreparedBatch) -> Result<f64, TrainError> {
    let mut g = Graph::new(model.params()).with_trap(model.config().trap_non_finite);
    let (le, mv) = model.forward(&mut g, batch)?;
    let loss = contrastive_loss_graph(&mut g, le, mv, model.config().temperature)?;
    Ok(g.value(loss).data()[0])
}

/// Tags numeric failures with the epoch and batch they happened in.
fn locate(e: impl Into<TrainError>, epoch: usize, batch: usize) -> TrainError {
    match e.into() {
        TrainError::Tensor(TensorError::NonFinite { .. })
        | TrainError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. })) => {
            TrainError::NonFinite { epoch, batch }
        }
        other => other,
    }
}

/// Mean loss over fixed-order batches, weighted by batch size. Single-row
/// batches carry no contrastive signal and are skipped.
fn validation_loss(
    model: &SpatialEmbeddingModel,
    data: &PreparedBatch,
    batch_size: usize,
    epoch: usize,
) -> Result<f64, TrainError> {
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let (mut total, mut weight) = (0.0, 0usize);
    for (b, chunk) in idx.chunks(batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let loss = batch_loss(model, &select(data, chunk)).map_err(|e| locate(e, epoch, b))?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: b });
        }
        total += loss * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok(total / weight as f64)
}

/// Trains a fresh model on `records`: 90/10 split, per-epoch shuffled
/// minibatches with in-batch negatives, Adam, early stopping on the
/// validation loss. The checkpoint holds the best epoch's parameters.
pub fn train(records: &[LocationRecord], config: &ModelConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_views(records, config)?;
    let (train_idx, val_idx) = split_indices(records.len(), config.seed.wrapping_add(SPLIT_STREAM))?;
    if val_idx.len() < 2 {
        return Err(TrainError::TooFewRecords {
            needed: 20,
            actual: records.len(),
        });
    }
    let train_recs: Vec<&LocationRecord> = train_idx.iter().map(|&i| &records[i]).collect();
    let val_recs: Vec<&LocationRecord> = val_idx.iter().map(|&i| &records[i]).collect();

    let mut model = SpatialEmbeddingModel::new(config.clone())?;
    let osm: Vec<Vec<f64>> = train_recs.iter().filter_map(|r| r.osm_values()).collect();
    let stats = NormStats::fit(
        config,
        osm.iter().map(Vec::as_slice),
        train_recs.iter().filter_map(|r| r.gs_features.as_deref()),
    );
    model.set_stats(stats)?;
    let train_data = prepare(&model, &train_recs)?;
    let val_data = prepare(&model, &val_recs)?;

    let mut state = TrainState::new(config, model.params());
    let mut best_params = model.params().clone();
    let mut log = Vec::new();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        order.shuffle(&mut state.rng);
        let (mut total, mut weight) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = select(&train_data, chunk);
            let grads = {
                let mut g = Graph::new(model.params()).with_trap(config.trap_non_finite);
                let (le, mv) = model
                    .forward(&mut g, &batch)
                    .map_err(|e| locate(e, epoch, b))?;
                let loss = contrastive_loss_graph(&mut g, le, mv, config.temperature)
                    .map_err(|e| locate(e, epoch, b))?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch: b });
                }
                total += value * chunk.len() as f64;
                weight += chunk.len();
                g.backward(loss)
                    .map_err(|e| locate(e, epoch, b))?
            };
            state.adam.step(model.params_mut(), &grads)?;
        }
        let train_loss = total / weight.max(1) as f64;
        let val_loss = validation_loss(&model, &val_data, config.batch_size, epoch)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.1}s)",
            entry.elapsed_seconds
        );
        log.push(entry);
        let (improved, stop) = state.observe(val_loss);
        if improved {
            best_params = model.params().clone();
        }
        if stop {
            log::info!("early stop at epoch {epoch}, best epoch {}", state.best_epoch);
            break;
        }
    }

    let final_model =
        SpatialEmbeddingModel::from_parts(config.clone(), best_params, model.stats().clone())?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: final_model,
            metadata: TrainingMetadata {
                best_epoch: state.best_epoch,
                best_val_loss: state.best_val_loss,
                seed: config.seed,
            },
        },
        log,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Location and multi-view embeddings (`[n, d]` each) of `records`.
pub fn embed_pairs(
    model: &SpatialEmbeddingModel,
    records: &[LocationRecord],
) -> Result<(Tensor, Tensor), TrainError> {
    check_views(records, model.config())?;
    let d = model.embed_dim();
    let mut le = Vec::with_capacity(records.len() * d);
    let mut mv = Vec::with_capacity(records.len() * d);
    for chunk in records.chunks(EMBED_CHUNK) {
        let refs: Vec<&LocationRecord> = chunk.iter().collect();
        let batch = prepare(model, &refs)?;
        let mut g = Graph::new(model.params()).with_trap(model.config().trap_non_finite);
        let (a, b) = model.forward(&mut g, &batch)?;
        le.extend_from_slice(g.value(a).data());
        mv.extend_from_slice(g.value(b).data());
    }
    Ok((
        Tensor::new(vec![records.len(), d], le)?,
        Tensor::new(vec![records.len(), d], mv)?,
    ))
}

/// Fraction of rows whose own multi-view embedding is the most similar
/// within consecutive batches of `n` (a short tail is dropped). Ties go to
/// the lowest index.
pub fn retrieval_accuracy_from(z_le: &Tensor, z_mv: &Tensor, n: usize) -> Result<f64, TrainError> {
    if n == 0 || z_le.rows() < n || z_le.shape() != z_mv.shape() {
        return Err(TrainError::Shape(format!(
            "batch size {n} needs at most {} matched rows",
            z_le.rows()
        )));
    }
    let batches = z_le.rows() / n;
    let mut hits = 0usize;
    for b in 0..batches {
        let idx: Vec<usize> = (b * n..(b + 1) * n).collect();
        let s = cosine_sim_matrix(&take_rows(z_le, &idx), &take_rows(z_mv, &idx))?;
        for i in 0..n {
            let row = s.row(i);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == i {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (batches * n) as f64)
}

/// [`retrieval_accuracy_from`] on freshly computed embeddings.
pub fn retrieval_accuracy(
    model: &SpatialEmbeddingModel,
    records: &[LocationRecord],
    n: usize,
) -> Result<f64, TrainError> {
    let (le, mv) = embed_pairs(model, records)?;
    retrieval_accuracy_from(&le, &mv, n)
}
