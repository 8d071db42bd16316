use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::retrieval_accuracy_from;
use super::*;
use crate::autodiff::ParamStore;
use crate::dataio::{encode_checkpoint, synthesize_world};
use crate::encoders::{ModelConfig, SpatialEmbeddingModel};
use crate::geogrid::Coordinate;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn loss(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    contrastive_loss(a, b, tau).unwrap()
}

#[test]
fn cosine_of_identity_rows() {
    let i = Tensor::identity(4);
    assert_eq!(cosine_sim_matrix(&i, &i).unwrap(), i);
    let a = Tensor::from_rows(&[vec![3.0, -4.0]]).unwrap();
    let neg = Tensor::from_rows(&[vec![-3.0, 4.0]]).unwrap();
    assert_eq!(cosine_sim_matrix(&a, &a).unwrap().data(), &[1.0]);
    assert_eq!(cosine_sim_matrix(&a, &neg).unwrap().data(), &[-1.0]);
}

#[test]
fn cosine_matches_scalar_loop() {
    let a = random(7, 5, 1);
    let b = random(7, 5, 2);
    let s = cosine_sim_matrix(&a, &b).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..5 {
                dot += a.get(i, k) * b.get(j, k);
                na += a.get(i, k) * a.get(i, k);
                nb += b.get(j, k) * b.get(j, k);
            }
            assert!((s.get(i, j) - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_row_is_an_error() {
    let mut a = random(3, 4, 1);
    for k in 0..4 {
        a.data_mut()[4 + k] = 0.0;
    }
    assert!(matches!(
        cosine_sim_matrix(&a, &random(3, 4, 2)),
        Err(TrainError::ZeroNorm { which: "A", row: 1 })
    ));
}

#[test]
fn single_pair_loss_is_zero() {
    let a = random(1, 8, 3);
    let b = random(1, 8, 4);
    assert_eq!(loss(&a, &b, 0.07), 0.0);
}

#[test]
fn two_orthogonal_aligned_pairs() {
    let e = Tensor::identity(2);
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let got = loss(&e, &e, 1.0);
    assert!((got - expected).abs() < 1e-15);
    assert!((got - 0.313_261_7).abs() < 1e-6);
}

#[test]
fn tape_loss_matches_plain_loss() {
    let a = random(6, 4, 5);
    let b = random(6, 4, 6);
    let ps = ParamStore::new();
    let mut g = Graph::new(&ps);
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let l = contrastive_loss_graph(&mut g, va, vb, 0.3).unwrap();
    assert!((g.value(l).data()[0] - loss(&a, &b, 0.3)).abs() < 1e-12);
}

#[test]
fn cosine_is_not_translation_invariant() {
    let a = random(5, 3, 7);
    let b = random(5, 3, 8);
    let shift = |t: &Tensor| {
        let mut t = t.clone();
        for row in t.data_mut().chunks_mut(3) {
            row[0] += 0.7;
            row[2] -= 0.4;
        }
        t
    };
    assert!((loss(&a, &b, 0.5) - loss(&shift(&a), &shift(&b), 0.5)).abs() > 1e-6);
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn loss_symmetries(seed in 0u64..10_000, n in 2usize..9, tau in 0.05f64..2.0) {
        let a = random(n, 4, seed);
        let b = random(n, 4, seed + 17);
        let base = loss(&a, &b, tau);
        prop_assert!(base > 0.0);
        prop_assert!((base - loss(&b, &a, tau)).abs() < 1e-12);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = loss(&permute_rows(&a, &perm), &permute_rows(&b, &perm), tau);
        prop_assert!((base - permuted).abs() < 1e-12);
    }
}

#[test]
fn split_sizes_and_determinism() {
    let (t, v) = split_indices(100, 3).unwrap();
    assert_eq!((t.len(), v.len()), (90, 10));
    assert_eq!(split_indices(100, 3).unwrap(), (t.clone(), v.clone()));
    let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split_indices(11, 0).unwrap().0.len(), 10);
    assert!(matches!(split_indices(9, 0), Err(TrainError::TooFewRecords { .. })));
    let (ta, _) = split_indices(1000, 1).unwrap();
    let (tb, _) = split_indices(1000, 2).unwrap();
    assert_ne!(ta, tb);
    let (items_t, items_v) = split_dataset(&(0..20).collect::<Vec<_>>(), 5).unwrap();
    assert_eq!((items_t.len(), items_v.len()), (18, 2));
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        sh_degree: 4,
        embed_dim: 8,
        gs_dim: 3,
        osm_dim: 3,
        gs_input_dim: 512,
        gs_hidden: 4,
        siren_widths: vec![6],
        osm_filters: vec![2, 2],
        fusion_width: 5,
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let world = synthesize_world(1, 10, 2).unwrap();
    let config = ModelConfig {
        gs_input_dim: 512,
        ..tiny_config()
    };
    let mut model = SpatialEmbeddingModel::new(config).unwrap();
    let recs: Vec<_> = world.records[..4].to_vec();
    let (le, _) = embed_pairs(&model, &recs).unwrap();
    assert_eq!(le.shape(), &[4, 8]);

    let coords: Vec<Coordinate> = recs.iter().map(|r| r.coordinate).collect();
    let osm: Vec<Vec<f64>> = recs.iter().map(|r| r.osm_values().unwrap()).collect();
    let osm_refs: Vec<&[f64]> = osm.iter().map(Vec::as_slice).collect();
    let gs_refs: Vec<&[f64]> = recs.iter().map(|r| r.gs_features.as_deref().unwrap()).collect();
    let batch = model
        .prepare_batch(&coords, Some(&osm_refs), Some(&gs_refs))
        .unwrap();

    let eval = |m: &SpatialEmbeddingModel| {
        let mut g = Graph::new(m.params());
        let (a, b) = m.forward(&mut g, &batch).unwrap();
        let l = contrastive_loss_graph(&mut g, a, b, 0.07).unwrap();
        (g.value(l).data()[0], g.backward(l).unwrap())
    };
    let (_, grads) = eval(&model);
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for k in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&model).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&model).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).data()[k];
            diff += (fd - an).powi(2);
            norm += fd.powi(2).max(an.powi(2));
        }
    }
    let rel = diff.sqrt() / norm.sqrt();
    assert!(rel < 1e-5, "relative error {rel}");
}

#[test]
fn patience_zero_stops_after_first_bad_epoch() {
    let config = ModelConfig {
        patience: 0,
        ..tiny_config()
    };
    let ps = ParamStore::new();
    let mut s = TrainState::new(&config, &ps);
    assert_eq!(s.observe(1.0), (true, false));
    assert_eq!(s.observe(0.5), (true, false));
    assert_eq!(s.observe(0.6), (false, true));
    assert_eq!(s.patience_counter(), 0);

    let patient = ModelConfig { patience: 2, ..config };
    let mut s = TrainState::new(&patient, &ps);
    s.observe(1.0);
    assert_eq!(s.observe(1.0), (false, false));
    assert_eq!(s.observe(1.0), (false, false));
    assert_eq!(s.observe(1.0), (false, true));
    assert!(s.patience_counter() <= 2);
}

#[test]
fn training_is_deterministic_and_keeps_best() {
    let world = synthesize_world(2, 80, 3).unwrap();
    let a = train(&world.records, &tiny_config()).unwrap();
    let b = train(&world.records, &tiny_config()).unwrap();
    assert_eq!(encode_checkpoint(&a.checkpoint), encode_checkpoint(&b.checkpoint));
    assert_eq!(a.log.len(), 3);
    let best = a
        .log
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.checkpoint.metadata.best_val_loss, best);
    assert_eq!((a.train_indices.len(), a.val_indices.len()), (72, 8));
    // reported best loss is reproduced by the stored parameters
    let line = a.log[0].to_json_line();
    assert!(line.contains("\"epoch\":1"), "{line}");
}

#[test]
fn exploding_step_reports_epoch_and_batch() {
    let world = synthesize_world(2, 80, 3).unwrap();
    let config = ModelConfig {
        learning_rate: 1e300,
        ..tiny_config()
    };
    match train(&world.records, &config) {
        Err(TrainError::NonFinite { epoch, batch }) => {
            assert_eq!(epoch, 1);
            assert!(batch >= 1, "batch {batch}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_view_is_rejected_before_training() {
    let mut world = synthesize_world(2, 30, 3).unwrap();
    world.records[4].gs_features = None;
    assert!(matches!(
        train(&world.records, &tiny_config()),
        Err(TrainError::Data(_))
    ));
}

#[test]
fn retrieval_extremes() {
    let z = random(64, 8, 9);
    assert_eq!(retrieval_accuracy_from(&z, &z, 64).unwrap(), 1.0);
    assert_eq!(retrieval_accuracy_from(&z, &z, 16).unwrap(), 1.0);
    let flat = Tensor::new(vec![10, 2], vec![1.0; 20]).unwrap();
    // every row ties; lowest index wins, so only row 0 of each batch hits
    assert_eq!(retrieval_accuracy_from(&flat, &flat, 5).unwrap(), 0.2);
    assert!(retrieval_accuracy_from(&z, &z, 65).is_err());
}

#[test]
fn untrained_model_retrieves_near_chance() {
    let world = synthesize_world(4, 640, 3).unwrap();
    let model = SpatialEmbeddingModel::new(tiny_config()).unwrap();
    let acc = retrieval_accuracy(&model, &world.records, 64).unwrap();
    assert!(acc < 0.08, "accuracy {acc}");
}
