//! Acceptance suite. Each function covers one numbered criterion and prints
//! a single `criterion N: PASS|FAIL` line. Runs without the libtest harness
//! so the lines show up under a plain `cargo test`; pass criterion numbers
//! as arguments to run a subset.
//!
//! Criteria 5, 6 and 8 share five trained models (seeds 7 to 11, 100
//! epochs), so the first of them to run pays for training.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use mvse::autodiff::{Graph, ParamStore, Tensor, Var};
use mvse::contrastive::{
    contrastive_loss, contrastive_loss_graph, embed_pairs, retrieval_accuracy_from, split_indices,
    train, TrainOutcome,
};
use mvse::dataio::{
    dataset_to_string, decode_checkpoint, encode_checkpoint, export_embeddings,
    parse_dataset_bytes, synthesize_world, SyntheticWorld,
};
use mvse::encoders::{sh_basis, sh_basis_len, ModelConfig, SpatialEmbeddingModel};
use mvse::eval::{
    embedding_features, labels, mse, partial_dependence, permutation_importance,
    permutation_importance_with, raw_location_features, region_holdout_split, ridge_fit,
    FeatureMatrix, Region, Regressor,
};
use mvse::geogrid::{
    axial_cells, axial_distance, hex_to_square, square_filter_mask, Coordinate, H2Layout, HexGrid,
};
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

/// Normwise relative error between tape gradients and central differences,
/// worst over the parameter tensors of `params`.
fn fd_error(params: &ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let value = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let out = build(&mut g);
        g.value(out).data()[0]
    };
    let grads = {
        let mut g = Graph::new(params);
        let out = build(&mut g);
        g.backward(out).unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (k, &an) in grads.get(id).data().iter().enumerate() {
            let mut p = params.clone();
            let orig = p.get(id).data()[k];
            p.get_mut(id).data_mut()[k] = orig + h;
            let up = value(&p);
            p.get_mut(id).data_mut()[k] = orig - h;
            let down = value(&p);
            let fd = (up - down) / (2.0 * h);
            diff += (fd - an).powi(2);
            scale += fd.powi(2).max(an.powi(2));
        }
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale.sqrt());
        }
    }
    worst
}

/// Sum of `out` weighted by a fixed random tensor, so every output element
/// reaches the loss.
fn project(g: &mut Graph, out: Var) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, r).unwrap();
    g.sum(prod).unwrap()
}

fn op_level_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let a = ps.add("a", random_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let b = ps.add("b", random_tensor(&mut rng, &[4, 5], -1.0, 1.0));
    let c = ps.add("c", random_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let v = ps.add("v", random_tensor(&mut rng, &[4], -1.0, 1.0));
    // relu input kept away from the kink
    let mut away = random_tensor(&mut rng, &[3, 4], 0.1, 1.0);
    for (k, x) in away.data_mut().iter_mut().enumerate() {
        if k % 2 == 0 {
            *x = -*x;
        }
    }
    let r = ps.add("r", away);
    let x4 = ps.add("x4", random_tensor(&mut rng, &[2, 7, 7, 3], -1.0, 1.0));
    let w4 = ps.add("w4", random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0));
    let b4 = ps.add("b4", random_tensor(&mut rng, &[2], -1.0, 1.0));
    let gamma = ps.add("gamma", random_tensor(&mut rng, &[3], 0.5, 1.5));
    let beta = ps.add("beta", random_tensor(&mut rng, &[3], -1.0, 1.0));
    let sq = ps.add("sq", random_tensor(&mut rng, &[4, 4], -2.0, 2.0));
    let cell_mask = H2Layout::new(3).mask().as_slice().to_vec();
    let filter_mask = square_filter_mask(1).as_slice().to_vec();

    type Build = Box<dyn Fn(&mut Graph) -> Var>;
    let cases: Vec<(&'static str, Build)> = vec![
        ("matmul", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(b));
            let o = g.matmul(x, y).unwrap();
            project(g, o)
        })),
        ("transpose", Box::new(move |g| {
            let x = g.param(a);
            let o = g.transpose(x).unwrap();
            project(g, o)
        })),
        ("add", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(c));
            let o = g.add(x, y).unwrap();
            project(g, o)
        })),
        ("add_bias", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(v));
            let o = g.add_bias(x, y).unwrap();
            project(g, o)
        })),
        ("mul", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(c));
            let o = g.mul(x, y).unwrap();
            project(g, o)
        })),
        ("mul_broadcast", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(v));
            let o = g.mul_broadcast(x, y).unwrap();
            project(g, o)
        })),
        ("scale", Box::new(move |g| {
            let x = g.param(a);
            let o = g.scale(x, -2.5).unwrap();
            project(g, o)
        })),
        ("concat", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(c));
            let o = g.concat(&[x, y, x]).unwrap();
            project(g, o)
        })),
        ("reshape", Box::new(move |g| {
            let x = g.param(a);
            let o = g.reshape(x, &[2, 6]).unwrap();
            project(g, o)
        })),
        ("flatten", Box::new(move |g| {
            let x = g.param(x4);
            let o = g.flatten(x).unwrap();
            project(g, o)
        })),
        ("gather_cols", Box::new(move |g| {
            let x = g.param(a);
            let o = g.gather_cols(x, &[3, 0, 3]).unwrap();
            project(g, o)
        })),
        ("sin", Box::new(move |g| {
            let x = g.param(a);
            let o = g.sin(x).unwrap();
            project(g, o)
        })),
        ("relu", Box::new(move |g| {
            let x = g.param(r);
            let o = g.relu(x).unwrap();
            project(g, o)
        })),
        ("sum", Box::new(move |g| {
            let x = g.param(a);
            let s = g.sin(x).unwrap();
            g.sum(s).unwrap()
        })),
        ("mean", Box::new(move |g| {
            let x = g.param(a);
            let s = g.sin(x).unwrap();
            g.mean(s).unwrap()
        })),
        ("layer_norm_masked", {
            let cell_mask = cell_mask.clone();
            Box::new(move |g| {
                let (x, gm, bt) = (g.param(x4), g.param(gamma), g.param(beta));
                let o = g.layer_norm_masked(x, gm, bt, &cell_mask, 1e-5).unwrap();
                project(g, o)
            })
        }),
        ("masked_conv2d", Box::new(move |g| {
            let (x, w, bias) = (g.param(x4), g.param(w4), g.param(b4));
            let o = g.masked_conv2d(x, w, bias, &filter_mask, &cell_mask).unwrap();
            project(g, o)
        })),
        ("normalize_rows", Box::new(move |g| {
            let x = g.param(a);
            let o = g.normalize_rows(x).unwrap();
            project(g, o)
        })),
        ("symmetric_cross_entropy", Box::new(move |g| {
            let x = g.param(sq);
            g.symmetric_cross_entropy(x).unwrap()
        })),
    ];
    cases
        .into_iter()
        .map(|(name, build)| (name, fd_error(&ps, &*build)))
        .collect()
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        sh_degree: 4,
        embed_dim: 8,
        gs_dim: 3,
        osm_dim: 3,
        gs_hidden: 4,
        siren_widths: vec![6],
        osm_filters: vec![2, 2],
        fusion_width: 5,
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 3,
        seed,
        ..ModelConfig::preset("EU8_GS32_OSM32").unwrap()
    }
}

fn end_to_end_error() -> f64 {
    let world = synthesize_world(1, 10, 2).unwrap();
    let model = SpatialEmbeddingModel::new(small_config(5)).unwrap();
    let recs = &world.records[..4];
    let coords: Vec<Coordinate> = recs.iter().map(|r| r.coordinate).collect();
    let osm: Vec<Vec<f64>> = recs.iter().map(|r| r.osm_values().unwrap()).collect();
    let osm_refs: Vec<&[f64]> = osm.iter().map(Vec::as_slice).collect();
    let gs_refs: Vec<&[f64]> = recs.iter().map(|r| r.gs_features.as_deref().unwrap()).collect();
    let batch = model
        .prepare_batch(&coords, Some(&osm_refs), Some(&gs_refs))
        .unwrap();
    let tau = model.config().temperature;
    fd_error(model.params(), &|g| {
        let (le, mv) = model.forward(g, &batch).unwrap();
        contrastive_loss_graph(g, le, mv, tau).unwrap()
    })
}

fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let ops = op_level_errors();
    let (worst_op, worst) = ops
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let e2e = end_to_end_error();
    let secs = start.elapsed().as_secs_f64();
    let pass = ops.iter().all(|(_, e)| *e < 1e-6) && e2e < 1e-5 && secs < 120.0;
    report(
        1,
        pass,
        &format!(
            "{} ops, worst op {worst_op} rel err {worst:.2e} < 1e-6; end-to-end rel err {e2e:.2e} < 1e-5; {secs:.1}s",
            ops.len()
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Convolution computed directly on hex cells: a `kf`-ring filter is a map
/// from axial offsets to weight matrices, applied to every neighbour that
/// exists in the 3-ring grid.
fn brute_force_hex_conv(
    input: &HexGrid,
    weights: &BTreeMap<(i32, i32), Vec<f64>>,
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let cells = axial_cells(3);
    let c_in = input.channels();
    let index: BTreeMap<(i32, i32), usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut out = vec![0.0; cells.len() * c_out];
    for (i, &(q, r)) in cells.iter().enumerate() {
        for o in 0..c_out {
            let mut acc = bias[o];
            for (&(dq, dr), w) in weights {
                if let Some(&j) = index.get(&(q + dq, r + dr)) {
                    let x = input.cell(j);
                    for ch in 0..c_in {
                        acc += w[o * c_in + ch] * x[ch];
                    }
                }
            }
            out[i * c_out + o] = acc;
        }
    }
    out
}

fn conv_deviation(rng: &mut ChaCha8Rng, kf: usize) -> f64 {
    let (c_in, c_out) = (6, 4);
    let values: Vec<f64> = (0..37 * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = HexGrid::new(3, c_in, values).unwrap();
    let k = kf as i32;
    let mut weights = BTreeMap::new();
    for dq in -k..=k {
        for dr in -k..=k {
            if axial_distance(dq, dr) <= k {
                weights.insert((dq, dr), (0..c_out * c_in).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
        }
    }
    let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let expected = brute_force_hex_conv(&input, &weights, &bias, c_out);

    // Square filter: an axial offset (dq, dr) sits at row k - dr, column k + dq.
    let side = 2 * kf + 1;
    let mut filt = vec![0.0; c_out * side * side * c_in];
    for (&(dq, dr), w) in &weights {
        let tap = (k - dr) as usize * side + (k + dq) as usize;
        for o in 0..c_out {
            for ch in 0..c_in {
                filt[(o * side * side + tap) * c_in + ch] = w[o * c_in + ch];
            }
        }
    }
    let square = hex_to_square(&input);
    let layout = H2Layout::new(3);
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::new(vec![1, 7, 7, c_in], square.into_values()).unwrap());
    let w = ps.add("w", Tensor::new(vec![c_out, side, side, c_in], filt).unwrap());
    let b = ps.add("b", Tensor::vector(bias));
    let mut g = Graph::new(&ps);
    let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
    let out = g
        .masked_conv2d(xv, wv, bv, square_filter_mask(kf).as_slice(), layout.mask().as_slice())
        .unwrap();
    let got = g.value(out).data();
    let mut dev: f64 = 0.0;
    for (i, flat) in layout.flat_indices().into_iter().enumerate() {
        for o in 0..c_out {
            dev = dev.max((got[flat * c_out + o] - expected[i * c_out + o]).abs());
        }
    }
    dev
}

fn criterion_02_hex_conv_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for kf in [1, 2] {
        for _ in 0..100 {
            worst = worst.max(conv_deviation(&mut rng, kf));
        }
    }
    report(2, worst < 1e-12, &format!("200 inputs, k in {{1,2}}, max abs deviation {worst:.2e} < 1e-12"));
}

// ---------------------------------------------------------------- 3

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn quadrature_deviation(max_degree: usize) -> f64 {
    let m = sh_basis_len(max_degree);
    // exact for polynomial degree 2L in cos(polar) and trigonometric degree 2L in lon
    let nodes = gauss_legendre(max_degree + 1);
    let n_lon = 2 * max_degree + 2;
    let mut gram = vec![0.0; m * m];
    for &(z, wz) in &nodes {
        let lat = z.asin().to_degrees();
        for j in 0..n_lon {
            let lon = -180.0 + 360.0 * j as f64 / n_lon as f64;
            let y = sh_basis(&Coordinate::new(lon, lat).unwrap(), max_degree);
            let w = wz * 2.0 * PI / n_lon as f64;
            for a in 0..m {
                for b in a..m {
                    gram[a * m + b] += w * y[a] * y[b];
                }
            }
        }
    }
    let mut dev: f64 = 0.0;
    for a in 0..m {
        for b in a..m {
            let delta = if a == b { 1.0 } else { 0.0 };
            dev = dev.max((gram[a * m + b] - delta).abs());
        }
    }
    dev
}

fn monte_carlo_deviation(max_degree: usize, points: usize) -> f64 {
    let m = sh_basis_len(max_degree);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gram = Array2::<f64>::zeros((m, m));
    let chunk = 10_000;
    let mut done = 0;
    while done < points {
        let rows = chunk.min(points - done);
        let mut y = Array2::<f64>::zeros((rows, m));
        for mut row in y.rows_mut() {
            // uniform on the sphere: z = sin(lat) uniform on [-1, 1]
            let z: f64 = rng.random_range(-1.0..=1.0);
            let lon: f64 = rng.random_range(-180.0..180.0);
            let c = Coordinate::new(lon, z.asin().to_degrees()).unwrap();
            row.assign(&ndarray::Array1::from(sh_basis(&c, max_degree)));
        }
        gram += &y.t().dot(&y);
        done += rows;
    }
    gram *= 4.0 * PI / points as f64;
    gram.indexed_iter()
        .map(|((a, b), v)| (v - if a == b { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn criterion_03_harmonic_orthonormality() {
    let start = Instant::now();
    let quad = (0..=8).map(quadrature_deviation).fold(0.0, f64::max);
    let mc = monte_carlo_deviation(20, 200_000);
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        quad < 1e-8 && mc < 0.02 && secs < 60.0,
        &format!("quadrature L<=8 max dev {quad:.2e} < 1e-8; Monte Carlo L=20, 200000 points, max dev {mc:.4} < 0.02; {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 4

fn criterion_04_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = random_tensor(&mut rng, &[1, 5], -1.0, 1.0);
    let other = random_tensor(&mut rng, &[1, 5], -1.0, 1.0);
    let n1 = contrastive_loss(&one, &other, 0.07).unwrap();

    let e = Tensor::identity(2);
    let n2 = contrastive_loss(&e, &e, 1.0).unwrap();

    let (mut sym, mut perm): (f64, f64) = (0.0, 0.0);
    for trial in 0..50 {
        let n = 2 + trial % 9;
        let a = random_tensor(&mut rng, &[n, 6], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[n, 6], -1.0, 1.0);
        let base = contrastive_loss(&a, &b, 0.07).unwrap();
        sym = sym.max((base - contrastive_loss(&b, &a, 0.07).unwrap()).abs());
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        let permute = |t: &Tensor| {
            Tensor::from_rows(&p.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        perm = perm.max((base - contrastive_loss(&permute(&a), &permute(&b), 0.07).unwrap()).abs());
    }
    let pass = n1 == 0.0 && (n2 - 0.3132617).abs() < 1e-6 && sym < 1e-12 && perm < 1e-12;
    report(
        4,
        pass,
        &format!("N=1 loss {n1}; N=2 loss {n2:.9}; view swap dev {sym:.1e}; permutation dev {perm:.1e}"),
    );
}

// ---------------------------------------------------------------- 5, 6, 8

struct Run {
    world: SyntheticWorld,
    outcome: TrainOutcome,
    secs: f64,
}

const SEEDS: [u64; 5] = [7, 8, 9, 10, 11];

fn runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let world = synthesize_world(seed, 2000, 5).unwrap();
                let config = ModelConfig {
                    epochs: 100,
                    seed,
                    ..ModelConfig::preset("EU8_GS32_OSM32").unwrap()
                };
                let start = Instant::now();
                let outcome = train(&world.records, &config).unwrap();
                let secs = start.elapsed().as_secs_f64();
                eprintln!(
                    "seed {seed}: best epoch {} val {:.4} in {secs:.0}s",
                    outcome.checkpoint.metadata.best_epoch, outcome.checkpoint.metadata.best_val_loss
                );
                Run { world, outcome, secs }
            })
            .collect()
    })
}

fn criterion_05_training_signal() {
    let run = &runs()[0];
    let first = run.outcome.log[0].val_loss;
    let best = run.outcome.checkpoint.metadata.best_val_loss;
    let held_out: Vec<_> = run
        .outcome
        .val_indices
        .iter()
        .map(|&i| run.world.records[i].clone())
        .collect();
    let (le, mv) = embed_pairs(&run.outcome.checkpoint.model, &held_out).unwrap();
    let acc = retrieval_accuracy_from(&le, &mv, 64).unwrap();
    let pass = best < 0.7 * first && acc >= 10.0 / 64.0 && run.secs < 600.0;
    report(
        5,
        pass,
        &format!(
            "seed 7: epoch-1 val {first:.4}, best val {best:.4} (ratio {:.3} < 0.7); held-out top-1 retrieval {acc:.3} >= 0.156; {:.0}s",
            best / first,
            run.secs
        ),
    );
}

fn probe_mse(x: &FeatureMatrix, y: &[f64], fit: &[usize], test: &[usize]) -> f64 {
    let pick = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<f64>>();
    let probe = ridge_fit(&x.select_rows(fit), &pick(fit), 1e-3).unwrap();
    mse(&probe.predict(&x.select_rows(test)), &pick(test))
}

fn criterion_06_embeddings_beat_coordinates() {
    let mut wins = 0;
    let mut detail = Vec::new();
    for (run, seed) in runs().iter().zip(SEEDS) {
        let records = &run.world.records;
        let y = labels(records, "price").unwrap();
        let (fit, test) = split_indices(records.len(), seed + 100).unwrap();
        let raw = probe_mse(&raw_location_features(records).unwrap(), &y, &fit, &test);
        let emb = probe_mse(
            &embedding_features(&run.outcome.checkpoint.model, records).unwrap(),
            &y,
            &fit,
            &test,
        );
        if emb < raw {
            wins += 1;
        }
        detail.push(format!("seed {seed} raw {raw:.4} emb {emb:.4}"));
    }
    report(6, wins >= 4, &format!("{wins}/5 seeds: {}", detail.join("; ")));
}

fn criterion_08_transfer_to_held_out_region() {
    let mut wins = 0;
    let mut detail = Vec::new();
    for (run, seed) in runs().iter().zip(SEEDS) {
        let records = &run.world.records;
        let y = labels(records, "price").unwrap();
        let region = Region::Label {
            name: "region".into(),
            value: 0.0,
        };
        let split = region_holdout_split(records, &region).unwrap();
        assert!(!split.empty_side);
        let raw = probe_mse(&raw_location_features(records).unwrap(), &y, &split.outside, &split.inside);
        let emb = probe_mse(
            &embedding_features(&run.outcome.checkpoint.model, records).unwrap(),
            &y,
            &split.outside,
            &split.inside,
        );
        if emb < raw {
            wins += 1;
        }
        detail.push(format!("seed {seed} n={} raw {raw:.4} emb {emb:.4}", split.inside.len()));
    }
    report(8, wins >= 4, &format!("{wins}/5 seeds, region 0 held out: {}", detail.join("; ")));
}

// ---------------------------------------------------------------- 7

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_07_interpretation_tools() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // an ignored group contributes nothing
    let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let x = FeatureMatrix::from_rows(&rows, (0..4).map(|i| format!("x{i}")).collect())
        .unwrap()
        .with_group("used", vec![0, 1])
        .unwrap()
        .with_group("ignored", vec![2, 3])
        .unwrap();
    let model = |r: &[f64]| 1.5 * r[0] - r[1] * r[1] + 0.3;
    let ignored = permutation_importance(&model, &x, "ignored", 11, 20).unwrap().value;

    // exhaustive oracle over all 6! permutations, group values moved jointly
    let small: Vec<Vec<f64>> = rows[..6].to_vec();
    let xs = FeatureMatrix::from_rows(&small, (0..4).map(|i| format!("x{i}")).collect())
        .unwrap()
        .with_group("used", vec![0, 1])
        .unwrap();
    let perms = all_permutations(6);
    let got = permutation_importance_with(&model, &xs, "used", &perms).unwrap();
    let mut oracle = 0.0;
    for p in &perms {
        let mut change = 0.0;
        for i in 0..6 {
            let mut row = small[i].clone();
            row[0] = small[p[i]][0];
            row[1] = small[p[i]][1];
            change += (model(&row) - model(&small[i])).abs();
        }
        oracle += change / 6.0;
    }
    oracle /= perms.len() as f64;
    let exhaustive = (got - oracle).abs();

    // PD double-loop oracle on raw coordinates, N = 50, 20 points
    let coords: Vec<Vec<f64>> = (0..50)
        .map(|_| vec![rng.random_range(-10.0..30.0), rng.random_range(36.0..60.0), rng.random_range(0.0..1.0)])
        .collect();
    let xp = FeatureMatrix::from_rows(&coords, vec!["lon".into(), "lat".into(), "z".into()])
        .unwrap()
        .with_group("location", vec![0, 1])
        .unwrap();
    let pd_model = |r: &[f64]| (r[0] * 0.1).sin() * r[2] + 0.01 * r[1] * r[1];
    let points: Vec<Coordinate> = (0..20)
        .map(|i| Coordinate::new(-10.0 + 2.0 * i as f64, 36.0 + 1.2 * i as f64).unwrap())
        .collect();
    let pd = partial_dependence(&pd_model, &xp, "location", &points, None, None).unwrap();
    let mut pd_dev: f64 = 0.0;
    for (pt, &v) in points.iter().zip(&pd.values) {
        let mut sum = 0.0;
        for r in &coords {
            sum += pd_model(&[pt.lon(), pt.lat(), r[2]]);
        }
        pd_dev = pd_dev.max((v - sum / 50.0).abs());
    }

    let constant = |_: &[f64]| 4.25;
    let flat = partial_dependence(&constant, &xp, "location", &points, None, None).unwrap();
    let is_flat = flat.values.iter().all(|&v| v == 4.25);

    let pass = ignored == 0.0 && exhaustive < 1e-12 && pd_dev < 1e-12 && is_flat;
    report(
        7,
        pass,
        &format!(
            "ignored group importance {ignored}; exhaustive 720-permutation dev {exhaustive:.1e}; PD oracle dev {pd_dev:.1e}; constant PD flat {is_flat}"
        ),
    );
}

// ---------------------------------------------------------------- 9

fn criterion_09_determinism_and_formats() {
    let world = synthesize_world(9, 300, 3).unwrap();
    let train_once = || {
        let out = train(&world.records, &small_config(21)).unwrap();
        encode_checkpoint(&out.checkpoint)
    };
    let (a, b) = (train_once(), train_once());
    let same_ckpt = a == b;

    let decoded = decode_checkpoint(&a).unwrap();
    let round_trip = encode_checkpoint(&decoded) == a;
    let points: Vec<(String, Coordinate)> = world.records[..25]
        .iter()
        .map(|r| (r.id.clone(), r.coordinate))
        .collect();
    let export_a = export_embeddings(&decode_checkpoint(&a).unwrap().model, &points).unwrap();
    let export_b = export_embeddings(&decode_checkpoint(&b).unwrap().model, &points).unwrap();
    let same_export = export_a == export_b;

    // random byte mutations of a valid dataset and checkpoint must be
    // rejected or parsed, never panic
    let dataset = dataset_to_string(&world.records[..5]).into_bytes();
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        rng_seed: proptest::test_runner::RngSeed::Fixed(9),
        failure_persistence: None,
        ..PropConfig::default()
    });
    let edits = prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..8);
    let fuzz = runner.run(&edits, |edits| {
        for (target, bytes) in [(0, dataset.clone()), (1, a.clone())] {
            let mut m = bytes;
            for (idx, byte, kind) in &edits {
                let i = idx.index(m.len());
                match kind {
                    0 => m[i] = *byte,
                    1 => m.truncate(i),
                    _ => m.insert(i, *byte),
                }
                if m.is_empty() {
                    break;
                }
            }
            if target == 0 {
                let _ = parse_dataset_bytes(&m);
            } else {
                let _ = decode_checkpoint(&m);
            }
        }
        Ok(())
    });
    let fuzz_ok = fuzz.is_ok();
    let pass = same_ckpt && round_trip && same_export && fuzz_ok;
    report(
        9,
        pass,
        &format!(
            "identical checkpoints {same_ckpt}; bit-exact round trip {round_trip}; identical exports {same_export}; 1000 fuzz cases without panic {fuzz_ok}"
        ),
    );
}

// ---------------------------------------------------------------- 10

fn criterion_10_embedding_latency() {
    let config = ModelConfig {
        sh_degree: 16,
        ..ModelConfig::preset("EU64_GS64").unwrap()
    };
    assert_eq!(config.embed_dim, 64);
    let model = SpatialEmbeddingModel::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let coords: Vec<Coordinate> = (0..1000)
        .map(|_| Coordinate::new(rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0)).unwrap())
        .collect();
    for c in &coords[..50] {
        model.location_encode(c).unwrap();
    }
    let mut times: Vec<f64> = coords
        .iter()
        .map(|c| {
            let t = Instant::now();
            std::hint::black_box(model.location_encode(c).unwrap());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    report(
        10,
        median < 1.0,
        &format!("L=16, d=64, median {median:.4} ms < 1 ms over 1000 calls (p99 {:.4} ms)", times[989]),
    );
}

fn main() {
    let criteria: [(u32, fn()); 10] = [
        (1, criterion_01_gradient_correctness),
        (2, criterion_02_hex_conv_oracle),
        (3, criterion_03_harmonic_orthonormality),
        (4, criterion_04_loss_identities),
        (5, criterion_05_training_signal),
        (6, criterion_06_embeddings_beat_coordinates),
        (7, criterion_07_interpretation_tools),
        (8, criterion_08_transfer_to_held_out_region),
        (9, criterion_09_determinism_and_formats),
        (10, criterion_10_embedding_latency),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        if std::panic::catch_unwind(run).is_err() {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
