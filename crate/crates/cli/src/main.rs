//! `mvse`: synthesize a world, train encoders, export embeddings, and run
//! probes, permutation importance and partial dependence.
//!
//! Every command writes `<out>.manifest` next to its main output. Set
//! `MVSE_LOG` (e.g. `info`) for progress logging.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mvse::contrastive::{retrieval_accuracy, split_indices, train};
use mvse::dataio::{
    load_checkpoint, load_dataset, save_checkpoint, synthesize_world, write_dataset,
    write_embeddings, LocationRecord,
};
use mvse::encoders::{ModelConfig, SpatialEmbeddingModel};
use mvse::eval::{
    embedding_features, emit_plot_data, labels, logistic_fit, mse, partial_dependence,
    permutation_importance, raw_location_features, region_holdout_split, ridge_fit,
    FeatureMatrix, ImportanceReport, PlotTable, Region, Regressor, LOCATION_GROUP,
};
use mvse::geogrid::Coordinate;

#[derive(Parser)]
#[command(name = "mvse", version, about = "Multi-view contrastive spatial embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with probe labels.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        regions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Preset name (e.g. EU8_GS32_OSM32) or a JSON config file.
        #[arg(long, default_value = "EU8_GS32_OSM32")]
        config: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location embeddings for a CSV of `id,lon,lat` (or `lon,lat`).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        coords: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ridge probe on raw coordinates vs embeddings, logistic probe on a
    /// class label, and retrieval accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "price")]
        label: String,
        #[arg(long)]
        class_label: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hold out records whose `region` label equals this value instead
        /// of a random split.
        #[arg(long)]
        holdout_region: Option<f64>,
        #[arg(long, default_value_t = 64)]
        retrieval_batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grouped permutation importance of the location features of a ridge probe.
    Vip {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Features::Raw)]
        features: Features,
        #[arg(long, default_value = "price")]
        label: String,
        /// Other labels used as extra probe covariates.
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partial dependence of a ridge probe on location over a coordinate grid.
    Pdp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Features::Raw)]
        features: Features,
        #[arg(long, default_value = "price")]
        label: String,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        /// CSV of `lon,lat` (optionally with a leading `id` column).
        #[arg(long)]
        grid: PathBuf,
        /// Average over the probe's fitting rows only.
        #[arg(long)]
        train_rows_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Features {
    Raw,
    Embedding,
}

/// `key=value` lines written beside each output.
struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut m = Self { entries: Vec::new() };
        m.push("command", command);
        m.push("tool_version", env!("CARGO_PKG_VERSION"));
        m.push("started", unix_seconds());
        m
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        self.entries.push((key.to_string(), value));
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.push(key, p.display());
    }

    fn write(mut self, out: &Path) -> Result<()> {
        self.push("finished", unix_seconds());
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(&format!("{k}={v}\n"));
        }
        let path = sidecar(out, "manifest");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn unix_seconds() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

fn resolve_config(name: &str) -> Result<ModelConfig> {
    if let Ok(c) = ModelConfig::preset(name) {
        return Ok(c);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("{name:?} is neither a preset nor a config file");
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {name}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {name}"))
}

fn read_points(path: &Path) -> Result<Vec<(String, Coordinate)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?
        .1
        .split(',')
        .map(str::trim)
        .collect();
    let has_id = match header.as_slice() {
        ["id", "lon", "lat"] => true,
        ["lon", "lat"] => false,
        _ => bail!("{}: header must be `id,lon,lat` or `lon,lat`", path.display()),
    };
    let mut points = Vec::new();
    for (n, (line_no, line)) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (id, lon, lat) = match (has_id, fields.as_slice()) {
            (true, [id, lon, lat]) => (id.to_string(), *lon, *lat),
            (false, [lon, lat]) => (format!("g{n}"), *lon, *lat),
            _ => bail!("{}: line {line_no} has the wrong number of fields", path.display()),
        };
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .with_context(|| format!("{}: line {line_no}: bad number {s:?}", path.display()))
        };
        let c = Coordinate::new(parse(lon)?, parse(lat)?)
            .with_context(|| format!("{}: line {line_no}", path.display()))?;
        points.push((id, c));
    }
    Ok(points)
}

/// Location features (raw or embedded) plus label covariates.
fn probe_features(
    records: &[LocationRecord],
    features: Features,
    model: Option<&SpatialEmbeddingModel>,
    covariates: &[String],
) -> Result<FeatureMatrix> {
    let location = match (features, model) {
        (Features::Raw, _) => raw_location_features(records)?,
        (Features::Embedding, Some(m)) => embedding_features(m, records)?,
        (Features::Embedding, None) => bail!("--features embedding needs --checkpoint"),
    };
    if covariates.is_empty() {
        return Ok(location);
    }
    let mut data = Vec::with_capacity(records.len() * covariates.len());
    for r in records {
        for name in covariates {
            data.push(
                r.label(name)
                    .with_context(|| format!("record {} has no label {name:?}", r.id))?,
            );
        }
    }
    let extra = FeatureMatrix::new(records.len(), covariates.to_vec(), data)?;
    Ok(location.hstack(&extra)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            count,
            regions,
            out,
        } => {
            let mut manifest = Manifest::new("synth");
            let world = synthesize_world(seed, count, regions)?;
            write_dataset(&out, &world.records)?;
            manifest.push("seed", seed);
            manifest.push("count", count);
            manifest.push("regions", regions);
            manifest.path("output", &out);
            manifest.write(&out)
        }
        Command::Train {
            data,
            config,
            epochs,
            seed,
            learning_rate,
            batch_size,
            patience,
            out,
        } => {
            let mut manifest = Manifest::new("train");
            let mut cfg = resolve_config(&config)?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = patience {
                cfg.patience = v;
            }
            let records = load_dataset(&data)?;
            let outcome = train(&records, &cfg)?;
            save_checkpoint(&out, &outcome.checkpoint)?;
            let log_path = sidecar(&out, "log.jsonl");
            let log: String = outcome
                .log
                .iter()
                .map(|e| e.to_json_line() + "\n")
                .collect();
            std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
            let meta = outcome.checkpoint.metadata;
            log::info!("best epoch {} val loss {}", meta.best_epoch, meta.best_val_loss);
            manifest.push("config", serde_json::to_string(&cfg)?);
            manifest.push("seed", cfg.seed);
            manifest.path("data", &data);
            manifest.path("output", &out);
            manifest.path("training_log", &log_path);
            manifest.push("best_epoch", meta.best_epoch);
            manifest.push("best_val_loss", meta.best_val_loss);
            manifest.write(&out)
        }
        Command::Embed {
            checkpoint,
            coords,
            out,
        } => {
            let mut manifest = Manifest::new("embed");
            let ckpt = load_checkpoint(&checkpoint)?;
            let points = read_points(&coords)?;
            write_embeddings(&out, &ckpt.model, &points)?;
            manifest.push("config", serde_json::to_string(ckpt.model.config())?);
            manifest.path("checkpoint", &checkpoint);
            manifest.path("coords", &coords);
            manifest.path("output", &out);
            manifest.push("rows", points.len());
            manifest.write(&out)
        }
        Command::Eval {
            checkpoint,
            data,
            label,
            class_label,
            lambda,
            seed,
            holdout_region,
            retrieval_batch,
            out,
        } => {
            let mut manifest = Manifest::new("eval");
            let ckpt = load_checkpoint(&checkpoint)?;
            let records = load_dataset(&data)?;
            let (fit_rows, test_rows) = match holdout_region {
                Some(r) => {
                    let region = Region::Label {
                        name: "region".into(),
                        value: r,
                    };
                    let split = region_holdout_split(&records, &region)?;
                    if split.empty_side {
                        bail!("region {r} leaves one side of the holdout empty");
                    }
                    (split.outside, split.inside)
                }
                None => split_indices(records.len(), seed)?,
            };
            let y = labels(&records, &label)?;
            let pick = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<f64>>();
            let mut table = vec![];
            for (name, x) in [
                ("raw", raw_location_features(&records)?),
                ("embedding", embedding_features(&ckpt.model, &records)?),
            ] {
                let probe = ridge_fit(&x.select_rows(&fit_rows), &pick(&fit_rows), lambda)?;
                let err = mse(&probe.predict(&x.select_rows(&test_rows)), &pick(&test_rows));
                table.push(format!("ridge,{name},{label},test_mse,{err}"));
                if let Some(cl) = &class_label {
                    let classes: Vec<i64> = labels(&records, cl)?.iter().map(|v| v.round() as i64).collect();
                    let fit_classes: Vec<i64> = fit_rows.iter().map(|&i| classes[i]).collect();
                    let test_classes: Vec<i64> = test_rows.iter().map(|&i| classes[i]).collect();
                    let lr = logistic_fit(&x.select_rows(&fit_rows), &fit_classes, 1e-4)?;
                    let acc = lr.accuracy(&x.select_rows(&test_rows), &test_classes);
                    table.push(format!("logistic,{name},{cl},test_accuracy,{acc}"));
                }
            }
            if records.len() >= retrieval_batch {
                let acc = retrieval_accuracy(&ckpt.model, &records, retrieval_batch)?;
                table.push(format!("retrieval,embedding,-,top1_batch_{retrieval_batch},{acc}"));
            }
            let text = format!("probe,features,target,metric,value\n{}\n", table.join("\n"));
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            manifest.path("checkpoint", &checkpoint);
            manifest.path("data", &data);
            manifest.push("seed", seed);
            manifest.push("lambda", lambda);
            manifest.path("output", &out);
            manifest.write(&out)
        }
        Command::Vip {
            data,
            checkpoint,
            features,
            label,
            covariates,
            lambda,
            seed,
            repeats,
            out,
        } => {
            let mut manifest = Manifest::new("vip");
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|c| c.model);
            let records = load_dataset(&data)?;
            let x = probe_features(&records, features, model.as_ref(), &covariates)?;
            let y = labels(&records, &label)?;
            let probe = ridge_fit(&x, &y, lambda)?;
            let mut reports = vec![permutation_importance(&probe, &x, LOCATION_GROUP, seed, repeats)?];
            for (j, name) in covariates.iter().enumerate() {
                let col = x.cols() - covariates.len() + j;
                let xg = x.clone().with_group(name, vec![col])?;
                reports.push(permutation_importance(&probe, &xg, name, seed, repeats)?);
            }
            std::fs::write(&out, ImportanceReport::to_table(&reports))
                .with_context(|| format!("writing {}", out.display()))?;
            manifest.path("data", &data);
            manifest.push("label", &label);
            manifest.push("seed", seed);
            manifest.push("repeats", repeats);
            manifest.path("output", &out);
            manifest.write(&out)
        }
        Command::Pdp {
            data,
            checkpoint,
            features,
            label,
            covariates,
            lambda,
            grid,
            train_rows_only,
            seed,
            out,
        } => {
            let mut manifest = Manifest::new("pdp");
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|c| c.model);
            let records = load_dataset(&data)?;
            let x = probe_features(&records, features, model.as_ref(), &covariates)?;
            let y = labels(&records, &label)?;
            let rows: Vec<usize> = if train_rows_only {
                split_indices(records.len(), seed)?.0
            } else {
                (0..records.len()).collect()
            };
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let probe = ridge_fit(&x.select_rows(&rows), &ys, lambda)?;
            let points: Vec<Coordinate> = read_points(&grid)?.into_iter().map(|(_, c)| c).collect();
            let embedder = match features {
                Features::Raw => None,
                Features::Embedding => model.as_ref(),
            };
            let pd = partial_dependence(&probe, &x, LOCATION_GROUP, &points, embedder, Some(&rows))?;
            let table: PlotTable = pd.to_plot_table();
            emit_plot_data(&table, &out)?;
            manifest.path("data", &data);
            manifest.path("grid", &grid);
            manifest.push("label", &label);
            manifest.push("train_rows_only", train_rows_only);
            manifest.push("seed", seed);
            manifest.path("output", &out);
            manifest.write(&out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MVSE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
