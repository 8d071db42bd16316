use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::geogrid::{hex_cell_count, square_filter_mask, Coordinate, H2Layout};

use super::{sh_basis_into, sh_basis_len, EncoderError, ModelConfig};

/// Rings of the OSM count grid around each location.
pub const OSM_RINGS: usize = 3;
/// Tag categories per hex cell.
pub const OSM_CHANNELS: usize = 6;
/// Hex cells per OSM grid (37).
pub const OSM_CELLS: usize = 3 * OSM_RINGS * (OSM_RINGS + 1) + 1;

const LAYER_NORM_EPS: f64 = 1e-5;

/// A `d`-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Input standardisation fitted on the training split: per-channel mean and
/// standard deviation of `log(1 + count)` for OSM, per-dimension for GS.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub osm_mean: Vec<f64>,
    pub osm_std: Vec<f64>,
    pub gs_mean: Vec<f64>,
    pub gs_std: Vec<f64>,
}

impl NormStats {
    /// Zero means and unit deviations.
    pub fn identity(config: &ModelConfig) -> Self {
        let gs = if config.gs_enabled() { config.gs_input_dim } else { 0 };
        let osm = if config.osm_enabled() { OSM_CHANNELS } else { 0 };
        Self {
            osm_mean: vec![0.0; osm],
            osm_std: vec![1.0; osm],
            gs_mean: vec![0.0; gs],
            gs_std: vec![1.0; gs],
        }
    }

    /// Fits the statistics of the enabled views. Slices are flat OSM count
    /// grids (`37 x 6`, cell-major) and GS feature vectors.
    pub fn fit<'a>(
        config: &ModelConfig,
        osm_counts: impl IntoIterator<Item = &'a [f64]>,
        gs_features: impl IntoIterator<Item = &'a [f64]>,
    ) -> Self {
        let mut stats = Self::identity(config);
        if config.osm_enabled() {
            let mut sum = [0.0; OSM_CHANNELS];
            let mut sq = [0.0; OSM_CHANNELS];
            let mut n = 0usize;
            for grid in osm_counts {
                for cell in grid.chunks(OSM_CHANNELS) {
                    for (ch, &count) in cell.iter().enumerate() {
                        let v = count.ln_1p();
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
                n += OSM_CELLS;
            }
            if n > 0 {
                for ch in 0..OSM_CHANNELS {
                    let (mean, std) = mean_std(sum[ch], sq[ch], n);
                    stats.osm_mean[ch] = mean;
                    stats.osm_std[ch] = std;
                }
            }
        }
        if config.gs_enabled() {
            let dim = config.gs_input_dim;
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            let mut n = 0usize;
            for f in gs_features {
                for (j, &v) in f.iter().enumerate().take(dim) {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
            if n > 0 {
                for j in 0..dim {
                    let (mean, std) = mean_std(sum[j], sq[j], n);
                    stats.gs_mean[j] = mean;
                    stats.gs_std[j] = std;
                }
            }
        }
        stats
    }
}

fn mean_std(sum: f64, sq: f64, n: usize) -> (f64, f64) {
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Encoder inputs for a batch, already standardised and laid out for the
/// network.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// `[batch, (L+1)^2]` spherical harmonics.
    pub basis: Tensor,
    /// `[batch, 7, 7, 6]` h2-mapped, standardised log counts.
    pub osm: Option<Tensor>,
    /// `[batch, F]` standardised satellite features.
    pub gs: Option<Tensor>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.basis.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Dense,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    pe_weights: ParamId,
    siren: Vec<Dense>,
    le_out: Dense,
    osm_convs: Vec<ConvBlock>,
    osm_out: Option<Dense>,
    gs_hidden: Option<Dense>,
    gs_out: Option<Dense>,
    fusion_hidden: Dense,
    fusion_out: Dense,
}

/// Expected parameter names and shapes for a config, in registration order.
fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut layout = Vec::new();
    let n_sh = sh_basis_len(config.sh_degree);
    layout.push(("le.pe_weights".to_string(), vec![n_sh], Init::Ones));
    let mut fan_in = n_sh;
    for (i, &width) in config.siren_widths.iter().enumerate() {
        let init = if i == 0 {
            Init::Uniform(1.0 / fan_in as f64)
        } else {
            Init::Uniform((6.0 / fan_in as f64).sqrt() / config.siren_omega0)
        };
        layout.push((format!("le.siren.{i}.weight"), vec![fan_in, width], init));
        layout.push((
            format!("le.siren.{i}.bias"),
            vec![width],
            Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        ));
        fan_in = width;
    }
    layout.push((
        "le.out.weight".to_string(),
        vec![fan_in, config.embed_dim],
        Init::Uniform((6.0 / fan_in as f64).sqrt() / config.siren_omega0),
    ));
    layout.push((
        "le.out.bias".to_string(),
        vec![config.embed_dim],
        Init::Uniform(1.0 / (fan_in as f64).sqrt()),
    ));

    if config.osm_enabled() {
        let side = 2 * config.osm_filter_rings + 1;
        let taps = hex_cell_count(config.osm_filter_rings);
        let mut c_in = OSM_CHANNELS;
        for (i, &c_out) in config.osm_filters.iter().enumerate() {
            let bound = 1.0 / ((taps * c_in) as f64).sqrt();
            layout.push((format!("osm.conv.{i}.weight"), vec![c_out, side, side, c_in], Init::Uniform(bound)));
            layout.push((format!("osm.conv.{i}.bias"), vec![c_out], Init::Uniform(bound)));
            layout.push((format!("osm.norm.{i}.gamma"), vec![c_out], Init::Ones));
            layout.push((format!("osm.norm.{i}.beta"), vec![c_out], Init::Zeros));
            c_in = c_out;
        }
        let flat = OSM_CELLS * c_in;
        dense_layout(&mut layout, "osm.out", flat, config.osm_dim);
    }
    if config.gs_enabled() {
        dense_layout(&mut layout, "gs.hidden", config.gs_input_dim, config.gs_hidden);
        dense_layout(&mut layout, "gs.out", config.gs_hidden, config.gs_dim);
    }
    dense_layout(
        &mut layout,
        "fusion.hidden",
        config.gs_dim + config.osm_dim,
        config.fusion_width,
    );
    dense_layout(&mut layout, "fusion.out", config.fusion_width, config.embed_dim);
    layout
}

fn dense_layout(layout: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    layout.push((format!("{name}.weight"), vec![fan_in, fan_out], Init::Uniform(bound)));
    layout.push((format!("{name}.bias"), vec![fan_out], Init::Uniform(bound)));
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Ones,
    Zeros,
    Uniform(f64),
}

/// Location encoder, view encoders and fusion head with their parameters
/// and input statistics.
#[derive(Debug, Clone)]
pub struct SpatialEmbeddingModel {
    config: ModelConfig,
    params: ParamStore,
    stats: NormStats,
    ids: ParamIds,
    layout: H2Layout,
    cell_mask: Vec<bool>,
    filter_mask: Vec<bool>,
    /// Columns of the flattened `[7*7*C]` conv output that sit on hex cells.
    valid_cols: Vec<usize>,
}

impl SpatialEmbeddingModel {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            };
            params.add(name, Tensor::new(shape, data)?);
        }
        let stats = NormStats::identity(&config);
        Self::from_parts(config, params, stats)
    }

    /// Reassembles a model from stored parts, checking every expected
    /// parameter is present with the expected shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        stats: NormStats,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(EncoderError::Parameter {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", layout.len(), params.len()),
            });
        }
        for (name, shape, _) in &layout {
            let id = params.id(name).ok_or_else(|| EncoderError::Parameter {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(EncoderError::Parameter {
                    name: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", params.get(id).shape(), shape),
                });
            }
        }
        let reference = NormStats::identity(&config);
        if stats.osm_mean.len() != reference.osm_mean.len()
            || stats.osm_std.len() != reference.osm_std.len()
            || stats.gs_mean.len() != reference.gs_mean.len()
            || stats.gs_std.len() != reference.gs_std.len()
        {
            return Err(EncoderError::Parameter {
                name: "normalization".into(),
                reason: "statistics do not match the enabled views".into(),
            });
        }

        let id = |name: &str| params.id(name).expect("checked above");
        let dense = |prefix: &str| Dense {
            weight: id(&format!("{prefix}.weight")),
            bias: id(&format!("{prefix}.bias")),
        };
        let ids = ParamIds {
            pe_weights: id("le.pe_weights"),
            siren: (0..config.siren_widths.len())
                .map(|i| dense(&format!("le.siren.{i}")))
                .collect(),
            le_out: dense("le.out"),
            osm_convs: if config.osm_enabled() {
                (0..config.osm_filters.len())
                    .map(|i| ConvBlock {
                        conv: dense(&format!("osm.conv.{i}")),
                        gamma: id(&format!("osm.norm.{i}.gamma")),
                        beta: id(&format!("osm.norm.{i}.beta")),
                    })
                    .collect()
            } else {
                Vec::new()
            },
            osm_out: config.osm_enabled().then(|| dense("osm.out")),
            gs_hidden: config.gs_enabled().then(|| dense("gs.hidden")),
            gs_out: config.gs_enabled().then(|| dense("gs.out")),
            fusion_hidden: dense("fusion.hidden"),
            fusion_out: dense("fusion.out"),
        };

        let h2 = H2Layout::new(OSM_RINGS);
        let cell_mask = h2.mask().as_slice().to_vec();
        let filter_mask = square_filter_mask(config.osm_filter_rings).as_slice().to_vec();
        let last_channels = *config.osm_filters.last().unwrap_or(&0);
        let valid_cols = h2
            .flat_indices()
            .into_iter()
            .flat_map(|cell| (0..last_channels).map(move |ch| cell * last_channels + ch))
            .collect();
        Ok(Self {
            config,
            params,
            stats,
            ids,
            layout: h2,
            cell_mask,
            filter_mask,
            valid_cols,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: NormStats) -> Result<(), EncoderError> {
        let reference = NormStats::identity(&self.config);
        if stats.osm_mean.len() != reference.osm_mean.len()
            || stats.gs_mean.len() != reference.gs_mean.len()
        {
            return Err(EncoderError::Parameter {
                name: "normalization".into(),
                reason: "statistics do not match the enabled views".into(),
            });
        }
        self.stats = stats;
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    // ---- input preparation ----

    pub fn prepare_basis(&self, coords: &[Coordinate]) -> Tensor {
        let n = sh_basis_len(self.config.sh_degree);
        let mut data = vec![0.0; coords.len() * n];
        for (c, row) in coords.iter().zip(data.chunks_mut(n)) {
            sh_basis_into(c, self.config.sh_degree, row);
        }
        Tensor::new(vec![coords.len(), n], data).expect("sized above")
    }

    /// h2-mapped standardised `log(1 + count)` grids. Each slice holds the
    /// 37 x 6 counts in canonical ring order.
    pub fn prepare_osm(&self, grids: &[&[f64]]) -> Result<Tensor, EncoderError> {
        if !self.config.osm_enabled() {
            return Err(EncoderError::ViewDisabled { view: "OSM" });
        }
        let side = self.layout.side();
        let per = side * side * OSM_CHANNELS;
        let mut data = vec![0.0; grids.len() * per];
        for (grid, out) in grids.iter().zip(data.chunks_mut(per)) {
            if grid.len() != OSM_CELLS * OSM_CHANNELS {
                return Err(EncoderError::Dimension {
                    what: "OSM counts",
                    expected: OSM_CELLS * OSM_CHANNELS,
                    actual: grid.len(),
                });
            }
            for (cell, &(row, col)) in self.layout.positions().iter().enumerate() {
                let base = (row * side + col) * OSM_CHANNELS;
                for ch in 0..OSM_CHANNELS {
                    let v = grid[cell * OSM_CHANNELS + ch].ln_1p();
                    out[base + ch] = (v - self.stats.osm_mean[ch]) / self.stats.osm_std[ch];
                }
            }
        }
        Ok(Tensor::new(vec![grids.len(), side, side, OSM_CHANNELS], data)?)
    }

    pub fn prepare_gs(&self, features: &[&[f64]]) -> Result<Tensor, EncoderError> {
        if !self.config.gs_enabled() {
            return Err(EncoderError::ViewDisabled { view: "GS" });
        }
        let dim = self.config.gs_input_dim;
        let mut data = Vec::with_capacity(features.len() * dim);
        for f in features {
            if f.len() != dim {
                return Err(EncoderError::Dimension {
                    what: "GS features",
                    expected: dim,
                    actual: f.len(),
                });
            }
            data.extend(
                f.iter()
                    .zip(&self.stats.gs_mean)
                    .zip(&self.stats.gs_std)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        Ok(Tensor::new(vec![features.len(), dim], data)?)
    }

    /// Prepares every input the enabled views need.
    pub fn prepare_batch(
        &self,
        coords: &[Coordinate],
        osm: Option<&[&[f64]]>,
        gs: Option<&[&[f64]]>,
    ) -> Result<PreparedBatch, EncoderError> {
        let osm = match (self.config.osm_enabled(), osm) {
            (true, Some(grids)) => Some(self.prepare_osm(grids)?),
            (true, None) => {
                return Err(EncoderError::Config("OSM counts required by this model".into()))
            }
            (false, _) => None,
        };
        let gs = match (self.config.gs_enabled(), gs) {
            (true, Some(f)) => Some(self.prepare_gs(f)?),
            (true, None) => {
                return Err(EncoderError::Config("GS features required by this model".into()))
            }
            (false, _) => None,
        };
        Ok(PreparedBatch {
            basis: self.prepare_basis(coords),
            osm,
            gs,
        })
    }

    // ---- graph forward passes ----

    fn dense(&self, g: &mut Graph, x: Var, layer: Dense) -> Result<Var, EncoderError> {
        let w = g.param(layer.weight);
        let b = g.param(layer.bias);
        let z = g.matmul(x, w)?;
        Ok(g.add_bias(z, b)?)
    }

    /// Sinusoidal network on already weighted harmonics `[batch, (L+1)^2]`.
    pub fn siren_graph(&self, g: &mut Graph, x: Var) -> Result<Var, EncoderError> {
        let mut h = x;
        for &layer in &self.ids.siren {
            let z = self.dense(g, h, layer)?;
            let z = g.scale(z, self.config.siren_omega0)?;
            h = g.sin(z)?;
        }
        self.dense(g, h, self.ids.le_out)
    }

    /// Location encoder on a `[batch, (L+1)^2]` basis tensor.
    pub fn location_graph(&self, g: &mut Graph, basis: Var) -> Result<Var, EncoderError> {
        let w = g.param(self.ids.pe_weights);
        let pe = g.mul_broadcast(basis, w)?;
        self.siren_graph(g, pe)
    }

    /// OSM encoder on `[batch, 7, 7, 6]` prepared grids.
    pub fn osm_graph(&self, g: &mut Graph, squares: Var) -> Result<Var, EncoderError> {
        let head = self.ids.osm_out.ok_or(EncoderError::ViewDisabled { view: "OSM" })?;
        let mut h = squares;
        for block in &self.ids.osm_convs {
            let w = g.param(block.conv.weight);
            let b = g.param(block.conv.bias);
            let z = g.masked_conv2d(h, w, b, &self.filter_mask, &self.cell_mask)?;
            let gamma = g.param(block.gamma);
            let beta = g.param(block.beta);
            let z = g.layer_norm_masked(z, gamma, beta, &self.cell_mask, LAYER_NORM_EPS)?;
            h = g.relu(z)?;
        }
        let flat = g.flatten(h)?;
        let cells = g.gather_cols(flat, &self.valid_cols)?;
        self.dense(g, cells, head)
    }

    /// Satellite projection on `[batch, F]` prepared features.
    pub fn gs_graph(&self, g: &mut Graph, features: Var) -> Result<Var, EncoderError> {
        let (hidden, out) = match (self.ids.gs_hidden, self.ids.gs_out) {
            (Some(h), Some(o)) => (h, o),
            _ => return Err(EncoderError::ViewDisabled { view: "GS" }),
        };
        let mut h = self.dense(g, features, hidden)?;
        if self.config.gs_activation {
            h = g.relu(h)?;
        }
        self.dense(g, h, out)
    }

    /// Fusion head over the enabled view encodings (GS first, then OSM).
    pub fn fusion_graph(
        &self,
        g: &mut Graph,
        gs: Option<Var>,
        osm: Option<Var>,
    ) -> Result<Var, EncoderError> {
        if gs.is_some() != self.config.gs_enabled() || osm.is_some() != self.config.osm_enabled() {
            return Err(EncoderError::Config(
                "fusion inputs must match the enabled views".into(),
            ));
        }
        let parts: Vec<Var> = gs.into_iter().chain(osm).collect();
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let h = self.dense(g, x, self.ids.fusion_hidden)?;
        let h = g.relu(h)?;
        self.dense(g, h, self.ids.fusion_out)
    }

    /// Location and multi-view embeddings of a prepared batch.
    pub fn forward(&self, g: &mut Graph, batch: &PreparedBatch) -> Result<(Var, Var), EncoderError> {
        let basis = g.constant(batch.basis.clone());
        let z_le = self.location_graph(g, basis)?;
        let gs = match &batch.gs {
            Some(t) => {
                let x = g.constant(t.clone());
                Some(self.gs_graph(g, x)?)
            }
            None => None,
        };
        let osm = match &batch.osm {
            Some(t) => {
                let x = g.constant(t.clone());
                Some(self.osm_graph(g, x)?)
            }
            None => None,
        };
        let z_mv = self.fusion_graph(g, gs, osm)?;
        Ok((z_le, z_mv))
    }

    fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params).with_trap(self.config.trap_non_finite)
    }

    // ---- single-example inference ----

    /// Embedding of one coordinate.
    pub fn location_encode(&self, c: &Coordinate) -> Result<Embedding, EncoderError> {
        let out = self.location_encode_batch(std::slice::from_ref(c))?;
        Ok(Embedding(out.into_data()))
    }

    /// `[n, d]` embeddings of many coordinates.
    pub fn location_encode_batch(&self, coords: &[Coordinate]) -> Result<Tensor, EncoderError> {
        let mut g = self.graph();
        let basis = g.constant(self.prepare_basis(coords));
        let z = self.location_graph(&mut g, basis)?;
        Ok(g.value(z).clone())
    }

    /// Sinusoidal network applied to one weighted-harmonics vector.
    pub fn siren_forward(&self, x: &[f64]) -> Result<Vec<f64>, EncoderError> {
        let expected = sh_basis_len(self.config.sh_degree);
        if x.len() != expected {
            return Err(EncoderError::Dimension {
                what: "siren input",
                expected,
                actual: x.len(),
            });
        }
        let mut g = self.graph();
        let input = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let z = self.siren_graph(&mut g, input)?;
        Ok(g.value(z).data().to_vec())
    }

    /// OSM encoding of one 37 x 6 count grid.
    pub fn osm_encode(&self, counts: &[f64]) -> Result<Vec<f64>, EncoderError> {
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(EncoderError::Config("OSM counts must be non-negative".into()));
        }
        let squares = self.prepare_osm(&[counts])?;
        let mut g = self.graph();
        let x = g.constant(squares);
        let z = self.osm_graph(&mut g, x)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Satellite projection of one feature vector.
    pub fn gs_encode(&self, features: &[f64]) -> Result<Vec<f64>, EncoderError> {
        let prepared = self.prepare_gs(&[features])?;
        let mut g = self.graph();
        let x = g.constant(prepared);
        let z = self.gs_graph(&mut g, x)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Fusion of already encoded views.
    pub fn fusion_encode(&self, gs: Option<&[f64]>, osm: Option<&[f64]>) -> Result<Embedding, EncoderError> {
        let mut g = self.graph();
        let constant = |g: &mut Graph, v: Option<&[f64]>, dim: usize, what| -> Result<Option<Var>, EncoderError> {
            match v {
                Some(v) if v.len() != dim => Err(EncoderError::Dimension {
                    what,
                    expected: dim,
                    actual: v.len(),
                }),
                Some(v) => Ok(Some(g.constant(Tensor::new(vec![1, dim], v.to_vec())?))),
                None => Ok(None),
            }
        };
        let gs = constant(&mut g, gs, self.config.gs_dim, "GS encoding")?;
        let osm = constant(&mut g, osm, self.config.osm_dim, "OSM encoding")?;
        let z = self.fusion_graph(&mut g, gs, osm)?;
        Ok(Embedding(g.value(z).data().to_vec()))
    }

    /// Multi-view embedding of one location's raw views.
    pub fn multiview_encode(
        &self,
        osm_counts: Option<&[f64]>,
        gs_features: Option<&[f64]>,
    ) -> Result<Embedding, EncoderError> {
        let gs = if self.config.gs_enabled() {
            let f = gs_features.ok_or(EncoderError::Config("GS features required by this model".into()))?;
            Some(self.gs_encode(f)?)
        } else {
            None
        };
        let osm = if self.config.osm_enabled() {
            let c = osm_counts.ok_or(EncoderError::Config("OSM counts required by this model".into()))?;
            Some(self.osm_encode(c)?)
        } else {
            None
        };
        self.fusion_encode(gs.as_deref(), osm.as_deref())
    }
}
