//! A synthetic stand-in for a real multi-view location dataset.
//!
//! A smooth latent field built from a handful of low-degree spherical
//! harmonics drives everything: OSM counts are Poisson with log-intensity
//! affine in the field, satellite features are a fixed random linear map of
//! the field and its local gradient plus noise, and the probe labels are
//! simple functions of the field.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::encoders::{sh_basis, sh_index, OSM_CHANNELS, OSM_RINGS};
use crate::geogrid::{axial_cells, Coordinate};

use super::{DataError, LocationRecord};

/// Longitude window of the synthetic world, degrees.
pub const WORLD_LON: (f64, f64) = (-10.0, 30.0);
/// Latitude window of the synthetic world, degrees.
pub const WORLD_LAT: (f64, f64) = (36.0, 60.0);

const MODES: usize = 6;
const MIN_DEGREE: usize = 2;
const MAX_DEGREE: usize = 7;
const GS_DIM: usize = 512;
const GS_NOISE: f64 = 0.1;
const PRICE_NOISE: f64 = 0.2;
/// Spacing of OSM hex cells around a location, degrees of latitude.
const CELL_SPACING: f64 = 0.03;
const GRADIENT_STEP: f64 = 0.01;

/// Latent field with its affine trend over the world window removed,
/// scaled to unit variance there.
#[derive(Debug, Clone)]
pub struct LatentField {
    modes: Vec<(usize, i64, f64)>,
    trend: [f64; 3],
    std: f64,
}

impl LatentField {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let modes = (0..MODES)
            .map(|_| {
                let l = rng.random_range(MIN_DEGREE..=MAX_DEGREE);
                let m = rng.random_range(-(l as i64)..=l as i64);
                (l, m, normal.sample(rng))
            })
            .collect();
        let mut field = Self {
            modes,
            trend: [0.0; 3],
            std: 1.0,
        };
        // affine trend and scale on a fixed lattice, independent of the
        // sampled points; without detrending the field is close to planar
        // over a window this small
        let (nx, ny) = (81, 49);
        let mut gram = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        let mut lattice = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let lon = WORLD_LON.0 + (WORLD_LON.1 - WORLD_LON.0) * i as f64 / (nx - 1) as f64;
                let lat = WORLD_LAT.0 + (WORLD_LAT.1 - WORLD_LAT.0) * j as f64 / (ny - 1) as f64;
                let x = Vector3::new(1.0, lon, lat);
                let v = field.raw(lon, lat);
                gram += x * x.transpose();
                rhs += x * v;
                lattice.push((lon, lat, v));
            }
        }
        let beta = gram.cholesky().expect("lattice spans the plane").solve(&rhs);
        field.trend = [beta[0], beta[1], beta[2]];
        let var = lattice
            .iter()
            .map(|&(lon, lat, v)| (v - field.trend_at(lon, lat)).powi(2))
            .sum::<f64>()
            / lattice.len() as f64;
        field.std = var.sqrt().max(1e-12);
        field
    }

    fn raw(&self, lon: f64, lat: f64) -> f64 {
        let c = Coordinate::new(wrap_lon(lon), lat.clamp(-90.0, 90.0)).expect("finite");
        let basis = sh_basis(&c, MAX_DEGREE);
        self.modes
            .iter()
            .map(|&(l, m, w)| w * basis[sh_index(l, m)])
            .sum()
    }

    fn trend_at(&self, lon: f64, lat: f64) -> f64 {
        self.trend[0] + self.trend[1] * lon + self.trend[2] * lat
    }

    /// Detrended, standardised field value.
    pub fn value(&self, lon: f64, lat: f64) -> f64 {
        (self.raw(lon, lat) - self.trend_at(lon, lat)) / self.std
    }

    /// Central-difference gradient per 10 degrees of longitude and latitude.
    pub fn gradient(&self, lon: f64, lat: f64) -> (f64, f64) {
        let h = GRADIENT_STEP;
        let gx = (self.value(lon + h, lat) - self.value(lon - h, lat)) / (2.0 * h);
        let gy = (self.value(lon, lat + h) - self.value(lon, lat - h)) / (2.0 * h);
        (10.0 * gx, 10.0 * gy)
    }
}

fn wrap_lon(lon: f64) -> f64 {
    if lon > 180.0 {
        lon - 360.0
    } else if lon < -180.0 {
        lon + 360.0
    } else {
        lon
    }
}

/// Generated records plus the generating field, for diagnostics.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub records: Vec<LocationRecord>,
    pub field: LatentField,
    /// Voronoi sites of the `region` label.
    pub region_sites: Vec<Coordinate>,
}

impl SyntheticWorld {
    /// Field value at each record.
    pub fn latent(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| self.field.value(r.coordinate.lon(), r.coordinate.lat()))
            .collect()
    }
}

/// Voronoi cell of `c` among `sites`, with longitudes shrunk by the cosine
/// of the window's mid latitude. Ties go to the lowest index.
pub fn nearest_site(sites: &[Coordinate], c: &Coordinate) -> usize {
    let k = ((WORLD_LAT.0 + WORLD_LAT.1) / 2.0).to_radians().cos();
    let mut best = (0, f64::INFINITY);
    for (i, s) in sites.iter().enumerate() {
        let dx = (s.lon() - c.lon()) * k;
        let dy = s.lat() - c.lat();
        let d = dx * dx + dy * dy;
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Builds `count` records in the world window with `regions` Voronoi
/// regions. Each label is a deterministic function of `(seed, count,
/// regions)`.
pub fn synthesize_world(seed: u64, count: usize, regions: usize) -> Result<SyntheticWorld, DataError> {
    if count < 10 {
        return Err(DataError::InvalidArgument(format!(
            "at least 10 records are needed, got {count}"
        )));
    }
    if regions < 2 || regions > count {
        return Err(DataError::InvalidArgument(format!(
            "region count must be in 2..={count}, got {regions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = LatentField::random(&mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let intercepts: Vec<f64> = (0..OSM_CHANNELS).map(|_| rng.random_range(-0.5..1.0)).collect();
    let slopes: Vec<f64> = (0..OSM_CHANNELS).map(|_| rng.random_range(0.6..1.2)).collect();
    let gs_map: Vec<[f64; 3]> = (0..GS_DIM)
        .map(|_| {
            let s = 1.0 / 3f64.sqrt();
            [normal.sample(&mut rng) * s, normal.sample(&mut rng) * s, normal.sample(&mut rng) * s]
        })
        .collect();

    let coords: Vec<Coordinate> = (0..count)
        .map(|_| {
            let lon = rng.random_range(WORLD_LON.0..WORLD_LON.1);
            let lat = rng.random_range(WORLD_LAT.0..WORLD_LAT.1);
            Coordinate::new(lon, lat).expect("inside the window")
        })
        .collect();
    // sites are sampled points, so every region owns at least its site
    let region_sites: Vec<Coordinate> = sample(&mut rng, count, regions)
        .into_iter()
        .map(|i| coords[i])
        .collect();

    let cells = axial_cells(OSM_RINGS);
    let mut records = Vec::with_capacity(count);
    for (p, c) in coords.iter().enumerate() {
        let z = field.value(c.lon(), c.lat());
        let lon_scale = 1.0 / c.lat().to_radians().cos();
        let mut counts = Vec::with_capacity(cells.len() * OSM_CHANNELS);
        for &(q, r) in &cells {
            let dx = CELL_SPACING * (q as f64 + r as f64 / 2.0) * lon_scale;
            let dy = CELL_SPACING * (r as f64 * 3f64.sqrt() / 2.0);
            let zc = field.value(c.lon() + dx, c.lat() + dy);
            for ch in 0..OSM_CHANNELS {
                let rate = (intercepts[ch] + slopes[ch] * zc).exp();
                let draw = Poisson::new(rate).expect("positive finite rate").sample(&mut rng);
                counts.push(draw as u32);
            }
        }

        let (gx, gy) = field.gradient(c.lon(), c.lat());
        let gs: Vec<f64> = gs_map
            .iter()
            .map(|w| w[0] * z + w[1] * gx + w[2] * gy + GS_NOISE * normal.sample(&mut rng))
            .collect();

        let region = nearest_site(&region_sites, c);
        let price = 2.0 + 0.8 * z + PRICE_NOISE * normal.sample(&mut rng);
        let labels = BTreeMap::from([
            ("region".to_string(), region as f64),
            ("density".to_string(), z.exp()),
            ("price".to_string(), price),
        ]);
        records.push(LocationRecord {
            id: format!("p{p:05}"),
            coordinate: *c,
            osm_counts: Some(counts),
            gs_features: Some(gs),
            labels,
        });
    }
    Ok(SyntheticWorld {
        records,
        field,
        region_sites,
    })
}
