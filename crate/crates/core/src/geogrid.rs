//! Coordinates, hexagonal ring grids, and the h2 placement of a hex grid
//! into a square matrix with masked corners.
//!
//! Hex cells use axial coordinates `(q, r)`. A grid with `k` rings holds every
//! cell with `max(|q|, |r|, |q + r|) <= k`. The square image of a cell is
//! `(row, col) = (k - r, q + k)`, which leaves the upper-right and lower-left
//! triangles of side `k` unused. Neighbouring hexes land on square cells that
//! differ by an offset inside the 3x3 filter with those two corners removed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate (lon={lon}, lat={lat}): lon must be in [-180, 180] and lat in [-90, 90]")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("hex grid with {rings} rings needs {expected} cells x {channels} channels, got {actual} values")]
    GridShape {
        rings: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
}

/// Longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    lon: f64,
    lat: f64,
}

impl Coordinate {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if lon.is_finite()
            && lat.is_finite()
            && (-180.0..=180.0).contains(&lon)
            && (-90.0..=90.0).contains(&lat)
        {
            Ok(Self { lon, lat })
        } else {
            Err(GeoError::InvalidCoordinate { lon, lat })
        }
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Azimuth and polar angle in radians. The polar angle is measured from
    /// the north pole, so it lies in `[0, pi]`.
    pub fn to_spherical(&self) -> (f64, f64) {
        (self.lon * PI / 180.0, (90.0 - self.lat) * PI / 180.0)
    }
}

/// Number of cells in a hex grid with `k` rings around the centre.
pub fn hex_cell_count(k: usize) -> usize {
    3 * k * (k + 1) + 1
}

/// Axial step directions, in the order a ring walk turns through them.
const AXIAL_DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// Axial coordinates of every cell of a `k`-ring grid in canonical order:
/// the centre, then each ring outward. A ring of radius `n` starts at
/// `(-n, n)` and walks the six directions of [`AXIAL_DIRECTIONS`], `n` steps each.
pub fn axial_cells(k: usize) -> Vec<(i32, i32)> {
    let mut cells = Vec::with_capacity(hex_cell_count(k));
    cells.push((0, 0));
    for n in 1..=k as i32 {
        let (mut q, mut r) = (-n, n);
        for &(dq, dr) in &AXIAL_DIRECTIONS {
            for _ in 0..n {
                cells.push((q, r));
                q += dq;
                r += dr;
            }
        }
    }
    cells
}

/// Axial offsets of the six neighbours of a hex.
pub fn axial_neighbor_offsets() -> [(i32, i32); 6] {
    AXIAL_DIRECTIONS
}

/// Hex distance of an axial offset from the origin.
pub fn axial_distance(q: i32, r: i32) -> i32 {
    q.abs().max(r.abs()).max((q + r).abs())
}

/// A `k`-ring hex grid carrying `channels` values per cell, stored cell-major
/// in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct HexGrid {
    rings: usize,
    channels: usize,
    values: Vec<f64>,
}

impl HexGrid {
    pub fn new(rings: usize, channels: usize, values: Vec<f64>) -> Result<Self, GeoError> {
        let expected = hex_cell_count(rings) * channels;
        if values.len() != expected {
            return Err(GeoError::GridShape {
                rings,
                channels,
                expected: hex_cell_count(rings),
                actual: values.len(),
            });
        }
        Ok(Self {
            rings,
            channels,
            values,
        })
    }

    pub fn zeros(rings: usize, channels: usize) -> Self {
        Self {
            rings,
            channels,
            values: vec![0.0; hex_cell_count(rings) * channels],
        }
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_count(&self) -> usize {
        hex_cell_count(self.rings)
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Square boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareMask {
    side: usize,
    cells: Vec<bool>,
}

impl SquareMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.side + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// The `(2k+1) x (2k+1)` mask whose true cells are exactly the h2 images of
/// a `k`-ring hex neighbourhood: the upper-right and lower-left triangles of
/// side `k` are false.
pub fn square_filter_mask(k: usize) -> SquareMask {
    let side = 2 * k + 1;
    let cells = (0..side * side)
        .map(|idx| (idx / side).abs_diff(idx % side) <= k)
        .collect();
    SquareMask { side, cells }
}

/// Lookup table between canonical hex indices and square positions.
#[derive(Debug, Clone)]
pub struct H2Layout {
    rings: usize,
    positions: Vec<(usize, usize)>,
    hex_at: Vec<Option<usize>>,
}

impl H2Layout {
    pub fn new(rings: usize) -> Self {
        let side = 2 * rings + 1;
        let k = rings as i32;
        let mut hex_at = vec![None; side * side];
        let positions: Vec<(usize, usize)> = axial_cells(rings)
            .into_iter()
            .enumerate()
            .map(|(idx, (q, r))| {
                let pos = ((k - r) as usize, (q + k) as usize);
                hex_at[pos.0 * side + pos.1] = Some(idx);
                pos
            })
            .collect();
        Self {
            rings,
            positions,
            hex_at,
        }
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn side(&self) -> usize {
        2 * self.rings + 1
    }

    /// Square position `(row, col)` of the hex with canonical index `index`.
    pub fn position(&self, index: usize) -> (usize, usize) {
        self.positions[index]
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Canonical hex index at a square position, if one maps there.
    pub fn hex_at(&self, row: usize, col: usize) -> Option<usize> {
        self.hex_at[row * self.side() + col]
    }

    /// Row-major flat indices (`row * side + col`) of the hex cells, in
    /// canonical order.
    pub fn flat_indices(&self) -> Vec<usize> {
        let side = self.side();
        self.positions.iter().map(|&(r, c)| r * side + c).collect()
    }

    pub fn mask(&self) -> SquareMask {
        SquareMask {
            side: self.side(),
            cells: self.hex_at.iter().map(Option::is_some).collect(),
        }
    }
}

/// Square image of a hex grid: `side x side x channels` values, row-major with
/// channels last. Cells outside the mask hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareGrid {
    side: usize,
    channels: usize,
    values: Vec<f64>,
    mask: SquareMask,
}

impl SquareGrid {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mask(&self) -> &SquareMask {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn hex_to_square(grid: &HexGrid) -> SquareGrid {
    hex_to_square_with(&H2Layout::new(grid.rings), grid)
}

/// Same as [`hex_to_square`] but reuses a prebuilt layout.
pub fn hex_to_square_with(layout: &H2Layout, grid: &HexGrid) -> SquareGrid {
    assert_eq!(layout.rings(), grid.rings, "layout ring count mismatch");
    let side = layout.side();
    let channels = grid.channels;
    let mut values = vec![0.0; side * side * channels];
    for (idx, &(row, col)) in layout.positions().iter().enumerate() {
        let start = (row * side + col) * channels;
        values[start..start + channels].copy_from_slice(grid.cell(idx));
    }
    SquareGrid {
        side,
        channels,
        values,
        mask: layout.mask(),
    }
}

/// Inverse of [`hex_to_square`]; masked cells are dropped.
pub fn square_to_hex(square: &SquareGrid) -> HexGrid {
    let rings = (square.side - 1) / 2;
    let layout = H2Layout::new(rings);
    let mut grid = HexGrid::zeros(rings, square.channels);
    for (idx, &(row, col)) in layout.positions().iter().enumerate() {
        grid.cell_mut(idx).copy_from_slice(square.at(row, col));
    }
    grid
}
