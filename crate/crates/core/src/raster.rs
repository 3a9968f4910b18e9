//! World/pixel geometry, semantic grids and local-map extraction.
//!
//! Pixel coordinates are `(x = column, y = row)` and an integer pixel refers
//! to the center of its cell, so a continuous pixel point belongs to the cell
//! obtained by rounding each coordinate half away from zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point, either in world units or pixel units depending on context.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Index of the cell containing this pixel point as `(row, col)`.
    pub fn cell(self) -> (i64, i64) {
        (self.y.round() as i64, self.x.round() as i64)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

const DEGENERATE_W: f64 = 1e-12;

/// Projective map from world meters to pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Transform(format!(
                "homography is singular (det = {det:e})"
            )));
        }
        let inverse = matrix
            .try_inverse()
            .ok_or_else(|| Error::Transform("homography is not invertible".into()))?;
        Ok(Self { matrix, inverse })
    }

    pub fn from_row_major(m: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&m))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    /// Uniform scale plus translation: `pixel = scale * world + offset`.
    pub fn similarity(scale: f64, offset: Point2) -> Result<Self> {
        Self::from_row_major([scale, 0.0, offset.x, 0.0, scale, offset.y, 0.0, 0.0, 1.0])
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.matrix;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    fn apply(m: &Matrix3<f64>, p: Point2) -> Result<Point2> {
        let v = m * Vector3::new(p.x, p.y, 1.0);
        if !v.z.is_finite() || v.z.abs() < DEGENERATE_W {
            return Err(Error::Transform(format!(
                "degenerate homogeneous coordinate at ({}, {})",
                p.x, p.y
            )));
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    pub fn world_to_pixel(&self, p: Point2) -> Result<Point2> {
        Self::apply(&self.matrix, p)
    }

    pub fn pixel_to_world(&self, p: Point2) -> Result<Point2> {
        Self::apply(&self.inverse, p)
    }
}

/// Dense row-major `f64` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Writes the raster as an 8-bit PGM, mapping `[0,1]` to `[0,255]`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm_bytes(path, self.width, self.height, &bytes)
    }
}

/// Class-ID raster of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
    class_values: BTreeMap<u8, f64>,
    navigable: BTreeSet<u8>,
    pad_class: u8,
}

/// Class IDs of binary navigability grids.
pub const FREE_CLASS: u8 = 0;
pub const WALL_CLASS: u8 = 1;

impl SemanticGrid {
    pub fn new(
        height: usize,
        width: usize,
        cells: Vec<u8>,
        class_values: BTreeMap<u8, f64>,
        navigable: BTreeSet<u8>,
        pad_class: u8,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if cells.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "expected {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| !class_values.contains_key(c)) {
            return Err(Error::InvalidGrid(format!("undeclared class id {c}")));
        }
        if !class_values.contains_key(&pad_class) {
            return Err(Error::InvalidGrid(format!(
                "pad class {pad_class} has no value"
            )));
        }
        if navigable.contains(&pad_class) {
            return Err(Error::InvalidGrid("pad class must be non-navigable".into()));
        }
        let mut seen: Vec<f64> = Vec::with_capacity(class_values.len());
        for &v in class_values.values() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidGrid(format!("class value {v} outside [0,1]")));
            }
            if seen.contains(&v) {
                return Err(Error::InvalidGrid(format!("class value {v} repeated")));
            }
            seen.push(v);
        }
        Ok(Self {
            height,
            width,
            cells,
            class_values,
            navigable,
            pad_class,
        })
    }

    /// Navigable (`FREE_CLASS`, value 0) / non-navigable (`WALL_CLASS`, value 1) grid.
    pub fn binary(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        Self::new(
            height,
            width,
            cells,
            BTreeMap::from([(FREE_CLASS, 0.0), (WALL_CLASS, 1.0)]),
            BTreeSet::from([FREE_CLASS]),
            WALL_CLASS,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn class_values(&self) -> &BTreeMap<u8, f64> {
        &self.class_values
    }

    pub fn navigable_classes(&self) -> &BTreeSet<u8> {
        &self.navigable
    }

    pub fn pad_class(&self) -> u8 {
        self.pad_class
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Class at a cell, `pad_class` outside the grid.
    pub fn class_at(&self, row: i64, col: i64) -> u8 {
        if self.in_bounds(row, col) {
            self.cells[row as usize * self.width + col as usize]
        } else {
            self.pad_class
        }
    }

    pub fn is_navigable(&self, row: i64, col: i64) -> bool {
        self.in_bounds(row, col) && self.navigable.contains(&self.class_at(row, col))
    }

    /// Navigability of the cell containing a continuous pixel point.
    pub fn is_navigable_px(&self, p: Point2) -> bool {
        if !p.x.is_finite() || !p.y.is_finite() {
            return false;
        }
        let (r, c) = p.cell();
        self.is_navigable(r, c)
    }

    pub fn value_of(&self, class: u8) -> f64 {
        self.class_values[&class]
    }

    /// Saves the grid as `<stem>.pgm` (class IDs as bytes) plus a `<stem>.json` sidecar.
    pub fn save(&self, pgm_path: &Path, json_path: &Path, h: &Homography) -> Result<()> {
        write_pgm_bytes(pgm_path, self.width, self.height, &self.cells)?;
        let sidecar = GridSidecar {
            class_values: self.class_values.clone(),
            navigable_classes: self.navigable.iter().copied().collect(),
            pad_class: self.pad_class,
            homography: h.row_major(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(pgm_path: &Path, json_path: &Path) -> Result<(Self, Homography)> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let sidecar: GridSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: json_path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (width, height, cells) = read_pgm_bytes(pgm_path)?;
        let grid = Self::new(
            height,
            width,
            cells,
            sidecar.class_values,
            sidecar.navigable_classes.into_iter().collect(),
            sidecar.pad_class,
        )?;
        let h = Homography::from_row_major(sidecar.homography)?;
        Ok((grid, h))
    }
}

/// JSON metadata stored next to a grid's PGM file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSidecar {
    pub class_values: BTreeMap<u8, f64>,
    pub navigable_classes: Vec<u8>,
    pub pad_class: u8,
    pub homography: [f64; 9],
}

fn write_pgm_bytes(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(bytes.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("writing to a Vec");
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace; comments start with '#'.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < raw.len() && raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < raw.len() && raw[i] == b'#' {
            while i < raw.len() && raw[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    i += 1;
    let body = raw.get(i..i + width * height).ok_or_else(|| bad("truncated PGM body"))?;
    Ok((width, height, body.to_vec()))
}

/// Window around the agent that gets cropped and resized into a local map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMapSpec {
    pub center_px: Point2,
    pub radius_px: u32,
    pub out_size: usize,
}

impl LocalMapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius_px < 1 {
            return Err(Error::Domain("local map radius must be >= 1".into()));
        }
        if self.out_size < 8 {
            return Err(Error::Domain("local map out_size must be >= 8".into()));
        }
        if !self.center_px.x.is_finite() || !self.center_px.y.is_finite() {
            return Err(Error::Domain("local map center is not finite".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> LocalFrame {
        let (row, col) = self.center_px.cell();
        LocalFrame {
            origin_row: row - self.radius_px as i64,
            origin_col: col - self.radius_px as i64,
            side: 2 * self.radius_px as usize + 1,
            out_size: self.out_size,
        }
    }
}

/// Mapping between global grid pixels and the resized local raster.
///
/// Nearest-neighbour resizing samples source index `floor((i + 0.5) * side / out)`
/// for output index `i`; the continuous maps below are the affine maps that
/// agree with that sampling at cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin_row: i64,
    pub origin_col: i64,
    pub side: usize,
    pub out_size: usize,
}

impl LocalFrame {
    fn scale(&self) -> f64 {
        self.out_size as f64 / self.side as f64
    }

    pub fn to_local(&self, global: Point2) -> Point2 {
        let s = self.scale();
        Point2::new(
            (global.x - self.origin_col as f64 + 0.5) * s - 0.5,
            (global.y - self.origin_row as f64 + 0.5) * s - 0.5,
        )
    }

    pub fn to_global(&self, local: Point2) -> Point2 {
        let s = self.scale();
        Point2::new(
            (local.x + 0.5) / s - 0.5 + self.origin_col as f64,
            (local.y + 0.5) / s - 0.5 + self.origin_row as f64,
        )
    }

    /// Source cell offset (within the window) sampled by output index `i`.
    fn source_index(&self, i: usize) -> i64 {
        (((i as f64 + 0.5) * self.side as f64 / self.out_size as f64).floor() as i64)
            .min(self.side as i64 - 1)
    }
}

/// Radius of the local map: 20 times the mean per-step pixel displacement,
/// rounded up and clamped to at least 1.
pub fn local_radius(traj: &[Point2], h: &Homography) -> Result<u32> {
    if traj.len() < 2 {
        return Err(Error::Domain("local_radius needs at least 2 points".into()));
    }
    let px = traj
        .iter()
        .map(|&p| h.world_to_pixel(p))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = px.windows(2).map(|w| w[0].dist(w[1])).sum();
    let mean = total / (px.len() - 1) as f64;
    // Tiny slack so float noise on exact multiples does not round up.
    let r = (20.0 * mean - 1e-9).ceil();
    Ok(if r.is_finite() && r >= 1.0 {
        r as u32
    } else {
        1
    })
}

/// Crops the `(2r+1)²` window around `spec.center_px`, pads outside cells with
/// the grid's pad class, maps classes to values and resizes (nearest) to
/// `out_size × out_size`.
pub fn extract_local_map(grid: &SemanticGrid, spec: &LocalMapSpec) -> Result<Raster> {
    spec.validate()?;
    let (h, w) = (grid.height() as f64, grid.width() as f64);
    let c = spec.center_px;
    if (c.x - w / 2.0).abs() > 10.0 * w || (c.y - h / 2.0).abs() > 10.0 * h {
        return Err(Error::Domain(format!(
            "local map center ({}, {}) is far outside the {}x{} grid",
            c.x, c.y, grid.height(), grid.width()
        )));
    }
    let frame = spec.frame();
    let n = spec.out_size;
    let lookup: Vec<i64> = (0..n).map(|i| frame.source_index(i)).collect();
    let mut out = Raster::zeros(n, n);
    for (i, &dr) in lookup.iter().enumerate() {
        let row = frame.origin_row + dr;
        for (j, &dc) in lookup.iter().enumerate() {
            let col = frame.origin_col + dc;
            out.set(i, j, grid.value_of(grid.class_at(row, col)));
        }
    }
    Ok(out)
}
