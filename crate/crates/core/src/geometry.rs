//! Box and binary-mask arithmetic.
//!
//! Boxes use relative `(x1, y1, x2, y2)` coordinates in `[0, 1]`. Boxes keep
//! the coordinate order they were given in so annotations render verbatim;
//! every geometric operation works on the canonical form.
//!
//! Masks are stored as uncompressed COCO-style run lengths: column-major
//! flattening, alternating runs starting with a (possibly empty) run of 0s.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to probabilities in [`bce_mask`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates {0:?} outside [0, 1]")]
    OutOfRange([f64; 4]),
    #[error("region box has zero area")]
    DegenerateRegion,
    #[error("run lengths sum to {actual}, expected {expected} (height x width)")]
    RunSumMismatch { expected: u64, actual: u64 },
    #[error("run {index} is zero; only the leading run may be empty")]
    EmptyRun { index: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (u32, u32),
        right: (u32, u32),
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("grid value {value} at row {row}, col {col} is not 0 or 1")]
    NonBinaryValue { row: usize, col: usize, value: u8 },
    #[error("grid rows have inconsistent lengths")]
    RaggedGrid,
}

/// Axis-aligned box in relative image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    /// Builds a box, keeping the given coordinate order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(GeometryError::OutOfRange(coords));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_canonical(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Same box with each axis ordered low-to-high.
    pub fn canonical(&self) -> Self {
        Self {
            x1: self.x1.min(self.x2),
            y1: self.y1.min(self.y2),
            x2: self.x1.max(self.x2),
            y2: self.y1.max(self.y2),
        }
    }

    pub fn area(&self) -> f64 {
        let c = self.canonical();
        (c.x2 - c.x1) * (c.y2 - c.y1)
    }

    /// Area of the overlap between the canonical forms of both boxes.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let a = self.canonical();
        let b = other.canonical();
        let w = a.x2.min(b.x2) - a.x1.max(b.x1);
        let h = a.y2.min(b.y2) - a.y1.max(b.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Validates raw coordinates and reorders each axis so that `x1 <= x2` and
/// `y1 <= y2`.
pub fn canonicalize_box(coords: [f64; 4]) -> Result<BoundingBox, GeometryError> {
    Ok(BoundingBox::try_from(coords)?.canonical())
}

/// Intersection over union; 0 when the union has zero area.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of `region` covered by `anchor`.
pub fn intersection_over_region(
    region: &BoundingBox,
    anchor: &BoundingBox,
) -> Result<f64, GeometryError> {
    let area = region.area();
    if area <= 0.0 {
        return Err(GeometryError::DegenerateRegion);
    }
    Ok((region.intersection_area(anchor) / area).clamp(0.0, 1.0))
}

/// Dense binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    height: u32,
    width: u32,
    data: Vec<u8>,
}

impl Grid {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            data: vec![0; height as usize * width as usize],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, GeometryError> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(height * width);
        for (row, values) in rows.iter().enumerate() {
            if values.len() != width {
                return Err(GeometryError::RaggedGrid);
            }
            for (col, &value) in values.iter().enumerate() {
                if value > 1 {
                    return Err(GeometryError::NonBinaryValue { row, col, value });
                }
                data.push(value);
            }
        }
        Ok(Self {
            height: height as u32,
            width: width as u32,
            data,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width as usize + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width as usize + col] = u8::from(on);
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: [u32; 2],
    counts: Vec<u32>,
}

/// Run-length encoded binary mask, serialized as `{"size": [H, W], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleJson", into = "RleJson")]
pub struct BinaryMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

impl TryFrom<RleJson> for BinaryMask {
    type Error = GeometryError;

    fn try_from(j: RleJson) -> Result<Self, Self::Error> {
        Self::from_runs(j.size[0], j.size[1], j.counts)
    }
}

impl From<BinaryMask> for RleJson {
    fn from(m: BinaryMask) -> Self {
        RleJson {
            size: [m.height, m.width],
            counts: m.runs,
        }
    }
}

impl BinaryMask {
    pub fn from_runs(height: u32, width: u32, runs: Vec<u32>) -> Result<Self, GeometryError> {
        if let Some(index) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(GeometryError::EmptyRun { index: index + 1 });
        }
        let expected = u64::from(height) * u64::from(width);
        let actual: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if actual != expected {
            return Err(GeometryError::RunSumMismatch { expected, actual });
        }
        Ok(Self {
            height,
            width,
            runs,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| u64::from(r)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Half-open `[start, end)` index intervals of foreground runs in
    /// column-major order.
    fn foreground_intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += u64::from(r);
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Overlap pixel count, computed on the runs without decoding.
    pub fn intersection_area(&self, other: &Self) -> Result<u64, GeometryError> {
        check_dims(self.dims(), other.dims())?;
        let a: Vec<_> = self.foreground_intervals().collect();
        let b: Vec<_> = other.foreground_intervals().collect();
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }
}

fn check_dims(left: (u32, u32), right: (u32, u32)) -> Result<(), GeometryError> {
    if left != right {
        return Err(GeometryError::DimensionMismatch { left, right });
    }
    Ok(())
}

pub fn rle_decode(m: &BinaryMask) -> Grid {
    let mut grid = Grid::zeros(m.height, m.width);
    let h = u64::from(m.height);
    for (start, end) in m.foreground_intervals() {
        for idx in start..end {
            grid.set((idx % h) as usize, (idx / h) as usize, true);
        }
    }
    grid
}

pub fn rle_encode(grid: &Grid) -> BinaryMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for col in 0..grid.width as usize {
        for row in 0..grid.height as usize {
            let v = grid.get(row, col);
            if v != current {
                runs.push(len);
                current = v;
                len = 0;
            }
            len += 1;
        }
    }
    if len > 0 {
        runs.push(len);
    }
    BinaryMask {
        height: grid.height,
        width: grid.width,
        runs,
    }
}

/// `2|a∩b| / (|a|+|b|)`, with two empty masks counting as perfect agreement.
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// `|a∩b| / |a∪b|`, with two empty masks counting as perfect agreement.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn dice_loss(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    Ok(1.0 - dice_coefficient(a, b)?)
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    height: u32,
    width: u32,
    values: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn filled(height: u32, width: u32, p: f64) -> Self {
        Self {
            height,
            width,
            values: vec![p; height as usize * width as usize],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GeometryError> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(GeometryError::RaggedGrid);
        }
        Ok(Self {
            height: rows.len() as u32,
            width: width as u32,
            values: rows.concat(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width as usize + col]
    }

    pub fn set(&mut self, row: usize, col: usize, p: f64) {
        self.values[row * self.width as usize + col] = p;
    }
}

/// Mean pixelwise binary cross entropy with predictions clamped to
/// `[BCE_EPSILON, 1 - BCE_EPSILON]`.
pub fn bce_mask(pred: &ProbabilityGrid, gt: &BinaryMask) -> Result<f64, GeometryError> {
    check_dims((pred.height, pred.width), gt.dims())?;
    let n = pred.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let truth = rle_decode(gt);
    let mut total = 0.0;
    for row in 0..pred.height as usize {
        for col in 0..pred.width as usize {
            let p = pred.get(row, col).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            total -= if truth.get(row, col) == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            };
        }
    }
    Ok(total / n as f64)
}

/// Tightest relative box containing every foreground pixel.
pub fn box_from_mask(m: &BinaryMask) -> Result<BoundingBox, GeometryError> {
    let h = u64::from(m.height);
    let mut extent: Option<(u64, u64, u64, u64)> = None;
    for (start, end) in m.foreground_intervals() {
        let (c_start, r_start) = (start / h, start % h);
        let (c_end, r_end) = ((end - 1) / h, (end - 1) % h);
        let (r_lo, r_hi) = if c_start == c_end {
            (r_start, r_end)
        } else {
            (0, h - 1)
        };
        extent = Some(match extent {
            None => (c_start, r_lo, c_end, r_hi),
            Some((x1, y1, x2, y2)) => (x1.min(c_start), y1.min(r_lo), x2.max(c_end), y2.max(r_hi)),
        });
    }
    let (x1, y1, x2, y2) = extent.ok_or(GeometryError::EmptyMask)?;
    let w = f64::from(m.width);
    let hf = h as f64;
    BoundingBox::new(
        x1 as f64 / w,
        y1 as f64 / hf,
        (x2 + 1) as f64 / w,
        (y2 + 1) as f64 / hf,
    )
}
