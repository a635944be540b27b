//! Core domain types: trajectory grids, images, masks, and scene records.
//!
//! Coordinate convention: pixel (0, 0) is the top-left image corner, x grows
//! to the right (columns), y grows downward (rows). Grid anchors sit at cell
//! centers: cell (i, j) anchors at ((j + 0.5) * s, (i + 0.5) * s) where `s`
//! is the grid stride in pixels. Trajectories start at their anchors, so the
//! frame-0 slice of every grid produced by the system equals the anchor grid.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Dense grid of 2D point tracks: `[T, Gh, Gw, 2]` in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGrid {
    data: Array4<f64>,
    stride: usize,
}

impl TrajectoryGrid {
    /// Wraps raw track data. Rejects non-finite coordinates and degenerate
    /// shapes; does not require the frame-0 anchor property (metrics accept
    /// arbitrary grids).
    pub fn new(data: Array4<f64>, stride: usize) -> Result<Self> {
        let (t, gh, gw, c) = data.dim();
        if t == 0 || gh == 0 || gw == 0 || c != 2 {
            return Err(Error::Shape(format!(
                "trajectory grid needs [T>0, Gh>0, Gw>0, 2], got [{t}, {gh}, {gw}, {c}]"
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("grid stride must be positive".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(
                "trajectory grid contains non-finite coordinates".into(),
            ));
        }
        Ok(Self { data, stride })
    }

    /// Anchor-valued grid: every frame equals the anchor positions.
    pub fn at_anchors(t_len: usize, gh: usize, gw: usize, stride: usize) -> Self {
        let mut data = Array4::zeros((t_len, gh, gw, 2));
        for t in 0..t_len {
            for i in 0..gh {
                for j in 0..gw {
                    let (x, y) = anchor(i, j, stride);
                    data[[t, i, j, 0]] = x;
                    data[[t, i, j, 1]] = y;
                }
            }
        }
        Self { data, stride }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn t_len(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid_h(&self) -> usize {
        self.data.dim().1
    }

    pub fn grid_w(&self) -> usize {
        self.data.dim().2
    }

    /// Maps pixel coordinates to [-1, 1]: x' = 2x/W - 1, y' = 2y/H - 1.
    pub fn normalize(&self, width: usize, height: usize) -> Result<NormalizedGrid> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image extent must be positive".into()));
        }
        let mut data = self.data.clone();
        let (w, h) = (width as f64, height as f64);
        for mut point in data.rows_mut() {
            point[0] = 2.0 * point[0] / w - 1.0;
            point[1] = 2.0 * point[1] / h - 1.0;
        }
        Ok(NormalizedGrid {
            data,
            stride: self.stride,
        })
    }

    /// Mean pixel distance of the frame-0 slice from the anchor grid.
    pub fn frame0_anchor_error(&self) -> f64 {
        let (_, gh, gw, _) = self.data.dim();
        let mut acc = 0.0;
        for i in 0..gh {
            for j in 0..gw {
                let (ax, ay) = anchor(i, j, self.stride);
                let dx = self.data[[0, i, j, 0]] - ax;
                let dy = self.data[[0, i, j, 1]] - ay;
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
        acc / (gh * gw) as f64
    }

    /// Rounds every coordinate through f32, so that the grid survives the
    /// on-disk float32 representation bit-exactly.
    pub fn quantize_f32(&mut self) {
        self.data.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Anchor pixel of grid cell (i, j) at stride `s`: cell centers.
pub fn anchor(i: usize, j: usize, s: usize) -> (f64, f64) {
    ((j as f64 + 0.5) * s as f64, (i as f64 + 0.5) * s as f64)
}

/// Shared geometry of one dataset/model rollout: image extent, grid stride,
/// and clip length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub frames: usize,
}

impl GridGeometry {
    pub fn grid_h(&self) -> usize {
        self.height / self.stride
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Validation("need at least 2 frames".into()));
        }
        if self.stride == 0 || self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::Validation(format!(
                "image {}x{} not divisible by stride {}",
                self.height, self.width, self.stride
            )));
        }
        Ok(())
    }
}

/// Trajectory grid with coordinates mapped to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGrid {
    data: Array4<f64>,
    stride: usize,
}

impl NormalizedGrid {
    pub fn new(data: Array4<f64>, stride: usize) -> Result<Self> {
        let grid = TrajectoryGrid::new(data, stride)?;
        Ok(Self {
            data: grid.data,
            stride: grid.stride,
        })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Exact inverse of [`TrajectoryGrid::normalize`].
    pub fn denormalize(&self, width: usize, height: usize) -> Result<TrajectoryGrid> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image extent must be positive".into()));
        }
        let mut data = self.data.clone();
        let (w, h) = (width as f64, height as f64);
        for mut point in data.rows_mut() {
            point[0] = (point[0] + 1.0) * w / 2.0;
            point[1] = (point[1] + 1.0) * h / 2.0;
        }
        Ok(TrajectoryGrid {
            data,
            stride: self.stride,
        })
    }
}

/// RGB image with values in [0, 1], shape `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pixels: Array3<f64>,
}

impl ImageRaster {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "image needs [H>0, W>0, 3], got [{h}, {w}, {c}]"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Builds from 8-bit RGB bytes (row-major). Values become k/255, which
    /// round-trip exactly through the 8-bit PPM representation.
    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        let pixels = Array3::from_shape_vec(
            (height, width, 3),
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(Self { pixels })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Object-instance ids at each track's frame-0 anchor. 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMaskGrid {
    ids: Array2<u16>,
}

impl ObjectMaskGrid {
    pub fn new(ids: Array2<u16>) -> Result<Self> {
        let (gh, gw) = ids.dim();
        if gh == 0 || gw == 0 {
            return Err(Error::Shape("mask grid must be non-empty".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &Array2<u16> {
        &self.ids
    }

    pub fn grid_h(&self) -> usize {
        self.ids.dim().0
    }

    pub fn grid_w(&self) -> usize {
        self.ids.dim().1
    }

    /// Distinct foreground ids present, ascending.
    pub fn object_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.ids.iter().copied().filter(|&id| id > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// One initial image with K ground-truth futures sharing frame-0 anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: ImageRaster,
    pub futures: Vec<TrajectoryGrid>,
    pub masks: ObjectMaskGrid,
    pub seed: u64,
    pub scene_id: String,
}

impl SceneRecord {
    /// Checks the record invariants: at least one future, consistent shapes,
    /// and bitwise-identical frame-0 slices across futures.
    pub fn validate(&self) -> Result<()> {
        if self.futures.is_empty() {
            return Err(Error::Validation("scene record needs K >= 1 futures".into()));
        }
        let first = &self.futures[0];
        let dim = first.data().dim();
        if (self.masks.grid_h(), self.masks.grid_w()) != (dim.1, dim.2) {
            return Err(Error::Shape(format!(
                "mask grid {:?} does not match track grid ({}, {})",
                self.masks.ids().dim(),
                dim.1,
                dim.2
            )));
        }
        for fut in &self.futures[1..] {
            if fut.data().dim() != dim {
                return Err(Error::Shape("futures disagree on grid shape".into()));
            }
            let a = first.data().index_axis(ndarray::Axis(0), 0);
            let b = fut.data().index_axis(ndarray::Axis(0), 0);
            if a != b {
                return Err(Error::Validation(
                    "futures do not share the frame-0 slice".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Stacks the tracks whose frame-0 anchor carries mask id `id` into an
/// `[N, 2T]` matrix. Row n is (x(0), y(0), ..., x(T-1), y(T-1)) for the n-th
/// matching cell in row-major grid order.
pub fn tracks_for_object(
    grid: &TrajectoryGrid,
    masks: &ObjectMaskGrid,
    id: u16,
) -> Result<Array2<f64>> {
    if id == 0 {
        return Err(Error::Validation("object ids start at 1".into()));
    }
    if (masks.grid_h(), masks.grid_w()) != (grid.grid_h(), grid.grid_w()) {
        return Err(Error::Shape("mask and grid dimensions differ".into()));
    }
    let t_len = grid.t_len();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for i in 0..grid.grid_h() {
        for j in 0..grid.grid_w() {
            if masks.ids()[[i, j]] != id {
                continue;
            }
            n += 1;
            for t in 0..t_len {
                rows.push(grid.data()[[t, i, j, 0]]);
                rows.push(grid.data()[[t, i, j, 1]]);
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptySelection { id });
    }
    Ok(Array2::from_shape_vec((n, 2 * t_len), rows).expect("row-major construction"))
}
