//! Slice preprocessing: HU windowing, spatial standardization and [−1, 1] scaling.
//!
//! The pipeline order is clip → crop/pad → normalize, so padding is done in
//! HU space. By default the pad value is the window floor, which normalizes
//! to −1; [`PadValue::LiteralZero`] pads with 0 HU instead.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawSlice;
use crate::schema::SliceRef;

pub const TARGET_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("window width must be positive and finite, got {0}")]
    InvalidWindow(f64),
    #[error("non-finite HU value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("value {value} at ({row}, {col}) lies outside window [{lo}, {hi}]; clip first")]
    OutsideWindow {
        row: usize,
        col: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{}: {message}", path.display())]
    Tensor { path: PathBuf, message: String },
}

/// Display window in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl Default for WindowSpec {
    /// Abdominal soft-tissue window: W=400, L=50.
    fn default() -> Self {
        WindowSpec {
            level: 50.0,
            width: 400.0,
        }
    }
}

impl WindowSpec {
    pub fn new(level: f64, width: f64) -> Result<Self, PreprocessError> {
        if !(width.is_finite() && width > 0.0 && level.is_finite()) {
            return Err(PreprocessError::InvalidWindow(width));
        }
        Ok(WindowSpec { level, width })
    }

    pub fn lo(&self) -> f64 {
        self.level - self.width / 2.0
    }

    pub fn hi(&self) -> f64 {
        self.level + self.width / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialOp {
    None,
    CenterCrop,
    ZeroPad,
    /// Cropped along one axis and padded along the other.
    CropAndPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadValue {
    /// Window lower bound; normalizes to −1.
    #[default]
    WindowFloor,
    /// 0 HU.
    LiteralZero,
}

impl PadValue {
    pub fn hu(self, w: &WindowSpec) -> f64 {
        match self {
            PadValue::WindowFloor => w.lo(),
            PadValue::LiteralZero => 0.0_f64.clamp(w.lo(), w.hi()),
        }
    }
}

/// A model-ready slice: 512×512, every value in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub grid: Array2<f64>,
    pub window: WindowSpec,
    pub spatial_op: SpatialOp,
    pub source: Option<SliceRef>,
}

/// Clamps every HU value into the window.
pub fn window_clip(hu: &Array2<f64>, w: &WindowSpec) -> Result<Array2<f64>, PreprocessError> {
    if let Some(((row, col), _)) = hu.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(PreprocessError::NonFinite { row, col });
    }
    let (lo, hi) = (w.lo(), w.hi());
    Ok(hu.mapv(|v| v.clamp(lo, hi)))
}

/// Affine map of the window onto [−1, 1]: `2·(x − lo)/(hi − lo) − 1`.
pub fn normalize(clipped: &Array2<f64>, w: &WindowSpec) -> Result<Array2<f64>, PreprocessError> {
    let (lo, hi) = (w.lo(), w.hi());
    if let Some(((row, col), &value)) = clipped
        .indexed_iter()
        .find(|(_, &v)| !(lo..=hi).contains(&v))
    {
        return Err(PreprocessError::OutsideWindow {
            row,
            col,
            value,
            lo,
            hi,
        });
    }
    let span = hi - lo;
    Ok(clipped.mapv(|x| (2.0 * (x - lo) / span - 1.0).clamp(-1.0, 1.0)))
}

/// Inverse of [`normalize`].
pub fn denormalize(grid: &Array2<f64>, w: &WindowSpec) -> Array2<f64> {
    let (lo, hi) = (w.lo(), w.hi());
    grid.mapv(|y| (y + 1.0) / 2.0 * (hi - lo) + lo)
}

/// Per-axis (start, keep) for cropping or (before, after) for padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisPlan {
    Keep,
    /// Keep source range `[start, start + target)`.
    Crop { start: usize },
    Pad { before: usize, after: usize },
}

/// Centered plan for one axis; odd remainders go to the bottom/right.
pub fn axis_plan(len: usize, target: usize) -> AxisPlan {
    use std::cmp::Ordering::*;
    match len.cmp(&target) {
        Equal => AxisPlan::Keep,
        Greater => AxisPlan::Crop {
            start: (len - target) / 2,
        },
        Less => {
            let before = (target - len) / 2;
            AxisPlan::Pad {
                before,
                after: target - len - before,
            }
        }
    }
}

/// Center-crops or pads each axis to `target`, padding with `pad`.
pub fn spatial_standardize(grid: &Array2<f64>, target: usize, pad: f64) -> (Array2<f64>, SpatialOp) {
    let (rows, cols) = grid.dim();
    let (rp, cp) = (axis_plan(rows, target), axis_plan(cols, target));

    let mut out = Array2::from_elem((target, target), pad);
    let (src_r, dst_r) = ranges(rp, rows, target);
    let (src_c, dst_c) = ranges(cp, cols, target);
    out.slice_mut(s![dst_r.0..dst_r.1, dst_c.0..dst_c.1])
        .assign(&grid.slice(s![src_r.0..src_r.1, src_c.0..src_c.1]));

    let cropped = matches!(rp, AxisPlan::Crop { .. }) || matches!(cp, AxisPlan::Crop { .. });
    let padded = matches!(rp, AxisPlan::Pad { .. }) || matches!(cp, AxisPlan::Pad { .. });
    let op = match (cropped, padded) {
        (false, false) => SpatialOp::None,
        (true, false) => SpatialOp::CenterCrop,
        (false, true) => SpatialOp::ZeroPad,
        (true, true) => SpatialOp::CropAndPad,
    };
    (out, op)
}

// (source range, destination range) along one axis.
fn ranges(plan: AxisPlan, len: usize, target: usize) -> ((usize, usize), (usize, usize)) {
    match plan {
        AxisPlan::Keep => ((0, len), (0, len)),
        AxisPlan::Crop { start } => ((start, start + target), (0, target)),
        AxisPlan::Pad { before, .. } => ((0, len), (before, before + len)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub window: WindowSpec,
    #[serde(default)]
    pub pad: PadValue,
}

/// clip → crop/pad → normalize.
pub fn preprocess_slice(raw: &RawSlice, opts: &PreprocessOptions) -> Result<SliceImage, PreprocessError> {
    preprocess_grid(&raw.hu, opts).map(|mut img| {
        img.source = Some(raw.source.clone());
        img
    })
}

pub fn preprocess_grid(hu: &Array2<f64>, opts: &PreprocessOptions) -> Result<SliceImage, PreprocessError> {
    let w = opts.window;
    let clipped = window_clip(hu, &w)?;
    let (standard, spatial_op) = spatial_standardize(&clipped, TARGET_SIZE, opts.pad.hu(&w));
    let grid = normalize(&standard, &w)?;
    Ok(SliceImage {
        grid,
        window: w,
        spatial_op,
        source: None,
    })
}

/// Sidecar descriptor for a raw float32 tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub rows: usize,
    pub cols: usize,
    pub window: WindowSpec,
    pub annotation_id: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "float32_le".to_string()
}

/// Writes `{stem}.f32` (row-major little-endian float32) and `{stem}.json`.
pub fn export_tensor(img: &SliceImage, annotation_id: &str, dir: &Path, stem: &str) -> Result<PathBuf, PreprocessError> {
    let bin = dir.join(format!("{stem}.f32"));
    let json = dir.join(format!("{stem}.json"));
    let err = |path: &Path, e: std::io::Error| PreprocessError::Tensor {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut bytes = Vec::with_capacity(img.grid.len() * 4);
    for &v in img.grid.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(&bin)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| err(&bin, e))?;
    let (rows, cols) = img.grid.dim();
    let desc = TensorDescriptor {
        rows,
        cols,
        window: img.window,
        annotation_id: annotation_id.to_string(),
        dtype: default_dtype(),
    };
    let text = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    fs::write(&json, text + "\n").map_err(|e| err(&json, e))?;
    Ok(bin)
}

/// Reads a tensor written by [`export_tensor`], given the `.json` sidecar path.
pub fn load_tensor(sidecar: &Path) -> Result<(TensorDescriptor, SliceImage), PreprocessError> {
    let err = |path: &Path, message: String| PreprocessError::Tensor {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(sidecar).map_err(|e| err(sidecar, e.to_string()))?;
    let desc: TensorDescriptor = serde_json::from_str(&text).map_err(|e| err(sidecar, e.to_string()))?;
    let bin = sidecar.with_extension("f32");
    let bytes = fs::read(&bin).map_err(|e| err(&bin, e.to_string()))?;
    if bytes.len() != desc.rows * desc.cols * 4 {
        return Err(err(
            &bin,
            format!("expected {} bytes, found {}", desc.rows * desc.cols * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let grid = Array2::from_shape_vec((desc.rows, desc.cols), data).expect("length checked");
    let img = SliceImage {
        grid,
        window: desc.window,
        spatial_op: SpatialOp::None,
        source: None,
    };
    Ok((desc, img))
}

/// Maps [−1, 1] onto 8-bit gray.
pub fn to_gray8(img: &SliceImage) -> image::GrayImage {
    let (rows, cols) = img.grid.dim();
    let buf = img
        .grid
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    image::GrayImage::from_raw(cols as u32, rows as u32, buf).expect("buffer matches dims")
}
