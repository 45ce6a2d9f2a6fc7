//! DICOM series loading and slice-reference resolution.
//!
//! Slices are ordered by `SliceLocation` (ties broken by `InstanceNumber`,
//! then file name) and a report reference "series S image N" selects the
//! N-th slice of that order, 1-based. `InstanceNumber` is kept for audit only.
//!
//! Stored pixel values are kept as read; the rescale to Hounsfield Units is
//! applied once, in [`resolve_slice`].

use std::borrow::Cow;
use std::cmp::Ordering;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dicom_core::{DataElement, PrimitiveValue, Tag, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{open_file, FileMetaTableBuilder, InMemDicomObject};
use ndarray::Array2;
use thiserror::Error;

use crate::schema::SliceRef;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: not readable as DICOM: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: missing required attribute {attribute}", path.display())]
    MissingAttribute {
        path: PathBuf,
        attribute: &'static str,
    },
    #[error("{}: unsupported pixel encoding: {message}", path.display())]
    UnsupportedPixels { path: PathBuf, message: String },
    #[error("{}: grid {rows}x{cols} differs from series grid {expected_rows}x{expected_cols}", path.display())]
    InconsistentDims {
        path: PathBuf,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{}: no DICOM files found", path.display())]
    EmptySeries { path: PathBuf },
    #[error("image number {index} out of range for a volume of {len} slices")]
    OutOfRange { index: u32, len: usize },
    #[error("{}: failed to write DICOM: {message}", path.display())]
    Write { path: PathBuf, message: String },
}

/// One slice as read from disk: stored values plus rescale parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    pub source: PathBuf,
    pub slice_location: f64,
    pub instance_number: i32,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub rows: usize,
    pub cols: usize,
    /// (row_mm, col_mm)
    pub pixel_spacing: Option<(f64, f64)>,
    /// Row-major stored values, before rescale.
    pub stored: Vec<i32>,
}

impl CtSlice {
    /// Applies `slope * stored + intercept`.
    pub fn to_hu(&self) -> Array2<f64> {
        let data = self
            .stored
            .iter()
            .map(|&s| self.rescale_slope * f64::from(s) + self.rescale_intercept)
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), data).expect("stored length matches dims")
    }
}

/// A series sorted ascending by slice location.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    slices: Vec<CtSlice>,
    rows: usize,
    cols: usize,
}

fn slice_order(a: &CtSlice, b: &CtSlice) -> Ordering {
    a.slice_location
        .total_cmp(&b.slice_location)
        .then(a.instance_number.cmp(&b.instance_number))
        .then_with(|| a.source.cmp(&b.source))
}

impl CtVolume {
    /// Sorts `slices` and checks that they share one grid.
    pub fn from_slices(mut slices: Vec<CtSlice>) -> Result<Self, IngestError> {
        let first = slices.first().ok_or_else(|| IngestError::EmptySeries {
            path: PathBuf::new(),
        })?;
        let (rows, cols) = (first.rows, first.cols);
        for s in &slices {
            if s.rows != rows || s.cols != cols {
                return Err(IngestError::InconsistentDims {
                    path: s.source.clone(),
                    rows: s.rows,
                    cols: s.cols,
                    expected_rows: rows,
                    expected_cols: cols,
                });
            }
        }
        slices.sort_by(slice_order);
        Ok(CtVolume { slices, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn slices(&self) -> &[CtSlice] {
        &self.slices
    }

    pub fn slice_locations(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.slice_location).collect()
    }

    /// Slice at a 1-based position, optionally counting from the highest location.
    pub fn slice_at(&self, image_number: u32, descending: bool) -> Result<&CtSlice, IngestError> {
        let n = self.slices.len();
        let idx = image_number as usize;
        if idx < 1 || idx > n {
            return Err(IngestError::OutOfRange {
                index: image_number,
                len: n,
            });
        }
        let pos = if descending { n - idx } else { idx - 1 };
        Ok(&self.slices[pos])
    }
}

/// A referenced slice in Hounsfield Units.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    pub hu: Array2<f64>,
    pub source: SliceRef,
    pub slice_location: f64,
    pub instance_number: i32,
    pub pixel_spacing: Option<(f64, f64)>,
    pub file: PathBuf,
}

const DICOM_MAGIC_OFFSET: usize = 128;

fn has_dicom_magic(path: &Path) -> bool {
    let mut buf = [0u8; DICOM_MAGIC_OFFSET + 4];
    match fs::File::open(path).and_then(|mut f| f.read_exact(&mut buf)) {
        Ok(()) => &buf[DICOM_MAGIC_OFFSET..] == b"DICM",
        Err(_) => false,
    }
}

/// Reads every part-10 file in `dir` into a sorted volume.
///
/// Files without the `DICM` preamble marker are skipped.
pub fn load_series(dir: impl AsRef<Path>) -> Result<CtVolume, IngestError> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && has_dicom_magic(&path) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(IngestError::EmptySeries {
            path: dir.to_path_buf(),
        });
    }
    paths.sort();
    let slices = paths
        .iter()
        .map(|p| read_slice(p))
        .collect::<Result<Vec<_>, _>>()?;
    CtVolume::from_slices(slices)
}

fn read_slice(path: &Path) -> Result<CtSlice, IngestError> {
    let obj = open_file(path).map_err(|e| IngestError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let missing = |attribute| IngestError::MissingAttribute {
        path: path.to_path_buf(),
        attribute,
    };
    let float = |tag: Tag, name: &'static str| -> Result<f64, IngestError> {
        obj.element_opt(tag)
            .ok()
            .flatten()
            .and_then(|e| e.to_float64().ok())
            .ok_or_else(|| missing(name))
    };
    let int = |tag: Tag, name: &'static str| -> Result<i64, IngestError> {
        obj.element_opt(tag)
            .ok()
            .flatten()
            .and_then(|e| e.to_int::<i64>().ok())
            .ok_or_else(|| missing(name))
    };

    let slice_location = float(tags::SLICE_LOCATION, "SliceLocation")?;
    let rows = int(tags::ROWS, "Rows")? as usize;
    let cols = int(tags::COLUMNS, "Columns")? as usize;
    let rescale_slope = float(tags::RESCALE_SLOPE, "RescaleSlope")?;
    let rescale_intercept = float(tags::RESCALE_INTERCEPT, "RescaleIntercept")?;
    let instance_number = int(tags::INSTANCE_NUMBER, "InstanceNumber").unwrap_or(0) as i32;
    let bits_allocated = int(tags::BITS_ALLOCATED, "BitsAllocated").unwrap_or(16);
    let signed = int(tags::PIXEL_REPRESENTATION, "PixelRepresentation").unwrap_or(0) == 1;
    let pixel_spacing = obj
        .element_opt(tags::PIXEL_SPACING)
        .ok()
        .flatten()
        .and_then(|e| e.to_multi_float64().ok())
        .and_then(|v| (v.len() == 2).then(|| (v[0], v[1])));

    let pixel_elem = obj
        .element_opt(tags::PIXEL_DATA)
        .ok()
        .flatten()
        .ok_or_else(|| missing("PixelData"))?;
    let bytes: Cow<[u8]> = pixel_elem
        .to_bytes()
        .map_err(|e| IngestError::UnsupportedPixels {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;

    let n = rows * cols;
    let stored: Vec<i32> = match (bits_allocated, signed) {
        (16, false) => bytes
            .chunks_exact(2)
            .take(n)
            .map(|c| i32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        (16, true) => bytes
            .chunks_exact(2)
            .take(n)
            .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        (8, false) => bytes.iter().take(n).map(|&b| i32::from(b)).collect(),
        (8, true) => bytes.iter().take(n).map(|&b| i32::from(b as i8)).collect(),
        (bits, _) => {
            return Err(IngestError::UnsupportedPixels {
                path: path.to_path_buf(),
                message: format!("BitsAllocated {bits}"),
            })
        }
    };
    if stored.len() != n {
        return Err(IngestError::UnsupportedPixels {
            path: path.to_path_buf(),
            message: format!("expected {n} pixels, found {}", stored.len()),
        });
    }

    Ok(CtSlice {
        source: path.to_path_buf(),
        slice_location,
        instance_number,
        rescale_slope,
        rescale_intercept,
        rows,
        cols,
        pixel_spacing,
        stored,
    })
}

/// Resolves a report reference to the rescaled slice it names.
pub fn resolve_slice(volume: &CtVolume, slice_ref: &SliceRef) -> Result<RawSlice, IngestError> {
    let s = volume.slice_at(slice_ref.image_number, slice_ref.descending)?;
    Ok(RawSlice {
        hu: s.to_hu(),
        source: slice_ref.clone(),
        slice_location: s.slice_location,
        instance_number: s.instance_number,
        pixel_spacing: s.pixel_spacing,
        file: s.source.clone(),
    })
}

/// `index` plus each in-range `index + offset`, in offset order with the
/// center inserted at its natural place. Out-of-range offsets are dropped.
pub fn adjacent_indices(len: usize, index: u32, offsets: &[i64]) -> Vec<u32> {
    let mut out: Vec<i64> = offsets
        .iter()
        .filter(|&&o| o != 0)
        .map(|&o| i64::from(index) + o)
        .filter(|&i| i >= 1 && i <= len as i64)
        .collect();
    out.push(i64::from(index));
    out.sort_unstable();
    out.dedup();
    out.into_iter().map(|i| i as u32).collect()
}

/// Default augmentation offsets: the neighbouring slices on either side.
pub const ADJACENT_OFFSETS: [i64; 2] = [-1, 1];

/// Series-level attributes written with every exported slice.
#[derive(Clone, Debug)]
pub struct SeriesInfo {
    pub patient_id: String,
    pub study_uid: String,
    pub series_uid: String,
    pub series_number: u32,
}

fn put_str(obj: &mut InMemDicomObject, tag: Tag, vr: VR, value: impl Into<String>) {
    obj.put(DataElement::new(tag, vr, PrimitiveValue::from(value.into())));
}

fn put_u16(obj: &mut InMemDicomObject, tag: Tag, value: u16) {
    obj.put(DataElement::new(tag, VR::US, PrimitiveValue::from(value)));
}

/// Writes one CT slice as an explicit-VR little-endian part-10 file with
/// unsigned 16-bit stored values.
pub fn write_dicom_slice(path: &Path, slice: &CtSlice, series: &SeriesInfo) -> Result<(), IngestError> {
    let write_err = |message: String| IngestError::Write {
        path: path.to_path_buf(),
        message,
    };
    let sop_uid = format!("{}.{}", series.series_uid, slice.instance_number.max(0));
    let mut obj = InMemDicomObject::new_empty();
    put_str(&mut obj, tags::SOP_CLASS_UID, VR::UI, uids::CT_IMAGE_STORAGE);
    put_str(&mut obj, tags::SOP_INSTANCE_UID, VR::UI, sop_uid.clone());
    put_str(&mut obj, tags::MODALITY, VR::CS, "CT");
    put_str(&mut obj, tags::PATIENT_ID, VR::LO, series.patient_id.clone());
    put_str(&mut obj, tags::STUDY_INSTANCE_UID, VR::UI, series.study_uid.clone());
    put_str(&mut obj, tags::SERIES_INSTANCE_UID, VR::UI, series.series_uid.clone());
    put_str(&mut obj, tags::SERIES_NUMBER, VR::IS, series.series_number.to_string());
    put_str(&mut obj, tags::INSTANCE_NUMBER, VR::IS, slice.instance_number.to_string());
    put_str(&mut obj, tags::SLICE_LOCATION, VR::DS, format_ds(slice.slice_location));
    put_str(&mut obj, tags::RESCALE_SLOPE, VR::DS, format_ds(slice.rescale_slope));
    put_str(&mut obj, tags::RESCALE_INTERCEPT, VR::DS, format_ds(slice.rescale_intercept));
    if let Some((r, c)) = slice.pixel_spacing {
        put_str(
            &mut obj,
            tags::PIXEL_SPACING,
            VR::DS,
            format!("{}\\{}", format_ds(r), format_ds(c)),
        );
    }
    put_u16(&mut obj, tags::SAMPLES_PER_PIXEL, 1);
    put_str(&mut obj, tags::PHOTOMETRIC_INTERPRETATION, VR::CS, "MONOCHROME2");
    put_u16(&mut obj, tags::ROWS, slice.rows as u16);
    put_u16(&mut obj, tags::COLUMNS, slice.cols as u16);
    put_u16(&mut obj, tags::BITS_ALLOCATED, 16);
    put_u16(&mut obj, tags::BITS_STORED, 16);
    put_u16(&mut obj, tags::HIGH_BIT, 15);
    put_u16(&mut obj, tags::PIXEL_REPRESENTATION, 0);
    let pixels = slice
        .stored
        .iter()
        .map(|&v| u16::try_from(v).map_err(|_| write_err(format!("stored value {v} outside u16"))))
        .collect::<Result<Vec<u16>, _>>()?;
    obj.put(DataElement::new(
        tags::PIXEL_DATA,
        VR::OW,
        PrimitiveValue::U16(pixels.into()),
    ));

    let file = obj
        .with_meta(
            FileMetaTableBuilder::new()
                .transfer_syntax(uids::EXPLICIT_VR_LITTLE_ENDIAN)
                .media_storage_sop_class_uid(uids::CT_IMAGE_STORAGE)
                .media_storage_sop_instance_uid(sop_uid),
        )
        .map_err(|e| write_err(e.to_string()))?;
    file.write_to_file(path).map_err(|e| write_err(e.to_string()))
}

fn format_ds(v: f64) -> String {
    // DS values are limited to 16 characters.
    let s = format!("{v}");
    if s.len() <= 16 {
        s
    } else {
        format!("{v:.6}")
    }
}

/// Exports stored values (HU + 32768, clamped) as a 16-bit grayscale PNG.
pub fn export_png16(raw: &RawSlice, path: &Path) -> Result<(), IngestError> {
    let (rows, cols) = raw.hu.dim();
    let buf: Vec<u16> = raw
        .hu
        .iter()
        .map(|&h| (h + 32768.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(cols as u32, rows as u32, buf)
        .expect("buffer matches dims");
    img.save(path).map_err(|e| IngestError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Inspection PNG name for a resolved slice.
pub fn png_name(report_id: &str, slice_ref: &SliceRef) -> String {
    format!(
        "{}_{}_{}.png",
        report_id, slice_ref.series_number, slice_ref.image_number
    )
}

/// Directory convention: `{root}/{report_id}/series_{series_number}`.
pub fn series_dir(root: &Path, report_id: &str, series_number: u32) -> PathBuf {
    root.join(report_id).join(format!("series_{series_number}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(loc: f64, inst: i32, name: &str, fill: i32) -> CtSlice {
        CtSlice {
            source: PathBuf::from(name),
            slice_location: loc,
            instance_number: inst,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            rows: 2,
            cols: 2,
            pixel_spacing: None,
            stored: vec![fill; 4],
        }
    }

    #[test]
    fn sorts_by_slice_location() {
        let v = CtVolume::from_slices(vec![
            slice(12.0, 1, "a", 0),
            slice(10.0, 2, "b", 0),
            slice(11.0, 3, "c", 0),
        ])
        .unwrap();
        assert_eq!(v.slice_locations(), vec![10.0, 11.0, 12.0]);
    }

    #[test]
    fn ties_break_by_instance_then_name() {
        let v = CtVolume::from_slices(vec![
            slice(5.0, 2, "a", 0),
            slice(5.0, 1, "z", 0),
            slice(5.0, 1, "b", 0),
        ])
        .unwrap();
        let names: Vec<_> = v.slices().iter().map(|s| s.source.clone()).collect();
        assert_eq!(names, vec![PathBuf::from("b"), PathBuf::from("z"), PathBuf::from("a")]);
    }

    #[test]
    fn water_maps_to_zero_hu() {
        let s = slice(0.0, 1, "w", 1024);
        assert!(s.to_hu().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn resolve_first_and_last() {
        let v = CtVolume::from_slices(vec![
            slice(3.0, 1, "a", 3),
            slice(1.0, 2, "b", 1),
            slice(2.0, 3, "c", 2),
        ])
        .unwrap();
        let first = resolve_slice(&v, &SliceRef::coronal(4, 1)).unwrap();
        assert_eq!(first.slice_location, 1.0);
        let last = resolve_slice(&v, &SliceRef::coronal(4, 3)).unwrap();
        assert_eq!(last.slice_location, 3.0);
        let desc = SliceRef {
            descending: true,
            ..SliceRef::coronal(4, 1)
        };
        assert_eq!(resolve_slice(&v, &desc).unwrap().slice_location, 3.0);
    }

    #[test]
    fn out_of_range_reports_index_and_size() {
        let v = CtVolume::from_slices(vec![slice(1.0, 1, "a", 0)]).unwrap();
        let err = resolve_slice(&v, &SliceRef::coronal(4, 2)).unwrap_err();
        assert!(matches!(err, IngestError::OutOfRange { index: 2, len: 1 }));
        assert!(resolve_slice(&v, &SliceRef::coronal(4, 0)).is_err());
    }

    #[test]
    fn mismatched_grids_rejected() {
        let mut odd = slice(2.0, 2, "b", 0);
        odd.rows = 3;
        odd.stored = vec![0; 6];
        let err = CtVolume::from_slices(vec![slice(1.0, 1, "a", 0), odd]).unwrap_err();
        assert!(matches!(err, IngestError::InconsistentDims { .. }));
    }

    #[test]
    fn adjacent_interior_and_boundaries() {
        assert_eq!(adjacent_indices(300, 167, &ADJACENT_OFFSETS), vec![166, 167, 168]);
        assert_eq!(adjacent_indices(300, 1, &ADJACENT_OFFSETS), vec![1, 2]);
        assert_eq!(adjacent_indices(300, 300, &ADJACENT_OFFSETS), vec![299, 300]);
        assert_eq!(adjacent_indices(1, 1, &ADJACENT_OFFSETS), vec![1]);
    }

    #[test]
    fn png_name_pattern() {
        assert_eq!(png_name("r12", &SliceRef::coronal(4, 167)), "r12_4_167.png");
    }
}
