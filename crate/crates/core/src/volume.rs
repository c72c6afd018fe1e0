//! 3D scalar volumes, segmentation masks and fracture annotations.
//!
//! Volumes are stored in a two-file MetaImage-style container: a plain-text
//! `.mhd` header and a little-endian `.raw` payload. Axis convention used
//! throughout the crate: x runs left to right, y posterior to anterior and
//! z inferior to superior. The axial plane has fixed z, the coronal plane
//! fixed y and the sagittal plane fixed x.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// HU value used for samples that fall outside the volume.
pub const AIR_HU: f64 = -1000.0;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("raw payload has {actual} bytes, expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("malformed annotation row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("annotation on row {line} at ({x}, {y}, {z}) mm lies outside the volume")]
    OutOfBounds { line: usize, x: f64, y: f64, z: f64 },
    #[error("unknown process label {label:?} on row {line}")]
    UnknownLabel { line: usize, label: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Voxel payload, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    /// Signed 16-bit, Hounsfield units (`MET_SHORT`).
    I16(Vec<i16>),
    /// Unsigned 8-bit, masks (`MET_UCHAR`).
    U8(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::I16(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_type(&self) -> &'static str {
        match self {
            VoxelData::I16(_) => "MET_SHORT",
            VoxelData::U8(_) => "MET_UCHAR",
        }
    }

    #[inline]
    fn value(&self, i: usize) -> f64 {
        match self {
            VoxelData::I16(v) => v[i] as f64,
            VoxelData::U8(v) => v[i] as f64,
        }
    }
}

/// A dense 3D grid with physical spacing and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: VoxelData,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: VoxelData,
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::Invalid(format!("non-finite origin {origin:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same dims and spacing (the grid geometry two volumes must share to be overlaid).
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn contains_index(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }

    /// Voxel value as `f64`. Panics when out of bounds.
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data.value(self.linear_index(x, y, z))
    }

    /// Voxel value, or `fill` outside the grid.
    #[inline]
    pub fn get_or(&self, x: i64, y: i64, z: i64, fill: f64) -> f64 {
        if self.contains_index(x, y, z) {
            self.get(x as usize, y as usize, z as usize)
        } else {
            fill
        }
    }

    pub fn world(&self, index: [usize; 3]) -> [f64; 3] {
        self.continuous_world([index[0] as f64, index[1] as f64, index[2] as f64])
    }

    pub fn continuous_world(&self, index: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + index[0] * self.spacing[0],
            self.origin[1] + index[1] * self.spacing[1],
            self.origin[2] + index[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world point.
    pub fn continuous_index(&self, world: [f64; 3]) -> [f64; 3] {
        [
            (world[0] - self.origin[0]) / self.spacing[0],
            (world[1] - self.origin[1]) / self.spacing[1],
            (world[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel to a world point, if it lies on the grid.
    pub fn voxel_of(&self, world: [f64; 3]) -> Option<[usize; 3]> {
        let c = self.continuous_index(world);
        let r = [c[0].round(), c[1].round(), c[2].round()];
        if self.contains_index(r[0] as i64, r[1] as i64, r[2] as i64) {
            Some([r[0] as usize, r[1] as usize, r[2] as usize])
        } else {
            None
        }
    }

    /// World-space bounding box spanned by voxel centers, `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let max = self.world([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]);
        (self.origin, max)
    }

    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn as_i16(&self) -> Option<&[i16]> {
        match &self.data {
            VoxelData::I16(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::I16(_) => None,
        }
    }

    /// Axial slice `z` as a row-major (y rows, x columns) `f64` array.
    pub fn axial_slice(&self, z: usize) -> Vec<f64> {
        let n = self.dims[0] * self.dims[1];
        let start = z * n;
        (start..start + n).map(|i| self.data.value(i)).collect()
    }
}

/// Write `v` to `header_path` (`.mhd`) plus a sibling `.raw` payload.
pub fn save_volume(v: &Volume, header_path: &Path) -> Result<(), VolumeError> {
    let raw_path = header_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| VolumeError::Invalid(format!("bad path {}", header_path.display())))?
        .to_owned();

    let mut bytes = Vec::with_capacity(v.len() * 2);
    match &v.data {
        VoxelData::I16(d) => d.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        VoxelData::U8(d) => bytes.extend_from_slice(d),
    }

    let [nx, ny, nz] = v.dims;
    let [sx, sy, sz] = v.spacing;
    let [ox, oy, oz] = v.origin;
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
    header.push_str(&format!("ElementSpacing = {sx:?} {sy:?} {sz:?}\n"));
    header.push_str(&format!("Offset = {ox:?} {oy:?} {oz:?}\n"));
    header.push_str(&format!("ElementType = {}\n", v.data.element_type()));
    header.push_str(&format!("ElementDataFile = {raw_name}\n"));

    fs::write(&raw_path, &bytes)?;
    let mut f = fs::File::create(header_path)?;
    f.write_all(header.as_bytes())?;
    Ok(())
}

fn parse_triple<T: FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3], VolumeError> {
    let bad = |reason: String| VolumeError::MalformedHeader {
        path: path.to_owned(),
        reason,
    };
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(bad(format!("{key} needs 3 values, got {value:?}")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| bad(format!("{key}: cannot parse {p:?}")))?,
        );
    }
    match <[T; 3]>::try_from(out) {
        Ok(a) => Ok(a),
        Err(_) => unreachable!(),
    }
}

/// Read a `.mhd` header and its raw payload.
pub fn load_volume(header_path: &Path) -> Result<Volume, VolumeError> {
    if !header_path.is_file() {
        return Err(VolumeError::MissingFile(header_path.to_owned()));
    }
    let text = fs::read_to_string(header_path)?;
    let bad = |reason: String| VolumeError::MalformedHeader {
        path: header_path.to_owned(),
        reason,
    };

    let mut ndims = None;
    let mut dims = None;
    let mut spacing = None;
    let mut origin = None;
    let mut element = None;
    let mut data_file = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => ndims = Some(value.to_owned()),
            "DimSize" => dims = Some(parse_triple::<usize>(header_path, key, value)?),
            "ElementSpacing" => spacing = Some(parse_triple::<f64>(header_path, key, value)?),
            "Offset" | "Origin" | "Position" => {
                origin = Some(parse_triple::<f64>(header_path, key, value)?)
            }
            "ElementType" => element = Some(value.to_owned()),
            "ElementDataFile" => data_file = Some(value.to_owned()),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(bad("big-endian payloads are not supported".into()));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(bad("compressed payloads are not supported".into()));
                }
            }
            _ => {}
        }
    }

    match ndims.as_deref() {
        Some("3") => {}
        Some(other) => return Err(bad(format!("NDims must be 3, got {other}"))),
        None => return Err(bad("missing NDims".into())),
    }
    let dims = dims.ok_or_else(|| bad("missing DimSize".into()))?;
    let spacing = spacing.unwrap_or([1.0; 3]);
    let origin = origin.unwrap_or([0.0; 3]);
    let element = element.ok_or_else(|| bad("missing ElementType".into()))?;
    let data_file = data_file.ok_or_else(|| bad("missing ElementDataFile".into()))?;

    let raw_path = match header_path.parent() {
        Some(dir) => dir.join(&data_file),
        None => PathBuf::from(&data_file),
    };
    if !raw_path.is_file() {
        return Err(VolumeError::MissingFile(raw_path));
    }
    let bytes = fs::read(&raw_path)?;
    let n = dims[0] * dims[1] * dims[2];
    let data = match element.as_str() {
        "MET_SHORT" => {
            if bytes.len() != 2 * n {
                return Err(VolumeError::SizeMismatch {
                    expected: 2 * n,
                    actual: bytes.len(),
                });
            }
            VoxelData::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            )
        }
        "MET_UCHAR" => {
            if bytes.len() != n {
                return Err(VolumeError::SizeMismatch {
                    expected: n,
                    actual: bytes.len(),
                });
            }
            VoxelData::U8(bytes)
        }
        other => return Err(bad(format!("unsupported ElementType {other}"))),
    };
    Volume::new(dims, spacing, origin, data).map_err(|e| match e {
        VolumeError::Invalid(reason) => bad(reason),
        e => e,
    })
}

/// Posterior-element process an annotation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProcessLabel {
    LeftProcess,
    RightProcess,
    SpinousProcess,
}

impl ProcessLabel {
    pub const ALL: [ProcessLabel; 3] = [
        ProcessLabel::LeftProcess,
        ProcessLabel::RightProcess,
        ProcessLabel::SpinousProcess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcessLabel::LeftProcess => "left",
            ProcessLabel::RightProcess => "right",
            ProcessLabel::SpinousProcess => "spinous",
        }
    }
}

impl fmt::Display for ProcessLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcessLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(ProcessLabel::LeftProcess),
            "right" => Ok(ProcessLabel::RightProcess),
            "spinous" => Ok(ProcessLabel::SpinousProcess),
            _ => Err(()),
        }
    }
}

/// A marked fracture location in world millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub patient_id: String,
    pub position: [f64; 3],
    pub process_label: ProcessLabel,
}

/// Parse annotations from CSV text, validating each against `v`'s bounding box.
pub fn parse_annotations(text: &str, v: &Volume) -> Result<Vec<Annotation>, VolumeError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| VolumeError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != 5 {
            return Err(VolumeError::MalformedRow {
                line,
                reason: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let mut pos = [0.0; 3];
        for k in 0..3 {
            pos[k] = rec[k + 1]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| VolumeError::MalformedRow {
                    line,
                    reason: format!("bad coordinate {:?}", &rec[k + 1]),
                })?;
        }
        let label = rec[4]
            .parse::<ProcessLabel>()
            .map_err(|_| VolumeError::UnknownLabel {
                line,
                label: rec[4].to_owned(),
            })?;
        if !v.contains_world(pos) {
            return Err(VolumeError::OutOfBounds {
                line,
                x: pos[0],
                y: pos[1],
                z: pos[2],
            });
        }
        out.push(Annotation {
            patient_id: rec[0].to_owned(),
            position: pos,
            process_label: label,
        });
    }
    Ok(out)
}

pub fn load_annotations(csv_path: &Path, v: &Volume) -> Result<Vec<Annotation>, VolumeError> {
    if !csv_path.is_file() {
        return Err(VolumeError::MissingFile(csv_path.to_owned()));
    }
    let text = fs::read_to_string(csv_path)?;
    parse_annotations(&text, v)
}

pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut s = String::from("patient_id,x_mm,y_mm,z_mm,process_label\n");
    for a in annotations {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{}\n",
            a.patient_id, a.position[0], a.position[1], a.position[2], a.process_label
        ));
    }
    s
}

pub fn save_annotations(annotations: &[Annotation], csv_path: &Path) -> Result<(), VolumeError> {
    fs::write(csv_path, format_annotations(annotations))?;
    Ok(())
}
