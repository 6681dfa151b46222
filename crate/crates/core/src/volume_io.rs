//! 3D volume container (`.vol`) and nodule annotation tables (`.csv`).
//!
//! A `.vol` file is one line of JSON header followed by raw little-endian f32
//! voxels in x-fastest order:
//!
//! ```text
//! {"dims":[x,y,z],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"dtype":"f32le"}\n<payload>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ClassLabel;

pub const VOLUME_EXTENSION: &str = "vol";
pub const ANNOTATION_COLUMNS: [&str; 6] = ["volume_id", "cx_mm", "cy_mm", "cz_mm", "diameter_mm", "scores"];

/// Scalar field in HU on a regular grid, indexed `[x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::Validation("volume has no voxels".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Validation(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Volume {
            voxels,
            spacing,
            origin,
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.voxels
    }

    pub fn dims(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// World (mm) to continuous voxel coordinates.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + v[a] * self.spacing[a])
    }

    /// Checks every invariant, including finiteness of each voxel.
    pub fn validate(&self) -> Result<()> {
        if let Some(idx) = self.voxels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite voxel {} at {:?}",
                idx.1, idx.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
}

/// Serialises a volume into the `.vol` byte layout.
pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    volume.validate()?;
    let header = Header {
        dims: volume.dims(),
        spacing: volume.spacing,
        origin: volume.origin,
        dtype: "f32le".into(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(Error::json("volume header"))?;
    bytes.push(b'\n');
    bytes.reserve(volume.voxels.len() * 4);
    // Reversed axes iterate x fastest.
    for v in volume.voxels.t().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let header_err = |msg: String| Error::Header {
        path: path.to_path_buf(),
        msg,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("missing header terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| header_err(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(header_err(format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.dims.contains(&0) {
        return Err(header_err(format!("zero dimension in {:?}", header.dims)));
    }
    let payload = &bytes[newline + 1..];
    let count: usize = header.dims.iter().product();
    if payload.len() != count * 4 {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected: count * 4,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [x, y, z] = header.dims;
    let voxels = Array3::from_shape_vec((x, y, z).f(), data)
        .map_err(|e| header_err(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Volume::new(voxels, header.spacing, header.origin).map_err(|e| header_err(e.to_string()))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_volume(&bytes, path)
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_volume(volume)?;
    let mut file = fs::File::create(path).map_err(Error::io(path))?;
    file.write_all(&bytes).map_err(Error::io(path))
}

/// One annotated nodule: world-space centre, diameter, and per-reader scores.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleAnnotation {
    pub source_volume_id: String,
    pub center: [f64; 3],
    pub diameter_mm: f64,
    pub scores: Vec<u8>,
}

impl NoduleAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::Validation("no malignancy scores".into()));
        }
        if let Some(s) = self.scores.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::Validation(format!("score {s} outside 1..=5")));
        }
        if !(self.diameter_mm.is_finite() && self.diameter_mm > 0.0) {
            return Err(Error::Validation(format!(
                "diameter must be positive, got {}",
                self.diameter_mm
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite centre".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> Result<ClassLabel> {
        consensus_malignancy(&self.scores)
    }
}

fn parse_row(record: &csv::StringRecord) -> Result<NoduleAnnotation> {
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    let num = |i: usize| -> Result<f64> {
        field(i).parse::<f64>().map_err(|_| {
            Error::Validation(format!("column `{}`: `{}` is not a number", ANNOTATION_COLUMNS[i], field(i)))
        })
    };
    if record.len() != ANNOTATION_COLUMNS.len() {
        return Err(Error::Validation(format!(
            "expected {} fields, found {}",
            ANNOTATION_COLUMNS.len(),
            record.len()
        )));
    }
    let scores = field(5)
        .split(';')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .map_err(|_| Error::Validation(format!("score `{}` is not an integer", s.trim())))
        })
        .collect::<Result<Vec<u8>>>()?;
    let annotation = NoduleAnnotation {
        source_volume_id: field(0).to_string(),
        center: [num(1)?, num(2)?, num(3)?],
        diameter_mm: num(4)?,
        scores,
    };
    if annotation.source_volume_id.is_empty() {
        return Err(Error::Validation("empty volume_id".into()));
    }
    annotation.validate()?;
    Ok(annotation)
}

/// Reads an annotation table. Every bad row is reported, numbered from 1
/// for the first data row.
pub fn parse_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(Error::csv(path))?;
    let headers = reader.headers().map_err(Error::csv(path))?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if let Some(unknown) = names.iter().find(|n| !ANNOTATION_COLUMNS.contains(n)) {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("unknown column `{unknown}`"),
        });
    }
    if names != ANNOTATION_COLUMNS {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("header must be `{}`", ANNOTATION_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        match record.map_err(Error::csv(path)).and_then(|r| parse_row(&r)) {
            Ok(a) => out.push(a),
            Err(e) => bad.push((row, e.to_string())),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Annotations(bad))
    }
}

pub fn write_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    writer.write_record(ANNOTATION_COLUMNS).map_err(Error::csv(path))?;
    for a in annotations {
        a.validate()?;
        let scores = a
            .scores
            .iter()
            .map(u8::to_string)
            .collect::<Vec<_>>()
            .join(";");
        writer
            .write_record([
                a.source_volume_id.clone(),
                a.center[0].to_string(),
                a.center[1].to_string(),
                a.center[2].to_string(),
                a.diameter_mm.to_string(),
                scores,
            ])
            .map_err(Error::csv(path))?;
    }
    writer.flush().map_err(Error::io(path))
}

/// Malignant iff strictly more than half of the reader scores are ≥ 4.
pub fn consensus_malignancy(scores: &[u8]) -> Result<ClassLabel> {
    if scores.is_empty() {
        return Err(Error::Validation("empty score list".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(1..=5).contains(*s)) {
        return Err(Error::Validation(format!("score {s} outside 1..=5")));
    }
    let high = scores.iter().filter(|&&s| s >= 4).count();
    Ok(if 2 * high > scores.len() {
        ClassLabel::Malignant
    } else {
        ClassLabel::Benign
    })
}
