//! Segmented ONH label volumes: the `.onhv` container format, tissue
//! labels, and glaucoma severity staging.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"ONHV";
const FORMAT_VERSION: u16 = 1;

/// Segmented tissue classes, stored as one byte per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueLabel {
    Background = 0,
    /// Retinal nerve fiber layer together with the prelaminar tissue.
    RnflPlt = 1,
    /// Ganglion cell layer + inner plexiform layer.
    GclIpl = 2,
    /// All other retinal layers.
    Orl = 3,
    /// Retinal pigment epithelium with Bruch's membrane.
    RpeBm = 4,
    Choroid = 5,
    Sclera = 6,
    /// Lamina cribrosa (visible part).
    Lc = 7,
}

impl TissueLabel {
    pub const COUNT: usize = 8;

    /// The seven non-background tissues, in label order.
    pub const TISSUES: [TissueLabel; 7] = [
        TissueLabel::RnflPlt,
        TissueLabel::GclIpl,
        TissueLabel::Orl,
        TissueLabel::RpeBm,
        TissueLabel::Choroid,
        TissueLabel::Sclera,
        TissueLabel::Lc,
    ];

    pub fn from_u8(v: u8) -> Option<TissueLabel> {
        match v {
            0 => Some(TissueLabel::Background),
            1 => Some(TissueLabel::RnflPlt),
            2 => Some(TissueLabel::GclIpl),
            3 => Some(TissueLabel::Orl),
            4 => Some(TissueLabel::RpeBm),
            5 => Some(TissueLabel::Choroid),
            6 => Some(TissueLabel::Sclera),
            7 => Some(TissueLabel::Lc),
            _ => None,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            TissueLabel::Background => "BG",
            TissueLabel::RnflPlt => "RNFL_PLT",
            TissueLabel::GclIpl => "GCL_IPL",
            TissueLabel::Orl => "ORL",
            TissueLabel::RpeBm => "RPE_BM",
            TissueLabel::Choroid => "CHOROID",
            TissueLabel::Sclera => "SCLERA",
            TissueLabel::Lc => "LC",
        }
    }
}

impl fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
}

/// Glaucoma severity staging by visual-field mean deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeverityGroup {
    Normal,
    Mild,
    Moderate,
    Advanced,
}

impl SeverityGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            SeverityGroup::Normal => "normal",
            SeverityGroup::Mild => "mild",
            SeverityGroup::Moderate => "moderate",
            SeverityGroup::Advanced => "advanced",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<SeverityGroup> {
        match s {
            "normal" => Some(SeverityGroup::Normal),
            "mild" => Some(SeverityGroup::Mild),
            "moderate" => Some(SeverityGroup::Moderate),
            "advanced" => Some(SeverityGroup::Advanced),
            _ => None,
        }
    }
}

impl fmt::Display for SeverityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-subject metadata carried in the `.onhv` header.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub md_db: Option<f64>,
    /// Cohort flag; `"normal"` marks a non-glaucomatous control eye.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
}

impl SubjectMeta {
    pub fn is_normal_cohort(&self) -> bool {
        self.cohort.as_deref() == Some("normal")
    }
}

/// A voxelized tissue segmentation with spacing, laterality and BMO
/// landmark points. Coordinates are in micrometers; x is the A-scan
/// direction within a B-scan, y spans B-scans, z runs along the A-scan
/// (anterior at small z, posterior at large z).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Spacing in micrometers.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Labels, x-fastest row-major: index = ix + nx*(iy + ny*iz).
    pub voxels: Vec<u8>,
    /// BMO landmark points (micrometers, volume coordinates), at least 5.
    pub bmo_points: Vec<Point3<f64>>,
    pub laterality: Laterality,
    pub subject_meta: Option<SubjectMeta>,
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("label out of range: value {value} at voxel index {index}")]
    LabelOutOfRange { value: u8, index: usize },
    #[error("size mismatch: field {field}, expected {expected}, got {got}")]
    SizeMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("too few BMO points: got {got}, need at least 5")]
    TooFewBmoPoints { got: usize },
    #[error("BMO point {index} lies outside the volume bounds")]
    BmoPointOutOfBounds { index: usize },
    #[error("non-positive spacing in field {field}")]
    NonPositiveSpacing { field: &'static str },
    #[error("non-finite MD value")]
    NonFiniteMd,
    #[error("io failure: {0}")]
    IoFailure(#[from] io::Error),
}

impl LabelVolume {
    /// Volume extent along each axis in micrometers.
    pub fn extent(&self) -> (f64, f64, f64) {
        (
            self.nx as f64 * self.dx,
            self.ny as f64 * self.dy,
            self.nz as f64 * self.dz,
        )
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    #[inline]
    pub fn label_at(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.voxels[self.index(ix, iy, iz)]
    }

    /// Center of voxel (ix, iy, iz) in micrometers.
    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Point3<f64> {
        Point3::new(
            (ix as f64 + 0.5) * self.dx,
            (iy as f64 + 0.5) * self.dy,
            (iz as f64 + 0.5) * self.dz,
        )
    }

    /// Validate every invariant of the container.
    pub fn validate(&self) -> Result<(), VolumeError> {
        for (field, v) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VolumeError::NonPositiveSpacing { field });
            }
        }
        let expected = self.nx * self.ny * self.nz;
        if self.voxels.len() != expected {
            return Err(VolumeError::SizeMismatch {
                field: "voxels",
                expected,
                got: self.voxels.len(),
            });
        }
        if let Some(i) = self.voxels.iter().position(|&v| v >= TissueLabel::COUNT as u8) {
            return Err(VolumeError::LabelOutOfRange {
                value: self.voxels[i],
                index: i,
            });
        }
        if self.bmo_points.len() < 5 {
            return Err(VolumeError::TooFewBmoPoints {
                got: self.bmo_points.len(),
            });
        }
        let (ex, ey, ez) = self.extent();
        for (i, p) in self.bmo_points.iter().enumerate() {
            let inside = (0.0..=ex).contains(&p.x)
                && (0.0..=ey).contains(&p.y)
                && (0.0..=ez).contains(&p.z);
            if !inside {
                return Err(VolumeError::BmoPointOutOfBounds { index: i });
            }
        }
        Ok(())
    }

    /// Severity group of this eye: cohort-flagged controls are `Normal`,
    /// everything else is staged from the MD value.
    pub fn severity(&self) -> Result<SeverityGroup, VolumeError> {
        let meta = self
            .subject_meta
            .as_ref()
            .ok_or_else(|| VolumeError::MalformedHeader("missing subject_meta".into()))?;
        if meta.is_normal_cohort() {
            return Ok(SeverityGroup::Normal);
        }
        let md = meta.md_db.ok_or(VolumeError::NonFiniteMd)?;
        classify_severity(md)
    }
}

/// Stage glaucomatous MD on the continuous scale: mild for md >= -6.00,
/// moderate for -12.00 <= md < -6.00, advanced below. `Normal` is never
/// returned here; controls are flagged by cohort, not inferred from MD.
pub fn classify_severity(md_db: f64) -> Result<SeverityGroup, VolumeError> {
    if !md_db.is_finite() {
        return Err(VolumeError::NonFiniteMd);
    }
    Ok(if md_db >= -6.00 {
        SeverityGroup::Mild
    } else if md_db >= -12.00 {
        SeverityGroup::Moderate
    } else {
        SeverityGroup::Advanced
    })
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), VolumeError> {
    r.read_exact(buf)
        .map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => VolumeError::MalformedHeader(format!(
                "truncated while reading {what}"
            )),
            _ => VolumeError::IoFailure(e),
        })
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16, VolumeError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, VolumeError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64, VolumeError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8, VolumeError> {
    let mut b = [0u8; 1];
    read_exact_or(r, &mut b, what)?;
    Ok(b[0])
}

/// Read and validate an `.onhv` container.
pub fn load_volume(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let file = std::fs::File::open(path)?;
    let mut r = io::BufReader::new(file);
    load_volume_from(&mut r)
}

pub fn load_volume_from(r: &mut impl Read) -> Result<LabelVolume, VolumeError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(VolumeError::MalformedHeader("bad magic bytes".into()));
    }
    let version = read_u16(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(VolumeError::MalformedHeader(format!(
            "unsupported format version {version}"
        )));
    }
    let nx = read_u32(r, "nx")? as usize;
    let ny = read_u32(r, "ny")? as usize;
    let nz = read_u32(r, "nz")? as usize;
    let dx = read_f64(r, "dx")?;
    let dy = read_f64(r, "dy")?;
    let dz = read_f64(r, "dz")?;
    let laterality = match read_u8(r, "laterality")? {
        0 => Laterality::Left,
        1 => Laterality::Right,
        v => {
            return Err(VolumeError::MalformedHeader(format!(
                "invalid laterality byte {v}"
            )))
        }
    };
    let bmo_count = read_u32(r, "bmo_count")? as usize;
    let mut bmo_points = Vec::with_capacity(bmo_count);
    for i in 0..bmo_count {
        let x = read_f64(r, "bmo point")?;
        let y = read_f64(r, "bmo point")?;
        let z = read_f64(r, "bmo point")?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(VolumeError::MalformedHeader(format!(
                "non-finite bmo point {i}"
            )));
        }
        bmo_points.push(Point3::new(x, y, z));
    }
    let has_meta = read_u8(r, "has_meta")?;
    let subject_meta = match has_meta {
        0 => None,
        1 => {
            let len = read_u32(r, "meta length")? as usize;
            let mut buf = vec![0u8; len];
            read_exact_or(r, &mut buf, "meta json")?;
            let meta: SubjectMeta = serde_json::from_slice(&buf).map_err(|e| {
                VolumeError::MalformedHeader(format!("invalid meta json: {e}"))
            })?;
            Some(meta)
        }
        v => {
            return Err(VolumeError::MalformedHeader(format!(
                "invalid has_meta byte {v}"
            )))
        }
    };
    let expected = nx * ny * nz;
    let mut voxels = vec![0u8; expected];
    let mut got = 0usize;
    while got < expected {
        match r.read(&mut voxels[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if got != expected {
        return Err(VolumeError::SizeMismatch {
            field: "voxels",
            expected,
            got,
        });
    }
    let volume = LabelVolume {
        nx,
        ny,
        nz,
        dx,
        dy,
        dz,
        voxels,
        bmo_points,
        laterality,
        subject_meta,
    };
    volume.validate()?;
    Ok(volume)
}

/// Write an `.onhv` container. `load_volume` reconstructs an equal volume.
pub fn save_volume(volume: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    volume.validate()?;
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    save_volume_to(volume, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_volume_to(volume: &LabelVolume, w: &mut impl Write) -> Result<(), VolumeError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for n in [volume.nx, volume.ny, volume.nz] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for s in [volume.dx, volume.dy, volume.dz] {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[match volume.laterality {
        Laterality::Left => 0u8,
        Laterality::Right => 1u8,
    }])?;
    w.write_all(&(volume.bmo_points.len() as u32).to_le_bytes())?;
    for p in &volume.bmo_points {
        for c in [p.x, p.y, p.z] {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    match &volume.subject_meta {
        None => w.write_all(&[0u8])?,
        Some(meta) => {
            w.write_all(&[1u8])?;
            let json = serde_json::to_vec(meta)
                .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(&json)?;
        }
    }
    w.write_all(&volume.voxels)?;
    Ok(())
}
