//! Normalized 3D point clouds with per-point features: anterior boundary
//! points of all seven tissues in the BMO frame, each carrying a local
//! thickness feature (not applicable for sclera and LC), plus seeded
//! sampling and training-time augmentation.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::OnhFrame;
use crate::surfaces::{extract_boundaries, thickness_at};
use crate::volume::{LabelVolume, SeverityGroup, TissueLabel};

/// Column stride used by `build_cloud` so the paper-scale scan geometry
/// (384 x 97 columns, 7 tissues) lands near 20,000 points.
pub const STRIDE_X: usize = 4;
pub const STRIDE_Y: usize = 3;
/// Minimum cloud size an augmentation crop may leave behind.
pub const MIN_CROP_POINTS: usize = 64;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("no boundary points in any tissue")]
    EmptyCloud,
    #[error("malformed point-cloud file: {0}")]
    MalformedFile(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Non-fatal augmentation events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudDiagnostic {
    /// The crop would have left fewer than `MIN_CROP_POINTS` points and
    /// was skipped.
    CropEmptied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    /// Normalized (nasal, superior, axial) coordinates, micrometers.
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Local tissue thickness; `None` for sclera and LC points.
    pub thickness: Option<f64>,
    pub tissue: TissueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    pub eye_id: String,
    /// Severity label when the source volume carried subject metadata.
    pub label: Option<SeverityGroup>,
}

impl PointCloud {
    /// Network input rows: x, y, z and thickness in millimeters, with the
    /// not-applicable sentinel encoded as 0. The mask is not fed to the
    /// network.
    pub fn feature_rows(&self) -> Vec<[f64; 4]> {
        self.points
            .iter()
            .map(|p| {
                [
                    p.x / 1000.0,
                    p.y / 1000.0,
                    p.z / 1000.0,
                    p.thickness.unwrap_or(0.0) / 1000.0,
                ]
            })
            .collect()
    }
}

/// Augmentation parameters. All ranges are closed intervals sampled
/// uniformly; degenerate ranges (lo == hi) give that exact value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Fraction of points the random half-space crop keeps.
    pub crop_fraction: (f64, f64),
    /// Rotation about the axial axis, degrees.
    pub rotation_deg: (f64, f64),
    /// Rigid translation per axis, micrometers.
    pub translation_um: (f64, f64),
    /// Points kept after the final subsampling step.
    pub sample_n: usize,
    /// Additive coordinate noise, micrometers.
    pub noise_sigma_um: f64,
    /// Duplicate minority-class eyes at dataset level.
    pub oversample: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_fraction: (0.85, 1.0),
            rotation_deg: (-10.0, 10.0),
            translation_um: (-50.0, 50.0),
            sample_n: 256,
            noise_sigma_um: 5.0,
            oversample: true,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration keeping `n` points.
    pub fn identity(n: usize) -> Self {
        AugmentConfig {
            crop_fraction: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            translation_um: (0.0, 0.0),
            sample_n: n,
            noise_sigma_um: 0.0,
            oversample: false,
        }
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !ordered(self.crop_fraction)
            || !ordered(self.rotation_deg)
            || !ordered(self.translation_um)
            || self.crop_fraction.0 < 0.0
            || self.crop_fraction.1 > 1.0
        {
            return Err(CloudError::MalformedFile("ill-ordered augment range".into()));
        }
        if self.sample_n < MIN_CROP_POINTS {
            return Err(CloudError::MalformedFile(format!(
                "sample_n must be at least {MIN_CROP_POINTS}"
            )));
        }
        Ok(())
    }
}

/// Build the normalized point cloud of one eye: anterior boundary points
/// of every tissue at strided columns, with local thickness for the five
/// layered tissues and the sentinel for sclera and LC.
pub fn build_cloud(volume: &LabelVolume, frame: &OnhFrame) -> Result<PointCloud, CloudError> {
    let mut points = Vec::new();
    for tissue in TissueLabel::TISSUES {
        let surface = extract_boundaries(volume, tissue);
        let wants_thickness = !matches!(tissue, TissueLabel::Sclera | TissueLabel::Lc);
        for iy in (0..volume.ny).step_by(STRIDE_Y) {
            for ix in (0..volume.nx).step_by(STRIDE_X) {
                let Some(p) = surface.anterior_point(ix, iy) else {
                    continue;
                };
                let thickness = if wants_thickness {
                    thickness_at(&surface, ix, iy)
                } else {
                    None
                };
                let n = frame.to_normalized(&p);
                points.push(CloudPoint {
                    x: n.x,
                    y: n.y,
                    z: n.z,
                    thickness,
                    tissue,
                });
            }
        }
    }
    if points.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let (eye_id, label) = match &volume.subject_meta {
        Some(meta) => (meta.id.clone(), volume.severity().ok()),
        None => (String::new(), None),
    };
    Ok(PointCloud { points, eye_id, label })
}

/// Uniform sample of min(n, |cloud|) points without replacement,
/// deterministic per seed; original point order is preserved.
pub fn sample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(cloud, n, &mut rng)
}

fn sample_with(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let len = cloud.points.len();
    if n >= len {
        return cloud.clone();
    }
    let mut idx = rand::seq::index::sample(rng, len, n).into_vec();
    idx.sort_unstable();
    PointCloud {
        points: idx.iter().map(|&i| cloud.points[i].clone()).collect(),
        eye_id: cloud.eye_id.clone(),
        label: cloud.label,
    }
}

/// Training augmentation: half-space crop, rotation about the axial axis,
/// rigid translation, additive Gaussian noise, then subsampling to
/// `sample_n`. Labels and eye identity are never changed.
pub fn augment(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    seed: u64,
) -> (PointCloud, Vec<CloudDiagnostic>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diags = Vec::new();
    let mut points = cloud.points.clone();

    // crop: keep the largest-projection fraction along a random in-plane
    // direction
    let keep_frac = rng.gen_range(cfg.crop_fraction.0..=cfg.crop_fraction.1);
    if keep_frac < 1.0 {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, s) = (phi.cos(), phi.sin());
        let mut proj: Vec<f64> = points.iter().map(|p| p.x * c + p.y * s).collect();
        let keep = ((keep_frac * points.len() as f64).ceil() as usize).min(points.len());
        if keep < MIN_CROP_POINTS {
            diags.push(CloudDiagnostic::CropEmptied);
        } else {
            let cut = points.len() - keep;
            let mut sorted = proj.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite projections"));
            let threshold = sorted[cut];
            let mut kept = Vec::with_capacity(keep);
            for (i, p) in points.into_iter().enumerate() {
                if proj[i] >= threshold && kept.len() < keep {
                    kept.push(p);
                }
            }
            proj.clear();
            points = kept;
        }
    }

    // rotation about the axial (z) axis
    let angle = rng.gen_range(cfg.rotation_deg.0..=cfg.rotation_deg.1).to_radians();
    let (ca, sa) = (angle.cos(), angle.sin());
    // rigid translation
    let t: [f64; 3] = std::array::from_fn(|_| rng.gen_range(cfg.translation_um.0..=cfg.translation_um.1));
    for p in &mut points {
        let (x, y) = (p.x, p.y);
        p.x = ca * x - sa * y + t[0];
        p.y = sa * x + ca * y + t[1];
        p.z += t[2];
    }
    // coordinate noise
    if cfg.noise_sigma_um > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma_um).expect("positive sigma");
        for p in &mut points {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
            p.z += normal.sample(&mut rng);
        }
    }
    let intermediate = PointCloud {
        points,
        eye_id: cloud.eye_id.clone(),
        label: cloud.label,
    };
    (sample_with(&intermediate, cfg.sample_n, &mut rng), diags)
}

/// Write the cloud as `.onhpc` CSV; the sentinel thickness is an empty
/// field.
pub fn save_cloud_to<W: Write>(cloud: &PointCloud, writer: &mut W) -> Result<(), CloudError> {
    writeln!(writer, "x_um,y_um,z_um,thickness_um,tissue,eye_id,label")?;
    let label = cloud.label.map(|l| l.as_str()).unwrap_or("");
    for p in &cloud.points {
        let th = p.thickness.map(|t| format!("{t:.6}")).unwrap_or_default();
        writeln!(
            writer,
            "{:.6},{:.6},{:.6},{},{},{},{}",
            p.x, p.y, p.z, th, p.tissue as u8, cloud.eye_id, label
        )?;
    }
    Ok(())
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    save_cloud_to(cloud, &mut w)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, CloudError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| CloudError::MalformedFile("empty file".into()))?;
    if header.trim() != "x_um,y_um,z_um,thickness_um,tissue,eye_id,label" {
        return Err(CloudError::MalformedFile("unexpected header".into()));
    }
    let mut points = Vec::new();
    let mut eye_id = String::new();
    let mut label = None;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CloudError::MalformedFile(format!(
                "line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64, CloudError> {
            s.parse()
                .map_err(|_| CloudError::MalformedFile(format!("line {}: bad number '{s}'", lineno + 2)))
        };
        let thickness = if fields[3].is_empty() { None } else { Some(num(fields[3])?) };
        let tissue_code: u8 = fields[4]
            .parse()
            .map_err(|_| CloudError::MalformedFile(format!("line {}: bad tissue", lineno + 2)))?;
        let tissue = TissueLabel::from_u8(tissue_code)
            .ok_or_else(|| CloudError::MalformedFile(format!("line {}: tissue out of range", lineno + 2)))?;
        points.push(CloudPoint {
            x: num(fields[0])?,
            y: num(fields[1])?,
            z: num(fields[2])?,
            thickness,
            tissue,
        });
        eye_id = fields[5].to_string();
        label = SeverityGroup::from_str_opt(fields[6]);
    }
    if points.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    Ok(PointCloud { points, eye_id, label })
}

#[allow(unused)]
fn _point3(p: &CloudPoint) -> Point3<f64> {
    Point3::new(p.x, p.y, p.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::build_frame;
    use crate::phantom::{generate, PhantomConfig};
    use crate::volume::SubjectMeta;
    use approx::assert_abs_diff_eq;

    fn phantom_cloud(cfg: &PhantomConfig) -> PointCloud {
        let v = generate(cfg).unwrap();
        let frame = build_frame(&v).unwrap();
        build_cloud(&v, &frame).unwrap()
    }

    fn meta() -> SubjectMeta {
        SubjectMeta {
            id: "eye-1".into(),
            age: None,
            sex: None,
            md_db: Some(-3.0),
            cohort: None,
        }
    }

    #[test]
    fn paper_geometry_lands_near_twenty_thousand_points() {
        let cloud = phantom_cloud(&PhantomConfig::default());
        assert!(
            (15_000..=25_000).contains(&cloud.points.len()),
            "got {} points",
            cloud.points.len()
        );
    }

    #[test]
    fn bmo_centroid_maps_to_origin_and_sentinels_hold() {
        let mut cfg = PhantomConfig::default().with_scan_grid(160, 49, 256);
        cfg.subject = Some(meta());
        let v = generate(&cfg).unwrap();
        let frame = build_frame(&v).unwrap();
        let centroid = v
            .bmo_points
            .iter()
            .map(|p| frame.to_normalized(p).coords)
            .sum::<nalgebra::Vector3<f64>>()
            / v.bmo_points.len() as f64;
        assert_abs_diff_eq!(centroid.norm(), 0.0, epsilon = 1e-6);

        let cloud = build_cloud(&v, &frame).unwrap();
        assert_eq!(cloud.eye_id, "eye-1");
        assert_eq!(cloud.label, Some(SeverityGroup::Mild));
        for p in &cloud.points {
            assert!(p.x.is_finite() && p.y.is_finite() && p.z.is_finite());
            match p.tissue {
                TissueLabel::Sclera | TissueLabel::Lc => assert!(p.thickness.is_none()),
                TissueLabel::RnflPlt => assert!(p.thickness.expect("rnfl has thickness").is_finite()),
                _ => {}
            }
        }
    }

    #[test]
    fn cloud_commutes_with_axial_shift() {
        let base = PhantomConfig::default().with_scan_grid(160, 49, 256);
        let mut shifted = base.clone();
        // shift the whole geometry by exactly 8 axial voxels
        shifted.plane_depth_frac += 8.0 / shifted.nz as f64;
        let a = phantom_cloud(&base);
        let b = phantom_cloud(&shifted);
        assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-6);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-6);
            assert_abs_diff_eq!(p.z, q.z, epsilon = 1e-6);
            assert_eq!(p.tissue, q.tissue);
        }
    }

    fn toy_cloud(n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|i| CloudPoint {
                    x: i as f64 * 10.0,
                    y: (i as f64).sin() * 100.0,
                    z: -(i as f64),
                    thickness: Some(100.0 + i as f64),
                    tissue: TissueLabel::RnflPlt,
                })
                .collect(),
            eye_id: "toy".into(),
            label: Some(SeverityGroup::Normal),
        }
    }

    #[test]
    fn sample_identity_and_determinism() {
        let cloud = toy_cloud(100);
        assert_eq!(sample(&cloud, 200, 1), cloud);
        let a = sample(&cloud, 30, 5);
        let b = sample(&cloud, 30, 5);
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 30);
        let c = sample(&cloud, 30, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_frequency_is_uniform() {
        let cloud = toy_cloud(10);
        let mut hits = [0usize; 10];
        for s in 0..10_000u64 {
            let one = sample(&cloud, 1, s);
            let i = (one.points[0].x / 10.0).round() as usize;
            hits[i] += 1;
        }
        for &h in &hits {
            assert!((850..=1150).contains(&h), "hits {hits:?}");
        }
    }

    #[test]
    fn augment_identity_and_full_rotation() {
        let cloud = toy_cloud(200);
        let (same, diags) = augment(&cloud, &AugmentConfig::identity(200), 3);
        assert!(diags.is_empty());
        assert_eq!(same, cloud);

        let mut cfg = AugmentConfig::identity(200);
        cfg.rotation_deg = (360.0, 360.0);
        let (rot, _) = augment(&cloud, &cfg, 3);
        for (p, q) in cloud.points.iter().zip(&rot.points) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-9);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-9);
            assert_abs_diff_eq!(p.z, q.z, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_translation_preserve_pairwise_distances() {
        let cloud = toy_cloud(80);
        let mut cfg = AugmentConfig::identity(80);
        cfg.rotation_deg = (-45.0, 45.0);
        cfg.translation_um = (-200.0, 200.0);
        let (moved, _) = augment(&cloud, &cfg, 9);
        assert_eq!(moved.points.len(), 80);
        for i in (0..80).step_by(7) {
            for j in (1..80).step_by(11) {
                let d0 = (_point3(&cloud.points[i]) - _point3(&cloud.points[j])).norm();
                let d1 = (_point3(&moved.points[i]) - _point3(&moved.points[j])).norm();
                assert_abs_diff_eq!(d0, d1, epsilon = 1e-9);
            }
        }
        assert_eq!(moved.label, cloud.label);
        assert_eq!(moved.eye_id, cloud.eye_id);
    }

    #[test]
    fn crop_that_would_empty_is_skipped_with_diagnostic() {
        let cloud = toy_cloud(80);
        let mut cfg = AugmentConfig::identity(64);
        cfg.crop_fraction = (0.1, 0.1); // would keep 8 < 64
        let (out, diags) = augment(&cloud, &cfg, 4);
        assert_eq!(diags, vec![CloudDiagnostic::CropEmptied]);
        assert_eq!(out.points.len(), 64); // crop skipped, sampling applied
    }

    #[test]
    fn crop_keeps_requested_fraction() {
        let cloud = toy_cloud(200);
        let mut cfg = AugmentConfig::identity(200);
        cfg.crop_fraction = (0.5, 0.5);
        let (out, diags) = augment(&cloud, &cfg, 8);
        assert!(diags.is_empty());
        assert_eq!(out.points.len(), 100);
    }

    #[test]
    fn onhpc_round_trip() {
        let mut cloud = toy_cloud(50);
        cloud.points[7].thickness = None;
        cloud.points[7].tissue = TissueLabel::Sclera;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eye.onhpc");
        save_cloud(&cloud, &path).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.points.len(), cloud.points.len());
        assert_eq!(back.eye_id, cloud.eye_id);
        assert_eq!(back.label, cloud.label);
        assert_eq!(back.points[7].thickness, None);
        assert_eq!(back.points[7].tissue, TissueLabel::Sclera);
        for (p, q) in cloud.points.iter().zip(&back.points) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-6);
        }
    }
}
