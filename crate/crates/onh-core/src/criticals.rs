//! Critical-point analysis of trained classifiers: the input points that
//! win the global max pool, their projection onto group-average tissue
//! boundaries, neighborhood density maps, and tissue-wise breakdowns.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::frame::build_frame;
use crate::pointnet::{forward, PointNetError, PointNetModel};
use crate::surfaces::extract_boundaries;
use crate::volume::{LabelVolume, TissueLabel};

/// In-plane pitch of the average-geometry grid, micrometers.
pub const GRID_PITCH_UM: f64 = 50.0;
/// Neighborhood radius of the density count, micrometers.
pub const DENSITY_RADIUS_UM: f64 = 75.0;

#[derive(Debug, Error)]
pub enum CriticalsError {
    #[error(transparent)]
    Net(#[from] PointNetError),
    #[error("no surface coverage in the supplied volumes")]
    NoCoverage,
    #[error("tissue {0:?} absent from the average geometry")]
    TissueNotInGeometry(TissueLabel),
    #[error("no critical point sets supplied")]
    EmptySets,
    #[error("frame construction failed for {eye}: {detail}")]
    FrameFailure { eye: String, detail: String },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// One input point that won at least one global-feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalEntry {
    /// Index into the eye's point cloud.
    pub point_index: usize,
    /// Global-feature dimensions this point won.
    pub dims_won: Vec<usize>,
    pub tissue: TissueLabel,
    /// Normalized coordinates, micrometers.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalPointSet {
    pub eye_id: String,
    pub entries: Vec<CriticalEntry>,
}

/// The points of `cloud` that appear in the model's max-pool argmax,
/// with the feature dimensions each point won. At most `global_dim`
/// unique points by construction.
pub fn extract_critical_points(
    model: &PointNetModel,
    cloud: &PointCloud,
) -> Result<CriticalPointSet, CriticalsError> {
    let (_, argmax) = forward(model, cloud)?;
    let mut won: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (dim, &pt) in argmax.iter().enumerate() {
        won.entry(pt).or_default().push(dim);
    }
    let entries = won
        .into_iter()
        .map(|(point_index, dims_won)| {
            let p = &cloud.points[point_index];
            CriticalEntry {
                point_index,
                dims_won,
                tissue: p.tissue,
                position: [p.x, p.y, p.z],
            }
        })
        .collect();
    Ok(CriticalPointSet { eye_id: cloud.eye_id.clone(), entries })
}

/// A populated cell of a tissue's average anterior boundary; cells
/// without coverage are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryCell {
    /// Mean anterior height over covering eyes, micrometers.
    pub mean_z: f64,
    /// Number of eyes covering the cell.
    pub eyes: usize,
}

/// Per-tissue regular in-plane grids of mean anterior boundary height in
/// the normalized frame. Cell keys are integer multiples of the pitch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AverageGeometry {
    pub group_pair: String,
    pub pitch_um: f64,
    /// Keyed by tissue label byte, then by (i, j) cell index; the cell
    /// center sits at (i*pitch, j*pitch).
    pub tissues: BTreeMap<u8, BTreeMap<(i64, i64), GeometryCell>>,
}

/// Per-eye cell means of a list of anterior points, keyed by grid index.
fn eye_cell_means(points: &[[f64; 3]], pitch: f64) -> BTreeMap<(i64, i64), f64> {
    let mut acc: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for p in points {
        let key = ((p[0] / pitch).round() as i64, (p[1] / pitch).round() as i64);
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += p[2];
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Average the per-eye cell values: a cell's mean runs over the eyes
/// whose boundary covers it.
fn average_cells(per_eye: &[BTreeMap<(i64, i64), f64>]) -> BTreeMap<(i64, i64), GeometryCell> {
    let mut acc: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for eye in per_eye {
        for (&k, &z) in eye {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += z;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, GeometryCell { mean_z: s / n as f64, eyes: n }))
        .collect()
}

/// Group-average anterior boundary per tissue on a 50 um grid in the
/// normalized frame. `group_pair` is a free-form tag naming the
/// classification task the average belongs to.
pub fn average_geometry(
    volumes: &[LabelVolume],
    group_pair: &str,
) -> Result<AverageGeometry, CriticalsError> {
    if volumes.is_empty() {
        return Err(CriticalsError::NoCoverage);
    }
    let mut tissues: BTreeMap<u8, BTreeMap<(i64, i64), GeometryCell>> = BTreeMap::new();
    // normalized anterior points per eye, gathered once per volume
    let mut per_eye_points: Vec<BTreeMap<u8, Vec<[f64; 3]>>> = Vec::with_capacity(volumes.len());
    for v in volumes {
        let frame = build_frame(v).map_err(|e| CriticalsError::FrameFailure {
            eye: v.subject_meta.as_ref().map(|m| m.id.clone()).unwrap_or_default(),
            detail: e.to_string(),
        })?;
        let mut by_tissue: BTreeMap<u8, Vec<[f64; 3]>> = BTreeMap::new();
        for tissue in TissueLabel::TISSUES {
            let surf = extract_boundaries(v, tissue);
            let pts: Vec<[f64; 3]> = surf
                .anterior_points()
                .iter()
                .map(|p| {
                    let n = frame.to_normalized(p);
                    [n.x, n.y, n.z]
                })
                .collect();
            if !pts.is_empty() {
                by_tissue.insert(tissue as u8, pts);
            }
        }
        per_eye_points.push(by_tissue);
    }
    for tissue in TissueLabel::TISSUES {
        let per_eye: Vec<BTreeMap<(i64, i64), f64>> = per_eye_points
            .iter()
            .filter_map(|m| m.get(&(tissue as u8)))
            .map(|pts| eye_cell_means(pts, GRID_PITCH_UM))
            .collect();
        if !per_eye.is_empty() {
            let cells = average_cells(&per_eye);
            if !cells.is_empty() {
                tissues.insert(tissue as u8, cells);
            }
        }
    }
    if tissues.is_empty() {
        return Err(CriticalsError::NoCoverage);
    }
    Ok(AverageGeometry { group_pair: group_pair.to_string(), pitch_um: GRID_PITCH_UM, tissues })
}

/// A critical point moved onto its tissue's average boundary, before or
/// after density counting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub tissue: TissueLabel,
    /// Number of other projected points within the density radius.
    pub density: usize,
}

/// Closest-point projection: each critical point maps to the nearest
/// grid vertex (3D Euclidean) of its own tissue's average surface.
pub fn project_criticals(
    sets: &[CriticalPointSet],
    geo: &AverageGeometry,
) -> Result<Vec<DensityPoint>, CriticalsError> {
    if sets.is_empty() {
        return Err(CriticalsError::EmptySets);
    }
    let mut out = Vec::new();
    for set in sets {
        for entry in &set.entries {
            let cells = geo
                .tissues
                .get(&(entry.tissue as u8))
                .ok_or(CriticalsError::TissueNotInGeometry(entry.tissue))?;
            let [px, py, pz] = entry.position;
            let mut best = f64::INFINITY;
            let mut best_v = [0.0; 3];
            for (&(i, j), cell) in cells {
                let vx = i as f64 * geo.pitch_um;
                let vy = j as f64 * geo.pitch_um;
                let d2 = (px - vx).powi(2) + (py - vy).powi(2) + (pz - cell.mean_z).powi(2);
                if d2 < best {
                    best = d2;
                    best_v = [vx, vy, cell.mean_z];
                }
            }
            out.push(DensityPoint {
                x: best_v[0],
                y: best_v[1],
                z: best_v[2],
                tissue: entry.tissue,
                density: 0,
            });
        }
    }
    Ok(out)
}

/// Fill in the density field: for each point, the number of other
/// points within `radius_um`, pooled over all tissues. Spatial-hash
/// accelerated; validated against the quadratic scan in tests.
pub fn density(points: &mut [DensityPoint], radius_um: f64) {
    let r2 = radius_um * radius_um;
    let cell = |v: f64| (v / radius_um).floor() as i64;
    let mut hash: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        hash.entry((cell(p.x), cell(p.y), cell(p.z))).or_default().push(i);
    }
    let counts: Vec<usize> = (0..points.len())
        .map(|i| {
            let p = &points[i];
            let (cx, cy, cz) = (cell(p.x), cell(p.y), cell(p.z));
            let mut n = 0;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = hash.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let q = &points[j];
                                let d2 = (p.x - q.x).powi(2)
                                    + (p.y - q.y).powi(2)
                                    + (p.z - q.z).powi(2);
                                if d2 <= r2 {
                                    n += 1;
                                }
                            }
                        }
                    }
                }
            }
            n
        })
        .collect();
    for (p, n) in points.iter_mut().zip(counts) {
        p.density = n;
    }
}

/// Which tissues count as connective for the neural/connective split.
/// The paper never states its grouping; choroid-as-connective is the
/// recorded default.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueGrouping {
    pub connective: Vec<TissueLabel>,
}

impl Default for TissueGrouping {
    fn default() -> Self {
        TissueGrouping {
            connective: vec![TissueLabel::Choroid, TissueLabel::Sclera, TissueLabel::Lc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TissueBreakdown {
    /// Fraction of critical points per tissue, keyed by short name.
    pub per_tissue: BTreeMap<String, f64>,
    pub neural_fraction: f64,
    pub connective_fraction: f64,
    pub total_points: usize,
}

/// Tissue composition of the pooled critical points: fraction per
/// tissue plus the neural/connective split.
pub fn tissue_breakdown(
    sets: &[CriticalPointSet],
    grouping: &TissueGrouping,
) -> Result<TissueBreakdown, CriticalsError> {
    let total: usize = sets.iter().map(|s| s.entries.len()).sum();
    if total == 0 {
        return Err(CriticalsError::EmptySets);
    }
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for set in sets {
        for e in &set.entries {
            *counts.entry(e.tissue as u8).or_insert(0) += 1;
        }
    }
    let mut per_tissue = BTreeMap::new();
    let mut connective = 0.0;
    for (&label, &n) in &counts {
        let tissue = TissueLabel::from_u8(label).expect("valid label");
        let frac = n as f64 / total as f64;
        per_tissue.insert(tissue.short_name().to_string(), frac);
        if grouping.connective.contains(&tissue) {
            connective += frac;
        }
    }
    Ok(TissueBreakdown {
        per_tissue,
        neural_fraction: 1.0 - connective,
        connective_fraction: connective,
        total_points: total,
    })
}

/// Density map rows as CSV: the data behind the figure-style plots.
pub fn write_density_csv<W: Write>(points: &[DensityPoint], w: &mut W) -> Result<(), CriticalsError> {
    writeln!(w, "x_um,y_um,z_um,tissue,density")?;
    for p in points {
        writeln!(w, "{},{},{},{},{}", p.x, p.y, p.z, p.tissue as u8, p.density)?;
    }
    Ok(())
}

pub fn write_breakdown_json<W: Write>(
    breakdown: &TissueBreakdown,
    w: &mut W,
) -> Result<(), CriticalsError> {
    serde_json::to_writer_pretty(&mut *w, breakdown)?;
    writeln!(w)?;
    Ok(())
}
