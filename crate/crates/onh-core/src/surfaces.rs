//! Per-tissue boundary surfaces extracted columnwise from a label volume,
//! local thickness, and octant assignment.

use nalgebra::Point3;
use thiserror::Error;

use crate::volume::{LabelVolume, TissueLabel};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Lateral search window for the minimum-distance thickness, micrometers.
/// Validated against the exhaustive search in tests.
pub const THICKNESS_WINDOW_UM: f64 = 300.0;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("posterior boundary missing; thickness undefined")]
    MissingPosterior,
    #[error("octant undefined for the in-plane origin")]
    OriginPoint,
}

/// Anterior/posterior boundary of one tissue, one point per (ix, iy)
/// column. Boundary z values are voxel centers in micrometers; absent
/// columns are NaN.
#[derive(Debug, Clone)]
pub struct TissueSurface {
    pub tissue: TissueLabel,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    anterior_z: Vec<f64>,
    posterior_z: Vec<f64>,
    thickness: Option<Vec<f64>>,
    /// Columns where the tissue appeared in more than one disjoint run.
    pub multi_run_columns: usize,
}

impl TissueSurface {
    #[inline]
    fn idx(&self, ix: usize, iy: usize) -> usize {
        ix + self.nx * iy
    }

    #[inline]
    pub fn anterior_z(&self, ix: usize, iy: usize) -> Option<f64> {
        let z = self.anterior_z[self.idx(ix, iy)];
        z.is_finite().then_some(z)
    }

    #[inline]
    pub fn posterior_z(&self, ix: usize, iy: usize) -> Option<f64> {
        let z = self.posterior_z[self.idx(ix, iy)];
        z.is_finite().then_some(z)
    }

    /// Anterior boundary point of a column, volume coordinates.
    #[inline]
    pub fn anterior_point(&self, ix: usize, iy: usize) -> Option<Point3<f64>> {
        self.anterior_z(ix, iy).map(|z| {
            Point3::new((ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dy, z)
        })
    }

    #[inline]
    pub fn posterior_point(&self, ix: usize, iy: usize) -> Option<Point3<f64>> {
        self.posterior_z(ix, iy).map(|z| {
            Point3::new((ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dy, z)
        })
    }

    /// Minimum-distance thickness at a column, if computed.
    #[inline]
    pub fn thickness(&self, ix: usize, iy: usize) -> Option<f64> {
        let t = self.thickness.as_ref()?[self.idx(ix, iy)];
        t.is_finite().then_some(t)
    }

    pub fn has_thickness(&self) -> bool {
        self.thickness.is_some()
    }

    /// Axial run length anterior-to-posterior of the column, micrometers.
    /// One voxel counts as one dz.
    #[inline]
    pub fn columnwise_thickness(&self, ix: usize, iy: usize) -> Option<f64> {
        let a = self.anterior_z(ix, iy)?;
        let p = self.posterior_z(ix, iy)?;
        Some(p - a + self.dz)
    }

    /// All anterior boundary points.
    pub fn anterior_points(&self) -> Vec<Point3<f64>> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if let Some(p) = self.anterior_point(ix, iy) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Columns that carry the tissue, as (ix, iy).
    pub fn columns(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if self.anterior_z[self.idx(ix, iy)].is_finite() {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.anterior_z.iter().all(|z| !z.is_finite())
    }
}

/// Columnwise boundary extraction along the A-scan direction: the anterior
/// point is the first voxel of the tissue along increasing z, the posterior
/// point the end of the contiguous run containing it. Extra disjoint runs
/// are counted, not used.
pub fn extract_boundaries(volume: &LabelVolume, tissue: TissueLabel) -> TissueSurface {
    let (nx, ny, nz) = (volume.nx, volume.ny, volume.nz);
    let label = tissue as u8;
    let process_column = |col: usize| -> (f64, f64, bool) {
        let ix = col % nx;
        let iy = col / nx;
        let mut anterior = f64::NAN;
        let mut posterior = f64::NAN;
        let mut in_first_run = false;
        let mut extra_run = false;
        for iz in 0..nz {
            let is_tissue = volume.label_at(ix, iy, iz) == label;
            if is_tissue {
                if anterior.is_nan() {
                    anterior = (iz as f64 + 0.5) * volume.dz;
                    posterior = anterior;
                    in_first_run = true;
                } else if in_first_run {
                    posterior = (iz as f64 + 0.5) * volume.dz;
                } else {
                    extra_run = true;
                }
            } else if in_first_run {
                in_first_run = false;
            }
        }
        (anterior, posterior, extra_run)
    };

    let results: Vec<(f64, f64, bool)> = {
        #[cfg(feature = "parallel")]
        {
            (0..nx * ny).into_par_iter().map(process_column).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..nx * ny).map(process_column).collect()
        }
    };

    let mut anterior_z = Vec::with_capacity(nx * ny);
    let mut posterior_z = Vec::with_capacity(nx * ny);
    let mut multi = 0usize;
    for (a, p, extra) in results {
        anterior_z.push(a);
        posterior_z.push(p);
        if extra {
            multi += 1;
        }
    }
    TissueSurface {
        tissue,
        nx,
        ny,
        dx: volume.dx,
        dy: volume.dy,
        dz: volume.dz,
        anterior_z,
        posterior_z,
        thickness: None,
        multi_run_columns: multi,
    }
}

fn thickness_at_column(surface: &TissueSurface, ix: usize, iy: usize, window_um: f64) -> f64 {
    let Some(a) = surface.anterior_point(ix, iy) else {
        return f64::NAN;
    };
    let rx = (window_um / surface.dx).ceil() as isize;
    let ry = (window_um / surface.dy).ceil() as isize;
    let mut best = f64::INFINITY;
    for jy in (iy as isize - ry).max(0)..=(iy as isize + ry).min(surface.ny as isize - 1) {
        for jx in (ix as isize - rx).max(0)..=(ix as isize + rx).min(surface.nx as isize - 1) {
            if let Some(p) = surface.posterior_point(jx as usize, jy as usize) {
                let d2 = (p - a).norm_squared();
                if d2 < best {
                    best = d2;
                }
            }
        }
    }
    if best.is_finite() {
        best.sqrt()
    } else {
        f64::NAN
    }
}

/// Fill the minimum-distance thickness of every column: the minimum
/// Euclidean distance from the column's anterior point to the posterior
/// point set (restricted to a lateral window).
pub fn local_thickness(surface: &TissueSurface) -> Result<TissueSurface, SurfaceError> {
    local_thickness_windowed(surface, THICKNESS_WINDOW_UM)
}

pub fn local_thickness_windowed(
    surface: &TissueSurface,
    window_um: f64,
) -> Result<TissueSurface, SurfaceError> {
    if surface.posterior_z.iter().all(|z| !z.is_finite()) {
        return Err(SurfaceError::MissingPosterior);
    }
    let thickness: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            (0..surface.nx * surface.ny)
                .into_par_iter()
                .map(|i| thickness_at_column(surface, i % surface.nx, i / surface.nx, window_um))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..surface.nx * surface.ny)
                .map(|i| thickness_at_column(surface, i % surface.nx, i / surface.nx, window_um))
                .collect()
        }
    };
    let mut out = surface.clone();
    out.thickness = Some(thickness);
    Ok(out)
}

/// Minimum-distance thickness at a single column, on demand.
pub fn thickness_at(surface: &TissueSurface, ix: usize, iy: usize) -> Option<f64> {
    let t = thickness_at_column(surface, ix, iy, THICKNESS_WINDOW_UM);
    t.is_finite().then_some(t)
}

/// The eight 45-degree sectors around the BMO center, right-eye
/// convention: temporal centered at 0 degrees, superior at 90.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Octant {
    Temporal = 0,
    SuperoTemporal = 1,
    Superior = 2,
    SuperoNasal = 3,
    Nasal = 4,
    InferoNasal = 5,
    Inferior = 6,
    InferoTemporal = 7,
}

impl Octant {
    pub const ALL: [Octant; 8] = [
        Octant::Temporal,
        Octant::SuperoTemporal,
        Octant::Superior,
        Octant::SuperoNasal,
        Octant::Nasal,
        Octant::InferoNasal,
        Octant::Inferior,
        Octant::InferoTemporal,
    ];

    pub fn short_name(&self) -> &'static str {
        ["T", "ST", "S", "SN", "N", "IN", "I", "IT"][*self as usize]
    }

    pub fn from_index(i: usize) -> Octant {
        Self::ALL[i % 8]
    }

    /// Center angle of the sector, degrees from the temporal axis.
    pub fn center_deg(&self) -> f64 {
        (*self as usize as f64) * 45.0
    }
}

/// Octant of a point in normalized coordinates (nasal, superior, axial).
/// The angle is measured from the temporal axis (negative nasal
/// coordinate) counterclockwise toward superior; sectors are half-open,
/// lower edge inclusive.
pub fn octant_of(p: &Point3<f64>) -> Result<Octant, SurfaceError> {
    octant_of_angle_deg(angle_deg_of(p)?)
}

/// In-plane angle of a normalized point, degrees in [0, 360).
pub fn angle_deg_of(p: &Point3<f64>) -> Result<f64, SurfaceError> {
    let temporal = -p.x;
    let superior = p.y;
    if temporal == 0.0 && superior == 0.0 {
        return Err(SurfaceError::OriginPoint);
    }
    let mut deg = superior.atan2(temporal).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    Ok(deg)
}

pub fn octant_of_angle_deg(deg: f64) -> Result<Octant, SurfaceError> {
    if !deg.is_finite() {
        return Err(SurfaceError::OriginPoint);
    }
    let sector = (((deg + 22.5).rem_euclid(360.0)) / 45.0).floor() as usize;
    Ok(Octant::from_index(sector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Laterality, LabelVolume};
    use approx::assert_abs_diff_eq;

    fn slab_volume(z_from_um: f64, z_to_um: f64, tissue: TissueLabel) -> LabelVolume {
        let (nx, ny, nz) = (8, 6, 128);
        let dz = 3.87;
        let mut voxels = vec![0u8; nx * ny * nz];
        for iz in 0..nz {
            let zc = (iz as f64 + 0.5) * dz;
            if zc >= z_from_um && zc < z_to_um {
                for iy in 0..ny {
                    for ix in 0..nx {
                        voxels[ix + nx * (iy + ny * iz)] = tissue as u8;
                    }
                }
            }
        }
        LabelVolume {
            nx,
            ny,
            nz,
            dx: 11.5,
            dy: 30.0,
            dz,
            voxels,
            bmo_points: (0..5)
                .map(|i| nalgebra::Point3::new(10.0 + i as f64, 10.0, 10.0))
                .collect(),
            laterality: Laterality::Right,
            subject_meta: None,
        }
    }

    #[test]
    fn uniform_slab_anterior_is_first_voxel_center() {
        let v = slab_volume(100.0, 200.0, TissueLabel::RnflPlt);
        let s = extract_boundaries(&v, TissueLabel::RnflPlt);
        // first voxel with center >= 100: iz = ceil((100/dz)-0.5)
        let expected = (0..v.nz)
            .map(|iz| (iz as f64 + 0.5) * v.dz)
            .find(|&z| z >= 100.0)
            .unwrap();
        for iy in 0..v.ny {
            for ix in 0..v.nx {
                assert_abs_diff_eq!(s.anterior_z(ix, iy).unwrap(), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn column_without_tissue_is_absent() {
        let v = slab_volume(100.0, 200.0, TissueLabel::Choroid);
        let s = extract_boundaries(&v, TissueLabel::Lc);
        assert!(s.is_empty());
        assert!(s.anterior_z(0, 0).is_none());
    }

    #[test]
    fn multi_run_uses_most_anterior_and_counts() {
        let mut v = slab_volume(100.0, 150.0, TissueLabel::RnflPlt);
        // second disjoint run deeper in one column
        let nx = v.nx;
        let ny = v.ny;
        for iz in 80..85 {
            v.voxels[3 + nx * (2 + ny * iz)] = TissueLabel::RnflPlt as u8;
        }
        let s = extract_boundaries(&v, TissueLabel::RnflPlt);
        assert_eq!(s.multi_run_columns, 1);
        // posterior of column (3,2) is end of the FIRST run
        let post = s.posterior_z(3, 2).unwrap();
        assert!(post < 150.0 + v.dz);
    }

    #[test]
    fn parallel_flat_layers_thickness() {
        let v = slab_volume(100.0, 200.0, TissueLabel::GclIpl);
        let s = extract_boundaries(&v, TissueLabel::GclIpl);
        let t = local_thickness(&s).unwrap();
        // distance between first and last voxel centers of the run
        let a = s.anterior_z(0, 0).unwrap();
        let p = s.posterior_z(0, 0).unwrap();
        for iy in 0..v.ny {
            for ix in 0..v.nx {
                assert_abs_diff_eq!(t.thickness(ix, iy).unwrap(), p - a, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn missing_posterior_is_error() {
        let v = slab_volume(100.0, 200.0, TissueLabel::Choroid);
        let s = extract_boundaries(&v, TissueLabel::Sclera); // empty
        assert!(matches!(
            local_thickness(&s),
            Err(SurfaceError::MissingPosterior)
        ));
    }

    #[test]
    fn thickness_matches_brute_force_oracle_on_wedge() {
        // wedge: posterior deepens with ix
        let (nx, ny, nz) = (24, 8, 200);
        let (dx, dy, dz) = (11.5, 30.0, 3.87);
        let mut voxels = vec![0u8; nx * ny * nz];
        for iy in 0..ny {
            for ix in 0..nx {
                let top = 100.0;
                let bot = 150.0 + ix as f64 * 6.0;
                for iz in 0..nz {
                    let zc = (iz as f64 + 0.5) * dz;
                    if zc >= top && zc < bot {
                        voxels[ix + nx * (iy + ny * iz)] = TissueLabel::Orl as u8;
                    }
                }
            }
        }
        let v = LabelVolume {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz,
            voxels,
            bmo_points: (0..5)
                .map(|i| nalgebra::Point3::new(10.0 + i as f64, 10.0, 10.0))
                .collect(),
            laterality: Laterality::Right,
            subject_meta: None,
        };
        let s = extract_boundaries(&v, TissueLabel::Orl);
        let t = local_thickness(&s).unwrap();
        // O(n^2) brute force over all posterior points
        let posterior: Vec<_> = (0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)).collect::<Vec<_>>())
            .filter_map(|(ix, iy)| s.posterior_point(ix, iy))
            .collect();
        for iy in 0..ny {
            for ix in 0..nx {
                let a = s.anterior_point(ix, iy).unwrap();
                let brute = posterior
                    .iter()
                    .map(|p| (p - a).norm())
                    .fold(f64::INFINITY, f64::min);
                assert_abs_diff_eq!(t.thickness(ix, iy).unwrap(), brute, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn min_thickness_not_columnwise() {
        // two flat slabs, posterior laterally offset:
        // build anterior at [100,104) everywhere and posterior reachable
        // diagonally. Simulate by a slab whose posterior is flat; the min
        // property is: thickness <= columnwise distance.
        let v = slab_volume(100.0, 200.0, TissueLabel::RpeBm);
        let s = extract_boundaries(&v, TissueLabel::RpeBm);
        let t = local_thickness(&s).unwrap();
        for (ix, iy) in s.columns() {
            let col = s.columnwise_thickness(ix, iy).unwrap();
            assert!(t.thickness(ix, iy).unwrap() <= col + 1e-12);
        }
    }

    #[test]
    fn octant_assignment() {
        use nalgebra::Point3;
        // temporal axis: -x in normalized coords
        let t = Point3::new(-100.0, 0.0, 0.0);
        assert_eq!(octant_of(&t).unwrap(), Octant::Temporal);
        let s = Point3::new(0.0, 100.0, 0.0);
        assert_eq!(octant_of(&s).unwrap(), Octant::Superior);
        let n = Point3::new(100.0, 0.0, 0.0);
        assert_eq!(octant_of(&n).unwrap(), Octant::Nasal);
        let i = Point3::new(0.0, -100.0, 0.0);
        assert_eq!(octant_of(&i).unwrap(), Octant::Inferior);
        // 22.5 degrees exactly -> ST (lower edge inclusive)
        let deg = 22.5f64;
        let p = Point3::new(-deg.to_radians().cos() * 100.0, deg.to_radians().sin() * 100.0, 0.0);
        assert_eq!(octant_of(&p).unwrap(), Octant::SuperoTemporal);
        assert_eq!(octant_of_angle_deg(22.5).unwrap(), Octant::SuperoTemporal);
        // origin is an error
        assert!(matches!(
            octant_of(&Point3::new(0.0, 0.0, 5.0)),
            Err(SurfaceError::OriginPoint)
        ));
    }

    #[test]
    fn octant_scale_invariant() {
        use nalgebra::Point3;
        for k in 0..72 {
            let deg = k as f64 * 5.0 + 1.0;
            let p = Point3::new(
                -deg.to_radians().cos() * 10.0,
                deg.to_radians().sin() * 10.0,
                0.0,
            );
            let q = Point3::new(p.x * 137.0, p.y * 137.0, 55.0);
            assert_eq!(octant_of(&p).unwrap(), octant_of(&q).unwrap(), "deg={deg}");
        }
    }
}
