//! The ten ONH structural parameters: octant thickness profiles (RNFLT,
//! MRW, GCCT, ChT), prelaminar and lamina cribrosa depths, LC global
//! shape index, peripapillary scleral angle, and BMO area.

use nalgebra::{Matrix2, Point3, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::OnhFrame;
use crate::surfaces::{
    angle_deg_of, extract_boundaries, octant_of_angle_deg, thickness_at, Octant, TissueSurface,
};
use crate::volume::{LabelVolume, TissueLabel};

/// Ring sampling density for octant parameters: one sample per degree.
pub const RING_SAMPLES: usize = 360;
/// Ring radius as a multiple of the BMO radius.
pub const RING_RADIUS_FACTOR: f64 = 1.5;
/// Radial fit window for the scleral angle, multiples of the BMO radius.
/// The inner edge sits clear of the canal rim so that rim-adjacent
/// columns cannot flatten the line fits.
pub const PPSA_WINDOW: (f64, f64) = (1.2, 2.5);

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("empty ring sector {0}")]
    EmptyRingSector(&'static str),
    #[error("no ILM points available")]
    EmptyIlm,
    #[error("no ILM intersection on the BMO-center axis")]
    NoIlmIntersection,
    #[error("no LC intersection on the BMO-center axis")]
    NoLcIntersection,
    #[error("no LC visible")]
    NoLcVisible,
    #[error("degenerate quadric fit")]
    DegenerateFit,
    #[error("insufficient sclera points on the {0} side")]
    InsufficientScleraPoints(&'static str),
    #[error("too few LC points: got {0}, need at least 6")]
    TooFewLcPoints(usize),
}

/// The ten structural parameters. Octant vectors follow the order
/// T, ST, S, SN, N, IN, I, IT. Missing values are NaN-coded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnhParameters {
    pub rnflt_um: [f64; 8],
    pub mrw_um: [f64; 8],
    pub gcct_um: [f64; 8],
    pub cht_um: [f64; 8],
    pub pld_um: f64,
    pub mpt_um: f64,
    pub lcd_um: f64,
    pub lc_gsi: f64,
    pub ppsa_deg: f64,
    pub bmoa_mm2: f64,
    pub rnflt_avg_um: f64,
    pub mrw_avg_um: f64,
    pub gcct_avg_um: f64,
    pub cht_avg_um: f64,
}

impl OnhParameters {
    pub fn nan() -> Self {
        OnhParameters {
            rnflt_um: [f64::NAN; 8],
            mrw_um: [f64::NAN; 8],
            gcct_um: [f64::NAN; 8],
            cht_um: [f64::NAN; 8],
            pld_um: f64::NAN,
            mpt_um: f64::NAN,
            lcd_um: f64::NAN,
            lc_gsi: f64::NAN,
            ppsa_deg: f64::NAN,
            bmoa_mm2: f64::NAN,
            rnflt_avg_um: f64::NAN,
            mrw_avg_um: f64::NAN,
            gcct_avg_um: f64::NAN,
            cht_avg_um: f64::NAN,
        }
    }

    /// Scalar parameter by name; octant parameters by per-octant key.
    pub fn scalar_names() -> &'static [&'static str] {
        &["pld_um", "mpt_um", "lcd_um", "lc_gsi", "ppsa_deg", "bmoa_mm2",
          "rnflt_avg_um", "mrw_avg_um", "gcct_avg_um", "cht_avg_um"]
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match name {
            "pld_um" => Some(self.pld_um),
            "mpt_um" => Some(self.mpt_um),
            "lcd_um" => Some(self.lcd_um),
            "lc_gsi" => Some(self.lc_gsi),
            "ppsa_deg" => Some(self.ppsa_deg),
            "bmoa_mm2" => Some(self.bmoa_mm2),
            "rnflt_avg_um" => Some(self.rnflt_avg_um),
            "mrw_avg_um" => Some(self.mrw_avg_um),
            "gcct_avg_um" => Some(self.gcct_avg_um),
            "cht_avg_um" => Some(self.cht_avg_um),
            _ => None,
        }
    }

    /// Fixed CSV column order used by report emitters.
    pub fn csv_header() -> String {
        let mut cols = Vec::new();
        for name in ["rnflt", "mrw", "gcct", "cht"] {
            for o in Octant::ALL {
                cols.push(format!("{name}_{}_um", o.short_name()));
            }
        }
        cols.extend(
            [
                "pld_um", "mpt_um", "lcd_um", "lc_gsi", "ppsa_deg", "bmoa_mm2",
                "rnflt_avg_um", "mrw_avg_um", "gcct_avg_um", "cht_avg_um",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let fmt = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        let mut cols = Vec::new();
        for arr in [&self.rnflt_um, &self.mrw_um, &self.gcct_um, &self.cht_um] {
            cols.extend(arr.iter().map(|&v| fmt(v)));
        }
        for v in [
            self.pld_um, self.mpt_um, self.lcd_um, self.lc_gsi, self.ppsa_deg, self.bmoa_mm2,
            self.rnflt_avg_um, self.mrw_avg_um, self.gcct_avg_um, self.cht_avg_um,
        ] {
            cols.push(fmt(v));
        }
        cols.join(",")
    }
}

fn mean_of_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Ring sample point in the BMO plane at sector angle `deg` (from the
/// temporal axis) and radius `r`, normalized coordinates.
fn ring_point_normalized(deg: f64, r: f64) -> Point3<f64> {
    let rad = deg.to_radians();
    // temporal coordinate = -nasal coordinate
    Point3::new(-r * rad.cos(), r * rad.sin(), 0.0)
}

/// Map a volume-coordinate point to its nearest surface column, accepting
/// it only if the column center is within one lateral spacing.
fn nearest_column(surface: &TissueSurface, p: &Point3<f64>) -> Option<(usize, usize)> {
    let max_spacing = surface.dx.max(surface.dy);
    let fx = p.x / surface.dx - 0.5;
    let fy = p.y / surface.dy - 0.5;
    let ix0 = fx.round() as isize;
    let iy0 = fy.round() as isize;
    let mut best: Option<((usize, usize), f64)> = None;
    for jy in (iy0 - 1)..=(iy0 + 1) {
        for jx in (ix0 - 1)..=(ix0 + 1) {
            if jx < 0 || jy < 0 || jx >= surface.nx as isize || jy >= surface.ny as isize {
                continue;
            }
            let (ix, iy) = (jx as usize, jy as usize);
            if surface.anterior_z(ix, iy).is_none() {
                continue;
            }
            let cx = (ix as f64 + 0.5) * surface.dx;
            let cy = (iy as f64 + 0.5) * surface.dy;
            let d = ((cx - p.x).powi(2) + (cy - p.y).powi(2)).sqrt();
            if d <= max_spacing && best.map_or(true, |(_, bd)| d < bd) {
                best = Some(((ix, iy), d));
            }
        }
    }
    best.map(|(c, _)| c)
}

/// Average a per-sample measurement over the 1.5*BMOR ring into octants.
fn ring_octant_average(
    frame: &OnhFrame,
    mut sample: impl FnMut(&Point3<f64>) -> Option<f64>,
) -> ([f64; 8], Vec<Octant>) {
    let r = RING_RADIUS_FACTOR * frame.bmo_radius;
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    for k in 0..RING_SAMPLES {
        let deg = k as f64 * 360.0 / RING_SAMPLES as f64;
        let pn = ring_point_normalized(deg, r);
        let octant = octant_of_angle_deg(deg).expect("ring angle is finite");
        let pv = frame.from_normalized(&pn);
        if let Some(v) = sample(&pv) {
            sums[octant as usize] += v;
            counts[octant as usize] += 1;
        }
    }
    let mut out = [f64::NAN; 8];
    let mut empty = Vec::new();
    for o in Octant::ALL {
        let i = o as usize;
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        } else {
            empty.push(o);
        }
    }
    (out, empty)
}

/// Average RNFL thickness per octant at 1.5 BMO radii.
pub fn rnflt_octants(volume: &LabelVolume, frame: &OnhFrame) -> ([f64; 8], Vec<Octant>) {
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    rnflt_octants_from(&rnfl, frame)
}

pub(crate) fn rnflt_octants_from(rnfl: &TissueSurface, frame: &OnhFrame) -> ([f64; 8], Vec<Octant>) {
    ring_octant_average(frame, |p| {
        let (ix, iy) = nearest_column(rnfl, p)?;
        thickness_at(rnfl, ix, iy)
    })
}

/// Average ganglion cell complex thickness per octant at the RNFLT ring:
/// sum of the RNFL and GCL+IPL columnwise run lengths at the sample column.
pub fn gcct_octants(volume: &LabelVolume, frame: &OnhFrame) -> ([f64; 8], Vec<Octant>) {
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    let gcl = extract_boundaries(volume, TissueLabel::GclIpl);
    gcct_octants_from(&rnfl, &gcl, frame)
}

pub(crate) fn gcct_octants_from(
    rnfl: &TissueSurface,
    gcl: &TissueSurface,
    frame: &OnhFrame,
) -> ([f64; 8], Vec<Octant>) {
    ring_octant_average(frame, |p| {
        let (ix, iy) = nearest_column(rnfl, p)?;
        let r = rnfl.columnwise_thickness(ix, iy)?;
        // GCL may be absent in the column; GCCT then equals the RNFL part
        let g = gcl.columnwise_thickness(ix, iy).unwrap_or(0.0);
        Some(r + g)
    })
}

/// Average choroidal thickness per octant at the RNFLT ring.
pub fn cht_octants(volume: &LabelVolume, frame: &OnhFrame) -> ([f64; 8], Vec<Octant>) {
    let choroid = extract_boundaries(volume, TissueLabel::Choroid);
    cht_octants_from(&choroid, frame)
}

pub(crate) fn cht_octants_from(choroid: &TissueSurface, frame: &OnhFrame) -> ([f64; 8], Vec<Octant>) {
    ring_octant_average(frame, |p| {
        let (ix, iy) = nearest_column(choroid, p)?;
        thickness_at(choroid, ix, iy)
    })
}

/// Minimum rim width per octant: for each BMO point, the minimum distance
/// to any ILM (anterior RNFL boundary) point, binned by the BMO point's
/// octant.
pub fn mrw_octants(volume: &LabelVolume, frame: &OnhFrame) -> Result<[f64; 8], ParamError> {
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    mrw_octants_from(volume, &rnfl, frame)
}

pub(crate) fn mrw_octants_from(
    volume: &LabelVolume,
    rnfl: &TissueSurface,
    frame: &OnhFrame,
) -> Result<[f64; 8], ParamError> {
    let ilm = rnfl.anterior_points();
    if ilm.is_empty() {
        return Err(ParamError::EmptyIlm);
    }
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    for b in &volume.bmo_points {
        let d = ilm
            .iter()
            .map(|p| (p - b).norm())
            .fold(f64::INFINITY, f64::min);
        let bn = frame.to_normalized(b);
        if let Ok(deg) = angle_deg_of(&bn) {
            let o = octant_of_angle_deg(deg).expect("finite angle") as usize;
            sums[o] += d;
            counts[o] += 1;
        }
    }
    let mut out = [f64::NAN; 8];
    for i in 0..8 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    Ok(out)
}

/// Local quadratic least squares z = c20 x^2 + c11 xy + c02 y^2 + c10 x +
/// c01 y + c00 over (x, y, z) samples. Returns the six coefficients.
fn fit_quadric(points: &[(f64, f64, f64)]) -> Result<[f64; 6], ParamError> {
    if points.len() < 6 {
        return Err(ParamError::DegenerateFit);
    }
    // condition by scaling x,y to O(1)
    let scale = points
        .iter()
        .map(|p| p.0.abs().max(p.1.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut ata = SMatrix::<f64, 6, 6>::zeros();
    let mut atb = SVector::<f64, 6>::zeros();
    for &(x, y, z) in points {
        let (xs, ys) = (x / scale, y / scale);
        let row = SVector::<f64, 6>::from([xs * xs, xs * ys, ys * ys, xs, ys, 1.0]);
        ata += row * row.transpose();
        atb += row * z;
    }
    let c = ata
        .lu()
        .solve(&atb)
        .ok_or(ParamError::DegenerateFit)?;
    // undo scaling
    Ok([
        c[0] / (scale * scale),
        c[1] / (scale * scale),
        c[2] / (scale * scale),
        c[3] / scale,
        c[4] / scale,
        c[5],
    ])
}

/// Height of a surface point set on the BMO-center axis: local quadratic
/// fit over points within `window` of the axis, evaluated at the origin.
/// Heights are posterior-positive (negated normalized z).
fn axis_height(points_normalized: &[Point3<f64>], window: f64) -> Option<f64> {
    let local: Vec<(f64, f64, f64)> = points_normalized
        .iter()
        .filter(|p| (p.x * p.x + p.y * p.y).sqrt() <= window)
        .map(|p| (p.x, p.y, -p.z))
        .collect();
    if local.len() >= 6 {
        if let Ok(c) = fit_quadric(&local) {
            return Some(c[5]);
        }
    }
    // fallback: inverse-distance weighting over the same neighborhood
    if local.is_empty() {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y, w) in &local {
        let d = (x * x + y * y).sqrt().max(1e-6);
        num += w / d;
        den += 1.0 / d;
    }
    Some(num / den)
}

fn normalized_anterior_points(surface: &TissueSurface, frame: &OnhFrame) -> Vec<Point3<f64>> {
    surface
        .anterior_points()
        .iter()
        .map(|p| frame.to_normalized(p))
        .collect()
}

/// Prelaminar depth: signed distance from the BMO center to the ILM along
/// the BMO plane normal, positive when the ILM is posterior (cupped).
pub fn prelaminar_depth(volume: &LabelVolume, frame: &OnhFrame) -> Result<f64, ParamError> {
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    prelaminar_depth_from(&rnfl, frame)
}

pub(crate) fn prelaminar_depth_from(
    rnfl: &TissueSurface,
    frame: &OnhFrame,
) -> Result<f64, ParamError> {
    let pts = normalized_anterior_points(rnfl, frame);
    let window = 3.0 * rnfl.dx.max(rnfl.dy);
    axis_height(&pts, window).ok_or(ParamError::NoIlmIntersection)
}

/// LC depth: as the prelaminar depth but intersecting the anterior LC
/// boundary.
pub fn lc_depth(volume: &LabelVolume, frame: &OnhFrame) -> Result<f64, ParamError> {
    let lc = extract_boundaries(volume, TissueLabel::Lc);
    lc_depth_from(&lc, frame)
}

pub(crate) fn lc_depth_from(lc: &TissueSurface, frame: &OnhFrame) -> Result<f64, ParamError> {
    if lc.is_empty() {
        return Err(ParamError::NoLcVisible);
    }
    let pts = normalized_anterior_points(lc, frame);
    let window = 3.0 * lc.dx.max(lc.dy);
    axis_height(&pts, window).ok_or(ParamError::NoLcIntersection)
}

fn inside_bmo_ellipse(frame: &OnhFrame, p: &Point3<f64>) -> bool {
    let (ct, st) = (frame.ellipse.theta.cos(), frame.ellipse.theta.sin());
    let u = ct * p.x + st * p.y;
    let v = -st * p.x + ct * p.y;
    (u / frame.ellipse.a).powi(2) + (v / frame.ellipse.b).powi(2) <= 1.0
}

/// Minimum prelaminar thickness: minimum distance from ILM points inside
/// the BMO ellipse to the anterior LC point set.
pub fn min_prelaminar_thickness(volume: &LabelVolume, frame: &OnhFrame) -> Result<f64, ParamError> {
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    let lc = extract_boundaries(volume, TissueLabel::Lc);
    min_prelaminar_thickness_from(&rnfl, &lc, frame)
}

pub(crate) fn min_prelaminar_thickness_from(
    rnfl: &TissueSurface,
    lc: &TissueSurface,
    frame: &OnhFrame,
) -> Result<f64, ParamError> {
    if lc.is_empty() {
        return Err(ParamError::NoLcVisible);
    }
    let ilm: Vec<Point3<f64>> = normalized_anterior_points(rnfl, frame)
        .into_iter()
        .filter(|p| inside_bmo_ellipse(frame, p))
        .collect();
    if ilm.is_empty() {
        return Err(ParamError::EmptyIlm);
    }
    let lc_pts = normalized_anterior_points(lc, frame);
    let mut best = f64::INFINITY;
    for a in &ilm {
        for b in &lc_pts {
            let d2 = (a - b).norm_squared();
            if d2 < best {
                best = d2;
            }
        }
    }
    Ok(best.sqrt())
}

/// Principal curvatures (k1 >= k2) of the graph w(x, y) at the origin,
/// given quadric coefficients in posterior-positive height.
fn principal_curvatures(c: &[f64; 6]) -> (f64, f64) {
    let (gx, gy) = (c[3], c[4]);
    let hess = Matrix2::new(2.0 * c[0], c[1], c[1], 2.0 * c[2]);
    let g = 1.0 + gx * gx + gy * gy;
    let first = Matrix2::new(1.0 + gx * gx, gx * gy, gx * gy, 1.0 + gy * gy);
    let second = hess / g.sqrt();
    let shape = first.try_inverse().expect("first fundamental form is SPD") * second;
    // the shape operator is similar to a symmetric matrix; eigenvalues real
    let tr = shape.trace();
    let det = shape.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 + disc, tr / 2.0 - disc)
}

/// LC global shape index in [-1, 1]: fits a quadric to the anterior LC
/// boundary in the normalized frame and maps the principal curvatures at
/// the BMO-center axis through (2/pi) atan((k1+k2)/(k1-k2)). Cup shapes
/// (posteriorly bowed) are negative; the umbilic limit takes the sign of
/// the mean curvature.
pub fn lc_gsi(volume: &LabelVolume, frame: &OnhFrame) -> Result<f64, ParamError> {
    let lc = extract_boundaries(volume, TissueLabel::Lc);
    lc_gsi_from(&lc, frame)
}

pub(crate) fn lc_gsi_from(lc: &TissueSurface, frame: &OnhFrame) -> Result<f64, ParamError> {
    if lc.is_empty() {
        return Err(ParamError::NoLcVisible);
    }
    let pts: Vec<(f64, f64, f64)> = normalized_anterior_points(lc, frame)
        .iter()
        .map(|p| (p.x, p.y, -p.z)) // posterior-positive height
        .collect();
    if pts.len() < 6 {
        return Err(ParamError::TooFewLcPoints(pts.len()));
    }
    let c = fit_quadric(&pts)?;
    let (k1, k2) = principal_curvatures(&c);
    // flat surface: curvature below numerical noise -> degenerate
    let mag = k1.abs().max(k2.abs());
    if mag < 1e-9 {
        return Err(ParamError::DegenerateFit);
    }
    if (k1 - k2).abs() < 1e-9 * mag.max(1e-12) {
        // umbilic: continuous limit of the atan expression
        return Ok((k1 + k2).signum());
    }
    Ok((2.0 / std::f64::consts::PI) * ((k1 + k2) / (k1 - k2)).atan())
}

fn line_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx < 1e-12 {
        return None;
    }
    Some(sxy / sxx)
}

/// Peripapillary scleral angle: angle between the nasal and temporal
/// anterior-sclera line fits in the central nasal-temporal section,
/// degrees; 0 for a flat configuration.
pub fn ppsa(volume: &LabelVolume, frame: &OnhFrame) -> Result<f64, ParamError> {
    let sclera = extract_boundaries(volume, TissueLabel::Sclera);
    ppsa_from(&sclera, frame)
}

pub(crate) fn ppsa_from(sclera: &TissueSurface, frame: &OnhFrame) -> Result<f64, ParamError> {
    let pts = normalized_anterior_points(sclera, frame);
    let half_section = sclera.dy; // central B-scan band
    let (r_lo, r_hi) = (
        PPSA_WINDOW.0 * frame.bmo_radius,
        PPSA_WINDOW.1 * frame.bmo_radius,
    );
    let mut nasal = Vec::new();
    let mut temporal = Vec::new();
    for p in &pts {
        if p.y.abs() > half_section {
            continue;
        }
        let r = p.x.abs();
        if r < r_lo || r > r_hi {
            continue;
        }
        // (x, posterior-positive height)
        let sample = (p.x, -p.z);
        if p.x > 0.0 {
            nasal.push(sample);
        } else {
            temporal.push(sample);
        }
    }
    let m_n = line_slope(&nasal).ok_or(ParamError::InsufficientScleraPoints("nasal"))?;
    let m_t = line_slope(&temporal).ok_or(ParamError::InsufficientScleraPoints("temporal"))?;
    Ok((m_n.atan() - m_t.atan()).abs().to_degrees())
}

/// BMO area of the best-fit ellipse, mm^2.
pub fn bmo_area(frame: &OnhFrame) -> f64 {
    frame.bmo_area
}

/// One diagnostic per parameter that could not be extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub parameter: String,
    pub message: String,
}

/// Run the full parameter battery. Parameters that fail are NaN-coded and
/// reported in the diagnostics list; extraction never aborts on a single
/// failure.
pub fn extract_all(volume: &LabelVolume) -> (OnhParameters, Vec<Diagnostic>) {
    let mut params = OnhParameters::nan();
    let mut diags = Vec::new();
    let diag = |p: &str, m: String, diags: &mut Vec<Diagnostic>| {
        diags.push(Diagnostic {
            parameter: p.into(),
            message: m,
        })
    };
    let frame = match crate::frame::build_frame(volume) {
        Ok(f) => f,
        Err(e) => {
            diag("frame", e.to_string(), &mut diags);
            return (params, diags);
        }
    };
    let rnfl = extract_boundaries(volume, TissueLabel::RnflPlt);
    let gcl = extract_boundaries(volume, TissueLabel::GclIpl);
    let choroid = extract_boundaries(volume, TissueLabel::Choroid);
    let sclera = extract_boundaries(volume, TissueLabel::Sclera);
    let lc = extract_boundaries(volume, TissueLabel::Lc);

    let (rnflt, empty) = rnflt_octants_from(&rnfl, &frame);
    params.rnflt_um = rnflt;
    for o in empty {
        diag("rnflt", format!("empty ring sector {}", o.short_name()), &mut diags);
    }
    let (gcct, empty) = gcct_octants_from(&rnfl, &gcl, &frame);
    params.gcct_um = gcct;
    for o in empty {
        diag("gcct", format!("empty ring sector {}", o.short_name()), &mut diags);
    }
    let (cht, empty) = cht_octants_from(&choroid, &frame);
    params.cht_um = cht;
    for o in empty {
        diag("cht", format!("empty ring sector {}", o.short_name()), &mut diags);
    }
    match mrw_octants_from(volume, &rnfl, &frame) {
        Ok(v) => params.mrw_um = v,
        Err(e) => diag("mrw", e.to_string(), &mut diags),
    }
    match prelaminar_depth_from(&rnfl, &frame) {
        Ok(v) => params.pld_um = v,
        Err(e) => diag("pld", e.to_string(), &mut diags),
    }
    match min_prelaminar_thickness_from(&rnfl, &lc, &frame) {
        Ok(v) => params.mpt_um = v,
        Err(e) => diag("mpt", e.to_string(), &mut diags),
    }
    match lc_depth_from(&lc, &frame) {
        Ok(v) => params.lcd_um = v,
        Err(e) => diag("lcd", e.to_string(), &mut diags),
    }
    match lc_gsi_from(&lc, &frame) {
        Ok(v) => params.lc_gsi = v,
        Err(e) => diag("lc_gsi", e.to_string(), &mut diags),
    }
    match ppsa_from(&sclera, &frame) {
        Ok(v) => params.ppsa_deg = v,
        Err(e) => diag("ppsa", e.to_string(), &mut diags),
    }
    params.bmoa_mm2 = bmo_area(&frame);
    params.rnflt_avg_um = mean_of_finite(&params.rnflt_um);
    params.mrw_avg_um = mean_of_finite(&params.mrw_um);
    params.gcct_avg_um = mean_of_finite(&params.gcct_um);
    params.cht_avg_um = mean_of_finite(&params.cht_um);
    (params, diags)
}

#[allow(unused)]
pub(crate) fn vec2(x: f64, y: f64) -> Vector2<f64> {
    Vector2::new(x, y)
}
