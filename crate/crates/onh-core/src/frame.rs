//! BMO-derived coordinate frame: best-fit plane and ellipse to the BMO
//! landmark points, and the rigid normalization used by all downstream
//! geometry.

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::volume::{LabelVolume, Laterality};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("degenerate collinear points: plane fit is ill-posed")]
    DegenerateCollinear,
    #[error("degenerate conic: no elliptical solution")]
    DegenerateConic,
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Best-fit ellipse to the BMO points, expressed in the BMO plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BmoEllipse {
    /// Ellipse center in volume coordinates (micrometers).
    pub center: Point3<f64>,
    /// Semi-major axis, micrometers.
    pub a: f64,
    /// Semi-minor axis, micrometers.
    pub b: f64,
    /// Orientation of the major axis in the plane basis, radians in
    /// (-pi/2, pi/2].
    pub theta: f64,
}

/// The normalized ONH coordinate frame.
///
/// `axis_nasal`, `axis_superior`, `bmo_normal` are mutually orthonormal.
/// The normal points anteriorly (toward decreasing scan z). For left
/// eyes the nasal axis is mirrored so downstream octant math can assume
/// right-eye orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct OnhFrame {
    pub bmo_center: Point3<f64>,
    pub bmo_normal: Vector3<f64>,
    pub axis_nasal: Vector3<f64>,
    pub axis_superior: Vector3<f64>,
    /// Equal-area scalar radius sqrt(a*b), micrometers.
    pub bmo_radius: f64,
    /// Ellipse area pi*a*b, in mm^2.
    pub bmo_area: f64,
    pub ellipse: BmoEllipse,
}

/// Total-least-squares plane through a point set: centroid plus the
/// scatter eigenvector of smallest eigenvalue, oriented anteriorly
/// (negative scan-z component).
pub fn fit_bmo_plane(points: &[Point3<f64>]) -> Result<(Point3<f64>, Vector3<f64>), FrameError> {
    if points.len() < 3 {
        return Err(FrameError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let centroid = Point3::from(
        points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords)
            / n,
    );
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // sort eigenpairs ascending by eigenvalue
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[2]];
    if eig.eigenvalues[order[0]] < 1e-12 * largest && eig.eigenvalues[order[1]] < 1e-12 * largest
    {
        return Err(FrameError::DegenerateCollinear);
    }
    let mut normal = eig.eigenvectors.column(order[0]).into_owned();
    normal.normalize_mut();
    // anterior = decreasing scan z
    if normal.z > 0.0 || (normal.z == 0.0 && (normal.x < 0.0 || (normal.x == 0.0 && normal.y < 0.0)))
    {
        normal = -normal;
    }
    Ok((centroid, normal))
}

/// Deterministic in-plane orthonormal basis (u, v) with u x v = normal.
pub fn plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let e = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = (e - normal * e.dot(normal)).normalize();
    let v = normal.cross(&u);
    (u, v)
}

/// 2D ellipse in an arbitrary plane basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse2 {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

/// Direct least-squares conic fit constrained to an ellipse
/// (Halir & Flusser's numerically stable variant of Fitzgibbon's method),
/// with a least-squares circle fallback for near-circular degeneracy.
pub fn fit_ellipse_2d(xy: &[(f64, f64)]) -> Result<Ellipse2, FrameError> {
    if xy.len() < 5 {
        return Err(FrameError::TooFewPoints {
            needed: 5,
            got: xy.len(),
        });
    }
    // center/scale normalization for conditioning
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = (xy
        .iter()
        .map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        .max(1e-12);
    let pts: Vec<(f64, f64)> = xy
        .iter()
        .map(|p| ((p.0 - mx) / scale, (p.1 - my) / scale))
        .collect();

    match direct_ellipse_conic(&pts) {
        Some(conic) => {
            let e = conic_to_ellipse(&conic).ok_or(FrameError::DegenerateConic)?;
            Ok(Ellipse2 {
                cx: e.cx * scale + mx,
                cy: e.cy * scale + my,
                a: e.a * scale,
                b: e.b * scale,
                theta: e.theta,
            })
        }
        None => {
            // circle fallback (Kasa fit)
            let c = circle_fit(&pts).ok_or(FrameError::DegenerateConic)?;
            Ok(Ellipse2 {
                cx: c.0 * scale + mx,
                cy: c.1 * scale + my,
                a: c.2 * scale,
                b: c.2 * scale,
                theta: 0.0,
            })
        }
    }
}

/// Conic coefficients [a, b, c, d, e, f] for
/// a x^2 + b xy + c y^2 + d x + e y + f = 0.
fn direct_ellipse_conic(pts: &[(f64, f64)]) -> Option<[f64; 6]> {
    let mut s1 = Matrix3::zeros(); // D1^T D1
    let mut s2 = Matrix3::zeros(); // D1^T D2
    let mut s3 = Matrix3::zeros(); // D2^T D2
    for &(x, y) in pts {
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse()?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by C1^{-1}, C1 = [[0,0,2],[0,-1,0],[2,0,0]]
    let reduced = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );
    let mut best: Option<Vector3<f64>> = None;
    for lambda in real_eigenvalues_3x3(&reduced) {
        if let Some(v) = null_vector(&(reduced - Matrix3::identity() * lambda)) {
            // ellipse condition 4ac - b^2 > 0
            let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
            if cond > 0.0 {
                best = Some(v);
                break;
            }
        }
    }
    let a1 = best?;
    let a2 = t * a1;
    Some([a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]])
}

/// Real roots of the characteristic polynomial of a 3x3 matrix,
/// polished by Newton iteration.
fn real_eigenvalues_3x3(m: &Matrix3<f64>) -> Vec<f64> {
    // det(M - x I) = -x^3 + c2 x^2 + c1 x + c0
    let tr = m.trace();
    let tr2 = (m * m).trace();
    let det = m.determinant();
    // characteristic poly: x^3 - tr x^2 + p x - det, p = (tr^2 - tr(M^2))/2
    let p = (tr * tr - tr2) / 2.0;
    let poly = |x: f64| x * x * x - tr * x * x + p * x - det;
    let dpoly = |x: f64| 3.0 * x * x - 2.0 * tr * x + p;
    // scan for sign changes over a bracket based on matrix norm
    let bound = m.norm() * 2.0 + 1.0;
    let steps = 2000;
    let mut roots = Vec::new();
    let mut prev_x = -bound;
    let mut prev_f = poly(prev_x);
    for i in 1..=steps {
        let x = -bound + 2.0 * bound * i as f64 / steps as f64;
        let f = poly(x);
        if prev_f == 0.0 {
            roots.push(prev_x);
        } else if prev_f * f < 0.0 {
            // bisect + Newton polish
            let (mut lo, mut hi) = (prev_x, x);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if poly(lo) * poly(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut r = 0.5 * (lo + hi);
            for _ in 0..5 {
                let d = dpoly(r);
                if d.abs() > 1e-300 {
                    r -= poly(r) / d;
                }
            }
            roots.push(r);
        }
        prev_x = x;
        prev_f = f;
    }
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * bound);
    roots
}

/// Unit null vector of a (near-)singular 3x3 matrix via the largest row
/// cross product.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r0: Vector3<f64> = m.row(0).transpose();
    let r1: Vector3<f64> = m.row(1).transpose();
    let r2: Vector3<f64> = m.row(2).transpose();
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))?;
    if best.norm() < 1e-14 {
        return None;
    }
    Some(best.normalize())
}

fn conic_to_ellipse(c: &[f64; 6]) -> Option<Ellipse2> {
    let [a, b, cc, d, e, f] = *c;
    let disc = 4.0 * a * cc - b * b;
    if disc <= 0.0 {
        return None;
    }
    let cx = (b * e - 2.0 * cc * d) / disc;
    let cy = (b * d - 2.0 * a * e) / disc;
    // constant after recentering
    let f0 = f + a * cx * cx + b * cx * cy + cc * cy * cy + d * cx + e * cy;
    if f0 == 0.0 {
        return None;
    }
    // normalize so that quadratic form = -f0 -> x^T Q x = 1
    let qa = -a / f0;
    let qb = -b / (2.0 * f0);
    let qc = -cc / f0;
    // eigen of [[qa qb][qb qc]]
    let tr = qa + qc;
    let det = qa * qc - qb * qb;
    if det <= 0.0 {
        return None;
    }
    let disc2 = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc2; // larger eigenvalue -> minor axis
    let l2 = tr / 2.0 - disc2;
    if l1 <= 0.0 || l2 <= 0.0 {
        return None;
    }
    let a_semi = 1.0 / l2.sqrt();
    let b_semi = 1.0 / l1.sqrt();
    // angle of the eigenvector belonging to the smaller eigenvalue (major axis)
    let theta = if qb.abs() < 1e-15 && (qa - qc).abs() < 1e-15 {
        0.0
    } else {
        let mut t = 0.5 * (2.0 * qb).atan2(qa - qc);
        // map to (-pi/2, pi/2]
        if t <= -std::f64::consts::FRAC_PI_2 {
            t += std::f64::consts::PI;
        } else if t > std::f64::consts::FRAC_PI_2 {
            t -= std::f64::consts::PI;
        }
        t
    };
    // the atan2 half-angle gives the axis of the larger |qa-qc| direction;
    // check which semi-axis lies along theta and swap if needed
    let (ct, st) = (theta.cos(), theta.sin());
    let along = qa * ct * ct + 2.0 * qb * ct * st + qc * st * st;
    let (a_semi, b_semi, theta) = if (along - l2).abs() <= (along - l1).abs() {
        (a_semi, b_semi, theta)
    } else {
        let mut t = theta + std::f64::consts::FRAC_PI_2;
        if t > std::f64::consts::FRAC_PI_2 {
            t -= std::f64::consts::PI;
        }
        (a_semi, b_semi, t)
    };
    Some(Ellipse2 {
        cx,
        cy,
        a: a_semi,
        b: b_semi,
        theta,
    })
}

/// Least-squares (Kasa) circle fit; returns (cx, cy, r).
fn circle_fit(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let z = x * x + y * y;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        sxz += x * z;
        syz += y * z;
        sz += z;
    }
    let m = Matrix3::new(sxx, sxy, sx, sxy, syy, sy, sx, sy, n);
    let rhs = Vector3::new(sxz, syz, sz);
    let sol = m.try_inverse()? * rhs;
    let cx = sol[0] / 2.0;
    let cy = sol[1] / 2.0;
    let r2 = sol[2] + cx * cx + cy * cy;
    if r2 <= 0.0 {
        return None;
    }
    Some((cx, cy, r2.sqrt()))
}

/// Project points onto a plane and fit the BMO ellipse in the given basis.
pub fn fit_bmo_ellipse_in_basis(
    points: &[Point3<f64>],
    origin: &Point3<f64>,
    u: &Vector3<f64>,
    v: &Vector3<f64>,
) -> Result<BmoEllipse, FrameError> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let d = p - origin;
            (d.dot(u), d.dot(v))
        })
        .collect();
    let e = fit_ellipse_2d(&xy)?;
    Ok(BmoEllipse {
        center: origin + u * e.cx + v * e.cy,
        a: e.a,
        b: e.b,
        theta: e.theta,
    })
}

/// Fit the BMO ellipse using a deterministic basis derived from the plane.
pub fn fit_bmo_ellipse(
    points: &[Point3<f64>],
    plane: &(Point3<f64>, Vector3<f64>),
) -> Result<BmoEllipse, FrameError> {
    let (centroid, normal) = plane;
    let (u, v) = plane_basis(normal);
    fit_bmo_ellipse_in_basis(points, centroid, &u, &v)
}

/// In-plane axes for a given anterior-oriented plane normal: superior from
/// the scan +y direction projected into the plane, nasal completing the
/// basis, mirrored for left eyes.
pub fn frame_axes(normal: &Vector3<f64>, laterality: Laterality) -> (Vector3<f64>, Vector3<f64>) {
    let ey = Vector3::y();
    let proj = ey - normal * ey.dot(normal);
    let axis_superior = if proj.norm() > 1e-9 {
        proj.normalize()
    } else {
        // plane perpendicular to y: fall back to +x projected
        let ex = Vector3::x();
        (ex - normal * ex.dot(normal)).normalize()
    };
    let mut axis_nasal = axis_superior.cross(normal);
    if laterality == Laterality::Left {
        axis_nasal = -axis_nasal;
    }
    (axis_nasal, axis_superior)
}

/// Construct the normalized ONH frame of a volume.
pub fn build_frame(volume: &LabelVolume) -> Result<OnhFrame, FrameError> {
    let (centroid, normal) = fit_bmo_plane(&volume.bmo_points)?;
    let (axis_nasal, axis_superior) = frame_axes(&normal, volume.laterality);
    let ellipse = fit_bmo_ellipse_in_basis(&volume.bmo_points, &centroid, &axis_nasal, &axis_superior)?;
    let bmo_radius = (ellipse.a * ellipse.b).sqrt();
    let bmo_area = std::f64::consts::PI * ellipse.a * ellipse.b / 1e6;
    Ok(OnhFrame {
        bmo_center: ellipse.center,
        bmo_normal: normal,
        axis_nasal,
        axis_superior,
        bmo_radius,
        bmo_area,
        ellipse,
    })
}

impl OnhFrame {
    /// Rigid transform into the normalized frame:
    /// (nasal, superior, axial) coordinates relative to the BMO center.
    /// The axial coordinate is positive toward the anterior side.
    #[inline]
    pub fn to_normalized(&self, p: &Point3<f64>) -> Point3<f64> {
        let d = p - self.bmo_center;
        Point3::new(
            d.dot(&self.axis_nasal),
            d.dot(&self.axis_superior),
            d.dot(&self.bmo_normal),
        )
    }

    /// Inverse of `to_normalized`.
    #[inline]
    pub fn from_normalized(&self, p: &Point3<f64>) -> Point3<f64> {
        self.bmo_center + self.axis_nasal * p.x + self.axis_superior * p.y + self.bmo_normal * p.z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coplanar_points_give_axial_normal() {
        let pts: Vec<_> = (0..6)
            .map(|i| {
                let t = i as f64 / 6.0 * std::f64::consts::TAU;
                Point3::new(800.0 * t.cos() + 2000.0, 800.0 * t.sin() + 2000.0, 100.0)
            })
            .collect();
        let (c, n) = fit_bmo_plane(&pts).unwrap();
        assert_abs_diff_eq!(c.z, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.x.abs(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.y.abs(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.z, -1.0, epsilon = 1e-9); // anterior orientation
    }

    #[test]
    fn symmetric_perturbations_cancel() {
        // +5 um on one diameter pair, -5 um on the orthogonal pair: the
        // z-cross moments of the scatter stay zero, so the fitted plane is
        // the unperturbed one.
        let mut pts: Vec<_> = (0..8)
            .map(|i| {
                let t = i as f64 / 8.0 * std::f64::consts::TAU;
                Point3::new(800.0 * t.cos(), 800.0 * t.sin(), 500.0)
            })
            .collect();
        pts[0].z += 5.0;
        pts[4].z += 5.0;
        pts[2].z -= 5.0;
        pts[6].z -= 5.0;
        let (c, n) = fit_bmo_plane(&pts).unwrap();
        assert_abs_diff_eq!(c.z, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(n.z, -1.0, epsilon = 1e-9);
    }

    /// Independent full-scatter eigen-decomposition oracle using Jacobi
    /// rotations, no shared code with the implementation path.
    fn jacobi_smallest_eigvec(mut a: [[f64; 3]; 3]) -> [f64; 3] {
        let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..100 {
            // largest off-diagonal
            let (mut p, mut q, mut mx) = (0, 1, 0.0f64);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    if a[i][j].abs() > mx {
                        mx = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if mx < 1e-14 {
                break;
            }
            let app = a[p][p];
            let aqq = a[q][q];
            let apq = a[p][q];
            let phi = 0.5 * (2.0 * apq).atan2(aqq - app);
            let (c, s) = (phi.cos(), phi.sin());
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
        let mut idx = 0;
        for i in 1..3 {
            if a[i][i] < a[idx][idx] {
                idx = i;
            }
        }
        [v[0][idx], v[1][idx], v[2][idx]]
    }

    #[test]
    fn plane_fit_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let tilt = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                -1.0,
            )
            .normalize();
            let (u, v) = plane_basis(&tilt);
            let pts: Vec<_> = (0..20)
                .map(|_| {
                    let r = rng.gen_range(400.0..900.0);
                    let t = rng.gen_range(0.0..std::f64::consts::TAU);
                    let noise = rng.gen_range(-8.0..8.0);
                    Point3::from(
                        Vector3::new(2000.0, 2000.0, 900.0)
                            + u * (r * t.cos())
                            + v * (r * t.sin())
                            + tilt * noise,
                    )
                })
                .collect();
            let (c, n) = fit_bmo_plane(&pts).unwrap();
            // oracle scatter
            let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / 20.0;
            let mut s = [[0.0f64; 3]; 3];
            for p in &pts {
                let d = p.coords - mean;
                for i in 0..3 {
                    for j in 0..3 {
                        s[i][j] += d[i] * d[j];
                    }
                }
            }
            let ev = jacobi_smallest_eigvec(s);
            let oracle = Vector3::new(ev[0], ev[1], ev[2]).normalize();
            let dot = n.dot(&oracle).abs();
            assert!(dot > 1.0 - 1e-9, "normal mismatch: |dot|={dot}");
            assert_abs_diff_eq!(c.coords.norm(), mean.norm(), epsilon = 1e-6);
        }
    }

    #[test]
    fn collinear_points_rejected() {
        let pts: Vec<_> = (0..6)
            .map(|i| Point3::new(i as f64 * 10.0, 0.0, 0.0))
            .collect();
        assert!(matches!(
            fit_bmo_plane(&pts),
            Err(FrameError::DegenerateCollinear)
        ));
    }

    fn circle_points(n: usize, r: f64, z: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                Point3::new(r * t.cos() + 2200.0, r * t.sin() + 1450.0, z)
            })
            .collect()
    }

    #[test]
    fn exact_circle_recovered() {
        let pts = circle_points(8, 800.0, 960.0);
        let plane = fit_bmo_plane(&pts).unwrap();
        let e = fit_bmo_ellipse(&pts, &plane).unwrap();
        assert_relative_eq!(e.a, 800.0, epsilon = 1e-6);
        assert_relative_eq!(e.b, 800.0, epsilon = 1e-6);
        let area_mm2 = std::f64::consts::PI * e.a * e.b / 1e6;
        assert_relative_eq!(area_mm2, std::f64::consts::PI * 0.64, epsilon = 1e-9);
    }

    #[test]
    fn exact_ellipse_recovered() {
        let (a, b) = (900.0, 760.0);
        let pts: Vec<_> = (0..8)
            .map(|i| {
                let t = i as f64 / 8.0 * std::f64::consts::TAU + 0.1;
                Point3::new(a * t.cos() + 2000.0, b * t.sin() + 2000.0, 500.0)
            })
            .collect();
        let plane = fit_bmo_plane(&pts).unwrap();
        let e = fit_bmo_ellipse(&pts, &plane).unwrap();
        assert_relative_eq!(e.a, 900.0, epsilon = 1e-6);
        assert_relative_eq!(e.b, 760.0, epsilon = 1e-6);
        let area_mm2 = std::f64::consts::PI * e.a * e.b / 1e6;
        assert_relative_eq!(area_mm2, 2.148849, epsilon = 1e-4);
    }

    /// Nelder-Mead refit of (cx, cy, a, b, theta) minimizing the algebraic
    /// ellipse residual; independent of the direct conic path.
    fn nelder_mead_ellipse(xy: &[(f64, f64)]) -> Ellipse2 {
        let n = xy.len() as f64;
        let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
        let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
        let vx = xy.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
        let vy = xy.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n;
        let cost = |p: &[f64; 5]| -> f64 {
            let (ct, st) = (p[4].cos(), p[4].sin());
            xy.iter()
                .map(|&(x, y)| {
                    let dx = x - p[0];
                    let dy = y - p[1];
                    let u = ct * dx + st * dy;
                    let v = -st * dx + ct * dy;
                    let r = (u / p[2]).powi(2) + (v / p[3]).powi(2);
                    (r.sqrt() - 1.0).powi(2)
                })
                .sum()
        };
        let mut simplex: Vec<[f64; 5]> = Vec::new();
        let init = [mx, my, (2.0 * vx).sqrt(), (2.0 * vy).sqrt(), 0.0];
        simplex.push(init);
        for i in 0..5 {
            let mut p = init;
            p[i] += if i == 4 { 0.2 } else { init[i].abs() * 0.1 + 10.0 };
            simplex.push(p);
        }
        for _ in 0..4000 {
            simplex.sort_by(|a, b| cost(a).total_cmp(&cost(b)));
            let worst = simplex[5];
            let mut centroid = [0.0; 5];
            for p in simplex.iter().take(5) {
                for i in 0..5 {
                    centroid[i] += p[i] / 5.0;
                }
            }
            let mut refl = [0.0; 5];
            for i in 0..5 {
                refl[i] = centroid[i] + (centroid[i] - worst[i]);
            }
            if cost(&refl) < cost(&simplex[0]) {
                let mut exp = [0.0; 5];
                for i in 0..5 {
                    exp[i] = centroid[i] + 2.0 * (centroid[i] - worst[i]);
                }
                simplex[5] = if cost(&exp) < cost(&refl) { exp } else { refl };
            } else if cost(&refl) < cost(&simplex[4]) {
                simplex[5] = refl;
            } else {
                let mut con = [0.0; 5];
                for i in 0..5 {
                    con[i] = centroid[i] - 0.5 * (centroid[i] - worst[i]);
                }
                if cost(&con) < cost(&worst) {
                    simplex[5] = con;
                } else {
                    let best = simplex[0];
                    for p in simplex.iter_mut().skip(1) {
                        for i in 0..5 {
                            p[i] = best[i] + 0.5 * (p[i] - best[i]);
                        }
                    }
                }
            }
        }
        simplex.sort_by(|a, b| cost(a).total_cmp(&cost(b)));
        let p = simplex[0];
        let (a, b) = (p[2].abs().max(p[3].abs()), p[2].abs().min(p[3].abs()));
        Ellipse2 {
            cx: p[0],
            cy: p[1],
            a,
            b,
            theta: p[4],
        }
    }

    #[test]
    fn noisy_ellipse_matches_nonlinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a0, b0) = (900.0, 700.0);
        let xy: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0 * std::f64::consts::TAU;
                let x = a0 * t.cos();
                let y = b0 * t.sin();
                let (c, s) = (th0_cos_sin().0, th0_cos_sin().1);
                (
                    c * x - s * y + rng.gen_range(-10.0..10.0),
                    s * x + c * y + rng.gen_range(-10.0..10.0),
                )
            })
            .collect();
        fn th0_cos_sin() -> (f64, f64) {
            (0.4f64.cos(), 0.4f64.sin())
        }
        let direct = fit_ellipse_2d(&xy).unwrap();
        let oracle = nelder_mead_ellipse(&xy);
        assert!((direct.a - oracle.a).abs() / oracle.a < 0.01);
        assert!((direct.b - oracle.b).abs() / oracle.b < 0.01);
        assert!((direct.cx - oracle.cx).abs() < 0.01 * a0);
        assert!((direct.cy - oracle.cy).abs() < 0.01 * a0);
    }

    #[test]
    fn ellipse_area_rotation_invariant() {
        let (a0, b0) = (850.0, 650.0);
        let base: Vec<(f64, f64)> = (0..16)
            .map(|i| {
                let t = i as f64 / 16.0 * std::f64::consts::TAU + 0.05;
                (a0 * t.cos(), b0 * t.sin())
            })
            .collect();
        let e0 = fit_ellipse_2d(&base).unwrap();
        for rot in [0.3, 1.1, 2.4] {
            let (c, s) = (f64::cos(rot), f64::sin(rot));
            let rotated: Vec<(f64, f64)> = base
                .iter()
                .map(|&(x, y)| (c * x - s * y, s * x + c * y))
                .collect();
            let e = fit_ellipse_2d(&rotated).unwrap();
            assert_relative_eq!(e.a * e.b, e0.a * e0.b, epsilon = 1e-9 * e0.a * e0.b);
        }
    }

    #[test]
    fn plane_fit_rigid_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<_> = (0..15)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.0..1000.0),
                    rng.gen_range(0.0..1000.0),
                    500.0 + rng.gen_range(-20.0..20.0),
                )
            })
            .collect();
        let (c0, n0) = fit_bmo_plane(&pts).unwrap();
        // rigid motion: rotation about z by 0.7 plus translation
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.7);
        let t = Vector3::new(100.0, -50.0, 30.0);
        let moved: Vec<_> = pts.iter().map(|p| rot * p + t).collect();
        let (c1, n1) = fit_bmo_plane(&moved).unwrap();
        let c_expect = rot * c0 + t;
        assert_abs_diff_eq!((c1 - c_expect).norm(), 0.0, epsilon = 1e-9);
        let n_expect = rot * n0;
        assert!(n1.dot(&n_expect).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn normalized_frame_properties() {
        use crate::volume::{LabelVolume, SubjectMeta};
        let bmo = circle_points(12, 800.0, 960.0);
        let mk = |lat| LabelVolume {
            nx: 384,
            ny: 97,
            nz: 496,
            dx: 11.5,
            dy: 30.0,
            dz: 3.87,
            voxels: vec![0; 384 * 97 * 496],
            bmo_points: bmo.clone(),
            laterality: lat,
            subject_meta: Some(SubjectMeta::default()),
        };
        let frame = build_frame(&mk(Laterality::Right)).unwrap();
        // bmo center maps to origin
        let o = frame.to_normalized(&frame.bmo_center);
        assert_abs_diff_eq!(o.coords.norm(), 0.0, epsilon = 1e-9);
        // isometry
        let p = Point3::new(100.0, 200.0, 300.0);
        let q = Point3::new(160.0, 280.0, 300.0);
        let d0 = (p - q).norm();
        let d1 = (frame.to_normalized(&p) - frame.to_normalized(&q)).norm();
        assert_abs_diff_eq!(d0, d1, epsilon = 1e-9);
        // a BMO point lies on the plane: z ~ 0
        let z = frame.to_normalized(&bmo[3]).z;
        assert_abs_diff_eq!(z, 0.0, epsilon = 1e-6);
        // radius and area relationship
        assert_relative_eq!(frame.bmo_radius, 800.0, epsilon = 1e-6);
        assert_relative_eq!(
            frame.bmo_area,
            std::f64::consts::PI * frame.ellipse.a * frame.ellipse.b / 1e6,
            epsilon = 1e-9
        );
        // left/right differ only by nasal axis sign
        let left = build_frame(&mk(Laterality::Left)).unwrap();
        assert_abs_diff_eq!((left.axis_nasal + frame.axis_nasal).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            (left.axis_superior - frame.axis_superior).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!((left.bmo_normal - frame.bmo_normal).norm(), 0.0, epsilon = 1e-12);
        // orthonormal basis
        assert_abs_diff_eq!(frame.axis_nasal.dot(&frame.axis_superior), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(frame.axis_nasal.dot(&frame.bmo_normal), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(frame.axis_nasal.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn round_trip_normalization() {
        let pts = circle_points(10, 750.0, 800.0);
        let plane = fit_bmo_plane(&pts).unwrap();
        let e = fit_bmo_ellipse(&pts, &plane).unwrap();
        let frame = OnhFrame {
            bmo_center: e.center,
            bmo_normal: plane.1,
            axis_nasal: plane_basis(&plane.1).0,
            axis_superior: plane_basis(&plane.1).1,
            bmo_radius: (e.a * e.b).sqrt(),
            bmo_area: std::f64::consts::PI * e.a * e.b / 1e6,
            ellipse: e,
        };
        let p = Point3::new(123.0, 456.0, 789.0);
        let back = frame.from_normalized(&frame.to_normalized(&p));
        assert_abs_diff_eq!((back - p).norm(), 0.0, epsilon = 1e-9);
    }
}
