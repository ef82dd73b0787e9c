//! Parametric ONH phantom: a layered retina/choroid/sclera stack in a
//! tilted canal-centered frame, with a cosine-blend cup, a paraboloid
//! lamina cribrosa and a peripapillary scleral V. Every structural
//! parameter of the generated volume has analytic (or deterministically
//! minimized) ground truth, which makes the phantom the oracle for the
//! extraction pipeline.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::frame_axes;
use crate::params::OnhParameters;
use crate::surfaces::Octant;
use crate::volume::{LabelVolume, Laterality, SeverityGroup, SubjectMeta, TissueLabel};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom configuration: {0}")]
    InvalidConfig(String),
    #[error("inconsistent layer geometry: {0}")]
    InconsistentLayers(String),
    #[error("geometry does not fit in the volume: {0}")]
    OutOfVolume(String),
}

/// Full description of one phantom eye. Lengths in micrometers, angles in
/// degrees. The canal frame is tilted about the scan y axis by `tilt_deg`;
/// Bruch's membrane lies at height 0 of that frame with posterior
/// heights positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub laterality: Laterality,
    /// BMO semi-axis along the nasal direction.
    pub bmo_a_um: f64,
    /// BMO semi-axis along the superior direction.
    pub bmo_b_um: f64,
    pub tilt_deg: f64,
    /// Canal-center depth as a fraction of the axial extent.
    pub plane_depth_frac: f64,
    /// Peripheral RNFL thickness t(theta) = base + delta * sin(theta),
    /// theta measured from the temporal axis (superior thickest).
    pub rnfl_base_um: f64,
    pub rnfl_delta_um: f64,
    pub gcl_um: f64,
    pub orl_um: f64,
    pub rpe_um: f64,
    pub choroid_um: f64,
    pub sclera_um: f64,
    /// Cup apex depth below the BMO plane (the prelaminar depth).
    pub pld_um: f64,
    /// Anterior LC depth below the BMO plane at the canal axis.
    pub lcd_um: f64,
    pub lc_thickness_um: f64,
    /// LC radii of curvature along the nasal and superior axes.
    pub lc_radius_nasal_um: f64,
    pub lc_radius_superior_um: f64,
    /// Total scleral opening angle; each side slopes by half of it.
    pub ppsa_deg: f64,
    /// Per-column Gaussian jitter applied to all layer boundaries.
    pub noise_sigma_um: f64,
    pub n_bmo_points: usize,
    pub seed: u64,
    pub subject: Option<SubjectMeta>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            nx: 384,
            ny: 97,
            nz: 496,
            dx: 4800.0 / 384.0,
            dy: 4800.0 / 97.0,
            dz: 3.87,
            laterality: Laterality::Right,
            bmo_a_um: 800.0,
            bmo_b_um: 800.0,
            tilt_deg: 0.0,
            // anterior of center: the posterior stack (LC + scleral cone)
            // is much deeper than the inner retina is tall
            plane_depth_frac: 0.35,
            rnfl_base_um: 110.0,
            rnfl_delta_um: 15.0,
            gcl_um: 70.0,
            orl_um: 80.0,
            rpe_um: 30.0,
            choroid_um: 180.0,
            sclera_um: 500.0,
            pld_um: 350.0,
            lcd_um: 450.0,
            lc_thickness_um: 250.0,
            lc_radius_nasal_um: 3000.0,
            lc_radius_superior_um: 3000.0,
            ppsa_deg: 6.0,
            noise_sigma_um: 0.0,
            n_bmo_points: 24,
            seed: 0,
            subject: None,
        }
    }
}

impl PhantomConfig {
    /// Same physical extent on a coarser scan grid; useful to keep large
    /// cohorts cheap.
    pub fn with_scan_grid(mut self, nx: usize, ny: usize, nz: usize) -> Self {
        self.dx = self.dx * self.nx as f64 / nx as f64;
        self.dy = self.dy * self.ny as f64 / ny as f64;
        self.dz = self.dz * self.nz as f64 / nz as f64;
        self.nx = nx;
        self.ny = ny;
        self.nz = nz;
        self
    }

    fn bmo_radius(&self) -> f64 {
        (self.bmo_a_um * self.bmo_b_um).sqrt()
    }

    fn canal_center(&self) -> Point3<f64> {
        Point3::new(
            self.nx as f64 * self.dx / 2.0,
            self.ny as f64 * self.dy / 2.0,
            self.plane_depth_frac * self.nz as f64 * self.dz,
        )
    }

    /// Posterior plane normal (unit), canal axes in scan coordinates.
    fn frame_vectors(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let tau = self.tilt_deg.to_radians();
        let n_post = Vector3::new(tau.sin(), 0.0, tau.cos());
        let (nasal, superior) = frame_axes(&(-n_post), self.laterality);
        (n_post, nasal, superior)
    }

    /// Peripheral RNFL thickness at canal angle theta (radians from the
    /// temporal axis).
    fn rnfl_at(&self, theta: f64) -> f64 {
        self.rnfl_base_um + self.rnfl_delta_um * theta.sin()
    }

    /// Peripheral ILM height (negative: anterior of Bruch's membrane).
    fn ilm_peripheral(&self, theta: f64) -> f64 {
        -(self.rnfl_at(theta) + self.gcl_um + self.orl_um + self.rpe_um)
    }

    /// Cup ILM height as a function of in-plane position; C1 at the rim.
    fn ilm_cup(&self, x: f64, y: f64) -> f64 {
        let eps = ((x / self.bmo_a_um).powi(2) + (y / self.bmo_b_um).powi(2)).sqrt();
        let theta = y.atan2(-x);
        let w_per = self.ilm_peripheral(theta);
        if eps >= 1.0 {
            w_per
        } else {
            w_per + (self.pld_um - w_per) * (1.0 + (PI * eps).cos()) / 2.0
        }
    }

    /// Anterior LC height: a posteriorly bowed elliptic paraboloid.
    fn lc_anterior(&self, x: f64, y: f64) -> f64 {
        self.lcd_um
            - x * x / (2.0 * self.lc_radius_nasal_um)
            - y * y / (2.0 * self.lc_radius_superior_um)
    }

    /// Elliptical radius of the BMO boundary along canal angle theta.
    fn bmo_boundary_radius(&self, theta: f64) -> f64 {
        let (c, s) = (theta.cos(), theta.sin());
        1.0 / ((c / self.bmo_a_um).powi(2) + (s / self.bmo_b_um).powi(2)).sqrt()
    }

    /// Anterior sclera height: flat at the choroid base, rising as a cone
    /// beyond the BMO boundary (half the scleral opening angle per side).
    fn sclera_anterior(&self, x: f64, y: f64) -> f64 {
        let beta = (self.ppsa_deg / 2.0).to_radians();
        let rho = x.hypot(y);
        let r_bmo = self.bmo_boundary_radius(y.atan2(-x));
        self.choroid_um + beta.tan() * (rho - r_bmo).max(0.0)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.nx < 8 || self.ny < 8 || self.nz < 8 {
            return Err(PhantomError::InvalidConfig("grid too small".into()));
        }
        if self.dx <= 0.0 || self.dy <= 0.0 || self.dz <= 0.0 {
            return Err(PhantomError::InvalidConfig("non-positive spacing".into()));
        }
        if self.bmo_a_um <= 0.0 || self.bmo_b_um <= 0.0 {
            return Err(PhantomError::InvalidConfig("non-positive BMO axis".into()));
        }
        // negative delta means a superiorly thinned (inferiorly spared)
        // profile; only the magnitude is bounded by the base thickness
        if self.rnfl_delta_um.abs() >= self.rnfl_base_um {
            return Err(PhantomError::InvalidConfig(
                "|rnfl_delta_um| must be below rnfl_base_um".into(),
            ));
        }
        for (name, v) in [
            ("gcl_um", self.gcl_um),
            ("orl_um", self.orl_um),
            ("rpe_um", self.rpe_um),
            ("choroid_um", self.choroid_um),
            ("sclera_um", self.sclera_um),
            ("lc_thickness_um", self.lc_thickness_um),
            ("lc_radius_nasal_um", self.lc_radius_nasal_um),
            ("lc_radius_superior_um", self.lc_radius_superior_um),
        ] {
            if v <= 0.0 {
                return Err(PhantomError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_bmo_points < 5 {
            return Err(PhantomError::InvalidConfig("need at least 5 BMO points".into()));
        }
        if self.ppsa_deg < 0.0 || self.ppsa_deg >= 60.0 {
            return Err(PhantomError::InvalidConfig("ppsa_deg out of range".into()));
        }
        if self.pld_um >= self.lcd_um {
            return Err(PhantomError::InconsistentLayers(
                "cup apex must stay anterior of the LC".into(),
            ));
        }
        // the cup must clear the LC with at least one voxel of prelaminar
        // tissue everywhere in the canal
        let mut min_gap = f64::INFINITY;
        for i in 0..48 {
            for j in 0..48 {
                let x = (i as f64 / 47.0 * 2.0 - 1.0) * self.bmo_a_um;
                let y = (j as f64 / 47.0 * 2.0 - 1.0) * self.bmo_b_um;
                let eps2 = (x / self.bmo_a_um).powi(2) + (y / self.bmo_b_um).powi(2);
                if eps2 >= 1.0 {
                    continue;
                }
                min_gap = min_gap.min(self.lc_anterior(x, y) - self.ilm_cup(x, y));
            }
        }
        if min_gap < self.dz {
            return Err(PhantomError::InconsistentLayers(format!(
                "prelaminar gap {min_gap:.1} um is below one axial spacing"
            )));
        }
        // the measurement annulus (out to 2.5 BMO radii) must fit
        // laterally and axially, with jitter margin
        let r_out = 2.6 * self.bmo_radius();
        let c = self.canal_center();
        if r_out > c.x || r_out > c.y {
            return Err(PhantomError::OutOfVolume(
                "measurement annulus exceeds the lateral extent".into(),
            ));
        }
        let (n_post, nasal, superior) = self.frame_vectors();
        let margin = 5.0 * self.noise_sigma_um + self.dz;
        let zmax = self.nz as f64 * self.dz;
        for k in 0..16 {
            let theta = k as f64 * PI / 8.0;
            for rho in [0.0, 0.7 * r_out, r_out] {
                let (x, y) = (-rho * theta.cos(), rho * theta.sin());
                let w_lo = self.ilm_cup(x, y).min(self.ilm_peripheral(theta));
                let w_hi = (self.sclera_anterior(x, y) + self.sclera_um)
                    .max(self.lc_anterior(x, y) + self.lc_thickness_um);
                for w in [w_lo, w_hi] {
                    let z = c.z + x * nasal.z + y * superior.z + w * n_post.z;
                    let (px, py) = (
                        c.x + x * nasal.x + y * superior.x + w * n_post.x,
                        c.y + x * nasal.y + y * superior.y + w * n_post.y,
                    );
                    let inside_lat = px >= 0.0
                        && px < self.nx as f64 * self.dx
                        && py >= 0.0
                        && py < self.ny as f64 * self.dy;
                    if inside_lat && (z < margin || z > zmax - margin) {
                        return Err(PhantomError::OutOfVolume(format!(
                            "layer stack leaves the axial range at rho {rho:.0} um"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Label for one point of the canal frame (x nasal, y superior, w
/// posterior-positive height over Bruch's membrane).
fn label_of(cfg: &PhantomConfig, x: f64, y: f64, w: f64) -> TissueLabel {
    let eps2 = (x / cfg.bmo_a_um).powi(2) + (y / cfg.bmo_b_um).powi(2);
    if eps2 < 1.0 {
        let w_cup = cfg.ilm_cup(x, y);
        let w_lc = cfg.lc_anterior(x, y);
        if w >= w_cup && w < w_lc {
            TissueLabel::RnflPlt
        } else if w >= w_lc && w < w_lc + cfg.lc_thickness_um {
            TissueLabel::Lc
        } else {
            TissueLabel::Background
        }
    } else {
        // quick rejects before any trigonometry
        let deepest_ilm =
            -(cfg.rnfl_base_um + cfg.rnfl_delta_um.abs() + cfg.gcl_um + cfg.orl_um + cfg.rpe_um);
        if w < deepest_ilm {
            return TissueLabel::Background;
        }
        if w < 0.0 {
            let theta = y.atan2(-x);
            let w_ilm = cfg.ilm_peripheral(theta);
            if w < w_ilm {
                TissueLabel::Background
            } else if w < w_ilm + cfg.rnfl_at(theta) {
                TissueLabel::RnflPlt
            } else if w < -(cfg.orl_um + cfg.rpe_um) {
                TissueLabel::GclIpl
            } else if w < -cfg.rpe_um {
                TissueLabel::Orl
            } else {
                TissueLabel::RpeBm
            }
        } else {
            let w_scl = cfg.sclera_anterior(x, y);
            if w < w_scl {
                TissueLabel::Choroid
            } else if w < w_scl + cfg.sclera_um {
                TissueLabel::Sclera
            } else {
                TissueLabel::Background
            }
        }
    }
}

/// Rasterize the phantom into a label volume.
pub fn generate(cfg: &PhantomConfig) -> Result<LabelVolume, PhantomError> {
    cfg.validate()?;
    let (nx, ny, nz) = (cfg.nx, cfg.ny, cfg.nz);
    let c = cfg.canal_center();
    let (n_post, nasal, superior) = cfg.frame_vectors();

    // deterministic per-column boundary jitter
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter: Vec<f64> = if cfg.noise_sigma_um > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma_um).expect("positive sigma");
        (0..nx * ny).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; nx * ny]
    };

    let mut voxels = vec![0u8; nx * ny * nz];
    let fill_slab = |iz: usize, slab: &mut [u8]| {
        let pz = (iz as f64 + 0.5) * cfg.dz - c.z;
        for iy in 0..ny {
            let py = (iy as f64 + 0.5) * cfg.dy - c.y;
            for ix in 0..nx {
                let px = (ix as f64 + 0.5) * cfg.dx - c.x;
                let x = px * nasal.x + py * nasal.y + pz * nasal.z;
                let y = px * superior.x + py * superior.y + pz * superior.z;
                let w = px * n_post.x + py * n_post.y + pz * n_post.z - jitter[ix + nx * iy];
                slab[ix + nx * iy] = label_of(cfg, x, y, w) as u8;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        voxels
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(iz, slab)| fill_slab(iz, slab));
    }
    #[cfg(not(feature = "parallel"))]
    for (iz, slab) in voxels.chunks_mut(nx * ny).enumerate() {
        fill_slab(iz, slab);
    }

    let bmo_points = (0..cfg.n_bmo_points)
        .map(|k| {
            let theta = k as f64 * 2.0 * PI / cfg.n_bmo_points as f64;
            let (x, y) = (-cfg.bmo_a_um * theta.cos(), cfg.bmo_b_um * theta.sin());
            c + x * nasal + y * superior
        })
        .collect();

    Ok(LabelVolume {
        nx,
        ny,
        nz,
        dx: cfg.dx,
        dy: cfg.dy,
        dz: cfg.dz,
        voxels,
        bmo_points,
        laterality: cfg.laterality,
        subject_meta: cfg.subject.clone(),
    })
}

// ---- deterministic ground-truth minimization ------------------------------

/// Minimum of f over an n x n grid, refined by four shrinking 17 x 17
/// local grids; deterministic and derivative-free.
fn grid_refine_min(
    f: &dyn Fn(f64, f64) -> f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    n: usize,
) -> f64 {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (x1 - x0) * i as f64 / (n - 1) as f64;
            let y = y0 + (y1 - y0) * j as f64 / (n - 1) as f64;
            let v = f(x, y);
            if v < best.0 {
                best = (v, x, y);
            }
        }
    }
    let (mut hx, mut hy) = ((x1 - x0) / (n - 1) as f64, (y1 - y0) / (n - 1) as f64);
    for _ in 0..4 {
        let (bx, by) = (best.1, best.2);
        for i in 0..17 {
            for j in 0..17 {
                let x = bx + hx * (i as f64 - 8.0) / 8.0;
                let y = by + hy * (j as f64 - 8.0) / 8.0;
                let v = f(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        hx /= 5.0;
        hy /= 5.0;
    }
    best.0
}

/// Minimum Euclidean distance from point p (canal-frame coordinates) to
/// the graph w = g(x, y) over the given domain.
fn min_dist_to_graph(
    g: &dyn Fn(f64, f64) -> f64,
    p: (f64, f64, f64),
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    n: usize,
) -> f64 {
    grid_refine_min(
        &|x, y| {
            let w = g(x, y);
            (x - p.0).powi(2) + (y - p.1).powi(2) + (w - p.2).powi(2)
        },
        x0,
        x1,
        y0,
        y1,
        n,
    )
    .sqrt()
}

/// Analytic / deterministically minimized ground truth for every
/// structural parameter of a phantom configuration (noise-free surfaces).
pub fn ground_truth(cfg: &PhantomConfig) -> OnhParameters {
    let mut p = OnhParameters::nan();
    let r = cfg.bmo_radius();
    let ring = 1.5 * r;
    let tau = cfg.tilt_deg.to_radians();

    // octant ring parameters: RNFLT is the exact sector mean of the
    // peripheral profile (flat parallel slab); GCCT adds the GCL run and
    // converts to a columnwise (axial) run through the tilted stack
    for o in Octant::ALL {
        let c = o.center_deg().to_radians();
        let (t1, t2) = (c - PI / 8.0, c + PI / 8.0);
        let rnfl_mean = cfg.rnfl_base_um + cfg.rnfl_delta_um * (t1.cos() - t2.cos()) / (t2 - t1);
        p.rnflt_um[o as usize] = rnfl_mean;
        p.gcct_um[o as usize] = (rnfl_mean + cfg.gcl_um) / tau.cos();
    }

    // ChT: per-degree minimum distance from the flat anterior choroid to
    // the coned posterior boundary, averaged into octants
    let scl = |x: f64, y: f64| cfg.sclera_anterior(x, y);
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    for k in 0..360 {
        let deg = k as f64;
        let thr = deg.to_radians();
        let (x, y) = (-ring * thr.cos(), ring * thr.sin());
        let d = min_dist_to_graph(&scl, (x, y, 0.0), x - 600.0, x + 600.0, y - 600.0, y + 600.0, 41);
        let o = crate::surfaces::octant_of_angle_deg(deg).expect("finite") as usize;
        sums[o] += d;
        counts[o] += 1;
    }
    for i in 0..8 {
        p.cht_um[i] = sums[i] / counts[i] as f64;
    }

    // MRW: per BMO point, minimum distance to the full ILM graph
    let ilm = |x: f64, y: f64| cfg.ilm_cup(x, y);
    let (ex, ey) = (2.5 * cfg.bmo_a_um, 2.5 * cfg.bmo_b_um);
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    for k in 0..cfg.n_bmo_points {
        let theta = k as f64 * 2.0 * PI / cfg.n_bmo_points as f64;
        let (bx, by) = (-cfg.bmo_a_um * theta.cos(), cfg.bmo_b_um * theta.sin());
        let d = min_dist_to_graph(&ilm, (bx, by, 0.0), -ex, ex, -ey, ey, 81);
        let mut deg = by.atan2(-bx).to_degrees();
        if deg < 0.0 {
            deg += 360.0;
        }
        let o = crate::surfaces::octant_of_angle_deg(deg).expect("finite") as usize;
        sums[o] += d;
        counts[o] += 1;
    }
    for i in 0..8 {
        if counts[i] > 0 {
            p.mrw_um[i] = sums[i] / counts[i] as f64;
        }
    }

    // MPT: minimum over cup ILM points of the distance to the anterior LC
    let lc = |x: f64, y: f64| cfg.lc_anterior(x, y);
    let mpt2 = grid_refine_min(
        &|x, y| {
            let eps2 = (x / cfg.bmo_a_um).powi(2) + (y / cfg.bmo_b_um).powi(2);
            if eps2 >= 1.0 {
                return f64::INFINITY;
            }
            let d = min_dist_to_graph(
                &lc,
                (x, y, cfg.ilm_cup(x, y)),
                -1.2 * cfg.bmo_a_um,
                1.2 * cfg.bmo_a_um,
                -1.2 * cfg.bmo_b_um,
                1.2 * cfg.bmo_b_um,
                41,
            );
            d * d
        },
        -cfg.bmo_a_um,
        cfg.bmo_a_um,
        -cfg.bmo_b_um,
        cfg.bmo_b_um,
        41,
    );
    p.mpt_um = mpt2.sqrt();

    p.pld_um = cfg.pld_um;
    p.lcd_um = cfg.lcd_um;
    // GSI from the paraboloid's principal curvatures (posterior-positive)
    let (k1, k2) = {
        let (ka, kb) = (-1.0 / cfg.lc_radius_nasal_um, -1.0 / cfg.lc_radius_superior_um);
        (ka.max(kb), ka.min(kb))
    };
    p.lc_gsi = if (k1 - k2).abs() < 1e-9 * k1.abs().max(k2.abs()) {
        (k1 + k2).signum()
    } else {
        (2.0 / PI) * ((k1 + k2) / (k1 - k2)).atan()
    };
    p.ppsa_deg = cfg.ppsa_deg;
    p.bmoa_mm2 = PI * cfg.bmo_a_um * cfg.bmo_b_um / 1e6;

    let mean = |v: &[f64; 8]| v.iter().sum::<f64>() / 8.0;
    p.rnflt_avg_um = mean(&p.rnflt_um);
    p.mrw_avg_um = mean(&p.mrw_um);
    p.gcct_avg_um = mean(&p.gcct_um);
    p.cht_avg_um = mean(&p.cht_um);
    p
}

/// Generate a phantom together with its ground truth.
pub fn generate_with_truth(cfg: &PhantomConfig) -> Result<(LabelVolume, OnhParameters), PhantomError> {
    let volume = generate(cfg)?;
    Ok((volume, ground_truth(cfg)))
}

// ---- synthetic cohorts ----------------------------------------------------

/// Sizes and shared geometry of a four-group synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_normal: usize,
    pub n_mild: usize,
    pub n_moderate: usize,
    pub n_advanced: usize,
    pub base: PhantomConfig,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_normal: 50,
            n_mild: 50,
            n_moderate: 50,
            n_advanced: 50,
            base: PhantomConfig::default(),
            seed: 7,
        }
    }
}

/// Group-level means of the disease-graded fields; spreads are fixed
/// fractions of the between-group separation.
struct GroupProfile {
    rnfl_base: f64,
    gcl: f64,
    choroid: f64,
    pld: f64,
    lcd: f64,
    lc_radius: f64,
    ppsa: f64,
    md_mean: f64,
    md_sd: f64,
    md_range: (f64, f64),
}

fn group_profile(group: SeverityGroup) -> GroupProfile {
    match group {
        SeverityGroup::Normal => GroupProfile {
            rnfl_base: 115.0,
            gcl: 75.0,
            choroid: 190.0,
            pld: 220.0,
            lcd: 380.0,
            lc_radius: 4000.0,
            ppsa: 4.0,
            md_mean: -0.5,
            md_sd: 1.0,
            md_range: (-2.0, 1.5),
        },
        SeverityGroup::Mild => GroupProfile {
            rnfl_base: 95.0,
            gcl: 68.0,
            choroid: 180.0,
            pld: 320.0,
            lcd: 430.0,
            lc_radius: 3200.0,
            ppsa: 6.0,
            md_mean: -3.35,
            md_sd: 1.3,
            md_range: (-5.9, -0.1),
        },
        SeverityGroup::Moderate => GroupProfile {
            rnfl_base: 75.0,
            gcl: 58.0,
            choroid: 170.0,
            pld: 400.0,
            lcd: 490.0,
            lc_radius: 2600.0,
            ppsa: 9.0,
            md_mean: -8.16,
            md_sd: 1.5,
            md_range: (-11.9, -6.1),
        },
        SeverityGroup::Advanced => GroupProfile {
            rnfl_base: 55.0,
            gcl: 48.0,
            choroid: 150.0,
            pld: 480.0,
            lcd: 560.0,
            lc_radius: 2000.0,
            ppsa: 13.0,
            md_mean: -18.64,
            md_sd: 4.0,
            md_range: (-29.0, -12.1),
        },
    }
}

fn sample_clamped(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let v = Normal::new(mean, sd).expect("positive sd").sample(rng);
    v.clamp(lo, hi)
}

/// Sampled per-eye configurations for a four-group cohort. Volumes are
/// not rasterized here; callers generate them one at a time to bound
/// memory.
pub fn cohort_configs(spec: &CohortSpec) -> Vec<(PhantomConfig, SeverityGroup)> {
    let groups = [
        (SeverityGroup::Normal, spec.n_normal),
        (SeverityGroup::Mild, spec.n_mild),
        (SeverityGroup::Moderate, spec.n_moderate),
        (SeverityGroup::Advanced, spec.n_advanced),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut idx = 0usize;
    for (group, n) in groups {
        let prof = group_profile(group);
        for k in 0..n {
            let mut cfg = spec.base.clone();
            cfg.laterality = if idx % 2 == 0 { Laterality::Right } else { Laterality::Left };
            // upper clamp keeps the 2.6 R measurement annulus inside the
            // default 4.8 mm lateral extent for every draw
            cfg.bmo_a_um = sample_clamped(&mut rng, 800.0, 40.0, 650.0, 900.0);
            cfg.bmo_b_um = cfg.bmo_a_um;
            cfg.tilt_deg = sample_clamped(&mut rng, 0.0, 1.5, -4.0, 4.0);
            cfg.rnfl_base_um = sample_clamped(&mut rng, prof.rnfl_base, 8.0, 35.0, 160.0);
            cfg.rnfl_delta_um = sample_clamped(&mut rng, 15.0, 3.0, 5.0, cfg.rnfl_base_um - 5.0);
            cfg.gcl_um = sample_clamped(&mut rng, prof.gcl, 5.0, 30.0, 110.0);
            cfg.choroid_um = sample_clamped(&mut rng, prof.choroid, 15.0, 80.0, 280.0);
            cfg.pld_um = sample_clamped(&mut rng, prof.pld, 40.0, 100.0, 600.0);
            cfg.lcd_um = sample_clamped(&mut rng, prof.lcd, 40.0, 200.0, 700.0).max(cfg.pld_um + 80.0);
            cfg.lc_radius_nasal_um = sample_clamped(&mut rng, prof.lc_radius, 300.0, 1200.0, 6000.0);
            cfg.lc_radius_superior_um =
                cfg.lc_radius_nasal_um * sample_clamped(&mut rng, 1.0, 0.15, 0.6, 1.6);
            cfg.ppsa_deg = sample_clamped(&mut rng, prof.ppsa, 1.5, 0.5, 25.0);
            cfg.noise_sigma_um = 3.0;
            cfg.seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64);
            let md = sample_clamped(&mut rng, prof.md_mean, prof.md_sd, prof.md_range.0, prof.md_range.1);
            cfg.subject = Some(SubjectMeta {
                id: format!("phantom-{}-{k:03}", group.as_str().to_lowercase()),
                age: Some(rng.gen_range(45.0..85.0)),
                sex: Some(if idx % 2 == 0 { "F".into() } else { "M".into() }),
                md_db: Some(md),
                cohort: Some(
                    if group == SeverityGroup::Normal { "normal" } else { "glaucoma" }.into(),
                ),
            });
            out.push((cfg, group));
            idx += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::build_frame;
    use approx::assert_abs_diff_eq;

    fn small_config() -> PhantomConfig {
        PhantomConfig::default().with_scan_grid(160, 49, 256)
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = small_config();
        cfg.noise_sigma_um = 4.0;
        cfg.seed = 11;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.voxels, b.voxels);
        cfg.seed = 12;
        let c = generate(&cfg).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn all_tissues_present_and_volume_valid() {
        let v = generate(&small_config()).unwrap();
        v.validate().unwrap();
        let mut seen = [false; 8];
        for &x in &v.voxels {
            seen[x as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "labels present: {seen:?}");
    }

    #[test]
    fn bmo_plane_and_area_recovered() {
        let cfg = small_config();
        let v = generate(&cfg).unwrap();
        let frame = build_frame(&v).unwrap();
        // untilted phantom: anterior normal is -z
        assert_abs_diff_eq!(frame.bmo_normal.z, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(frame.bmo_area, PI * 800.0 * 800.0 / 1e6, epsilon = 1e-6);
        let c = cfg.canal_center();
        assert_abs_diff_eq!((frame.bmo_center - c).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn ground_truth_analytic_fields() {
        let cfg = PhantomConfig::default();
        let gt = ground_truth(&cfg);
        assert_abs_diff_eq!(gt.pld_um, 350.0);
        assert_abs_diff_eq!(gt.lcd_um, 450.0);
        // spherical posteriorly bowed LC: umbilic cup
        assert_abs_diff_eq!(gt.lc_gsi, -1.0);
        assert_abs_diff_eq!(gt.ppsa_deg, 6.0);
        assert_abs_diff_eq!(gt.bmoa_mm2, PI * 0.64, epsilon = 1e-12);
        // superior octant carries the RNFL bulge, inferior-adjacent less
        assert!(gt.rnflt_um[Octant::Superior as usize] > gt.rnflt_um[Octant::Temporal as usize]);
        assert_abs_diff_eq!(gt.rnflt_avg_um, cfg.rnfl_base_um, epsilon = 1e-9);
        // flat sclera side: ChT formula (t + 0.5 R tan b) cos b
        let beta = (cfg.ppsa_deg / 2.0).to_radians();
        let expect = (cfg.choroid_um + 0.5 * 800.0 * beta.tan()) * beta.cos();
        for o in Octant::ALL {
            assert_abs_diff_eq!(gt.cht_um[o as usize], expect, epsilon = 0.5);
        }
        // MRW from rim to the peripheral ILM is at most the vertical gap
        let max_gap = cfg.rnfl_base_um + cfg.rnfl_delta_um + cfg.gcl_um + cfg.orl_um + cfg.rpe_um;
        for o in Octant::ALL {
            assert!(gt.mrw_um[o as usize] > 50.0 && gt.mrw_um[o as usize] <= max_gap + 1.0);
        }
        // MPT is at most the axial gap at the canal center
        assert!(gt.mpt_um > 0.0 && gt.mpt_um <= cfg.lcd_um - cfg.pld_um + 1.0);
    }

    #[test]
    fn gsi_saddle_and_trough_limits() {
        let mut cfg = PhantomConfig::default();
        cfg.lc_radius_nasal_um = 2000.0;
        cfg.lc_radius_superior_um = 4000.0;
        let gt = ground_truth(&cfg);
        // both curvatures negative, unequal: between -1 and -0.5
        assert!(gt.lc_gsi < -0.5 && gt.lc_gsi > -1.0);
        let expected = {
            let (k1, k2) = (-1.0 / 4000.0, -1.0 / 2000.0);
            (2.0 / PI) * ((k1 + k2) as f64 / (k1 - k2) as f64).atan()
        };
        assert_abs_diff_eq!(gt.lc_gsi, expected, epsilon = 1e-12);
    }

    #[test]
    fn extraction_closes_on_ground_truth_small_phantom() {
        let mut cfg = small_config();
        cfg.tilt_deg = 2.0;
        cfg.seed = 3;
        let (v, gt) = generate_with_truth(&cfg).unwrap();
        let (got, diags) = crate::params::extract_all(&v);
        assert!(diags.is_empty(), "diagnostics: {diags:?}");
        let spacing = cfg.dx.max(cfg.dy).max(cfg.dz);
        let tol = 2.0 * spacing;
        for o in 0..8 {
            assert_abs_diff_eq!(got.rnflt_um[o], gt.rnflt_um[o], epsilon = tol);
            assert_abs_diff_eq!(got.gcct_um[o], gt.gcct_um[o], epsilon = tol);
            assert_abs_diff_eq!(got.cht_um[o], gt.cht_um[o], epsilon = tol);
            assert_abs_diff_eq!(got.mrw_um[o], gt.mrw_um[o], epsilon = tol);
        }
        assert_abs_diff_eq!(got.pld_um, gt.pld_um, epsilon = tol);
        assert_abs_diff_eq!(got.lcd_um, gt.lcd_um, epsilon = tol);
        assert_abs_diff_eq!(got.mpt_um, gt.mpt_um, epsilon = tol);
        assert_abs_diff_eq!(got.lc_gsi, gt.lc_gsi, epsilon = 0.1);
        assert_abs_diff_eq!(got.ppsa_deg, gt.ppsa_deg, epsilon = 1.0);
        assert_abs_diff_eq!(got.bmoa_mm2, gt.bmoa_mm2, epsilon = 0.01);
    }

    #[test]
    fn left_eye_mirrors_consistently() {
        let mut cfg = small_config();
        cfg.laterality = Laterality::Left;
        let (v, gt) = generate_with_truth(&cfg).unwrap();
        let (got, diags) = crate::params::extract_all(&v);
        assert!(diags.is_empty(), "diagnostics: {diags:?}");
        let tol = 2.0 * cfg.dx.max(cfg.dy).max(cfg.dz);
        for o in 0..8 {
            assert_abs_diff_eq!(got.rnflt_um[o], gt.rnflt_um[o], epsilon = tol);
        }
    }

    #[test]
    fn inconsistent_layers_rejected() {
        let mut cfg = small_config();
        cfg.pld_um = 500.0;
        cfg.lcd_um = 450.0;
        assert!(matches!(generate(&cfg), Err(PhantomError::InconsistentLayers(_))));
        let mut cfg = small_config();
        cfg.lcd_um = cfg.pld_um + 1.0;
        assert!(matches!(generate(&cfg), Err(PhantomError::InconsistentLayers(_))));
    }

    #[test]
    fn out_of_volume_rejected() {
        let mut cfg = small_config();
        cfg.sclera_um = 2000.0;
        assert!(matches!(generate(&cfg), Err(PhantomError::OutOfVolume(_))));
        let mut cfg = small_config();
        cfg.bmo_a_um = 2000.0;
        cfg.bmo_b_um = 2000.0;
        assert!(matches!(generate(&cfg), Err(PhantomError::OutOfVolume(_))));
    }

    #[test]
    fn cohort_configs_cover_groups_and_stay_valid() {
        let spec = CohortSpec {
            n_normal: 4,
            n_mild: 4,
            n_moderate: 4,
            n_advanced: 4,
            base: small_config(),
            seed: 21,
        };
        let configs = cohort_configs(&spec);
        assert_eq!(configs.len(), 16);
        for (cfg, group) in &configs {
            cfg.validate().unwrap();
            let meta = cfg.subject.as_ref().unwrap();
            if *group == SeverityGroup::Normal {
                assert!(meta.is_normal_cohort());
            } else {
                let staged = crate::volume::classify_severity(meta.md_db.unwrap()).unwrap();
                assert_eq!(staged, *group);
            }
        }
        // deterministic
        let again = cohort_configs(&spec);
        assert_eq!(configs.len(), again.len());
        assert_eq!(configs[5].0, again[5].0);
    }
}
