//! Desk-scale optic nerve head (ONH) phenotyping: geometric parameter
//! extraction from segmented 3D OCT label volumes, point-cloud
//! classification with max-pool attribution, and the statistical battery
//! that compares severity groups. A parametric phantom generator with
//! analytic ground truth serves as the test substrate.

pub mod cloud;
pub mod criticals;
pub mod frame;
pub mod params;
pub mod phantom;
pub mod pointnet;
pub mod stats;
pub mod surfaces;
pub mod tensor;
pub mod volume;

pub use frame::{build_frame, fit_bmo_ellipse, fit_bmo_plane, OnhFrame};
pub use volume::{classify_severity, load_volume, save_volume, LabelVolume, SeverityGroup, TissueLabel};
