//! Reconstruction toolkit for anisotropic X-ray dark-field tomography (AXDT).
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] and [`io`] hold volumes, poses and the on-disk containers.
//! * [`projector`] is the parallel-beam X-ray transform and its adjoint.
//! * [`sphharm`] evaluates real spherical harmonics, pose weights and the
//!   dark-field operator built on top of the projector.
//! * [`specfun`] provides overflow-free `ln I0` and `I1/I0`.
//! * [`models`] implements the linearized (m1), joint statistical (m2) and
//!   simplified Rician (m3) objectives.
//! * [`optim`] contains CGLS, nonlinear CG, L-BFGS and the fast gradient
//!   method.
//! * [`simulate`] generates phantoms and phase-stepping measurements.
//! * [`fiber`] extracts fiber orientations with the Funk-Radon transform.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fiber;
pub mod geometry;
pub mod io;
pub mod models;
pub mod optim;
pub mod projector;
pub mod simulate;
pub mod specfun;
pub mod sphharm;
pub mod vecops;

pub use error::{Error, Result};
pub use geometry::{AcquisitionGeometry, CoefficientVolume, DetectorSpec, Pose, ScalarVolume, VolumeGrid};
pub use models::{MeasurementSet, ModelKind, Objective};
pub use optim::{ConvergenceLog, OptimizerConfig};

pub use projector::{LinearOperator, Sinogram};
pub use sphharm::{AxdtOperator, PoseWeights, SphereGrid};
