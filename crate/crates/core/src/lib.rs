//! Pairwise 3D deformable and diffeomorphic image registration via
//! coordinate-based neural fields.
//!
//! A registration job optimizes a small Fourier-encoded sinusoidal MLP per
//! image pair with Adam, using strided or mini-patch coordinate batches, a
//! windowed squared local normalized cross-correlation similarity and a
//! hinge penalty on negative Jacobian determinants. The field either emits
//! displacement vectors directly or a stationary velocity that is integrated
//! with fixed-step RK4 to obtain a diffeomorphic map.
//!
//! Crate layout mirrors the pipeline: [`volume`] (data + trilinear
//! sampling), [`field`] (the neural field), [`autograd`] (gradients and
//! Adam), [`deform`] (point transforms and Jacobian statistics),
//! [`sampling`] (coordinate batches), [`objective`] (loss assembly),
//! [`metrics`] (evaluation), [`synth`] (test pair generation) and
//! [`registrar`] (optimization drivers and checkpoints).

pub mod autograd;
pub mod deform;
pub mod error;
pub mod field;
pub mod metrics;
pub mod objective;
pub mod real;
pub mod registrar;
pub mod sampling;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;

/// Version stamp for every on-disk container this crate reads or writes.
pub const FORMAT_VERSION: u32 = 1;
