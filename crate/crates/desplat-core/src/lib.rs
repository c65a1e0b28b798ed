//! Core math for desplat: anisotropic Gaussian scene primitives, a
//! differentiable software splatting renderer (forward + analytic backward),
//! image losses, the denoising optimizer, and primitive population control.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! owned buffers, with transcendentals routed through `libm` so results are
//! bit-identical regardless of the host. IO, file formats, and the CLI live
//! in the companion `desplat` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod camera;
pub mod error;
pub mod exec;
pub mod gaussian;
pub mod img;
pub mod kdtree;
pub mod lifecycle;
pub mod math;
pub mod objective;
pub mod optim;
pub mod render;
pub mod rng;
pub mod scene;
pub mod train;

pub use camera::Camera;
pub use error::Error;
pub use gaussian::GaussianPrimitive;
pub use scene::Scene;
