//! Simulation and inversion toolkit for the DC Kerr effect in the weakly
//! nonlinear geometric-optics regime.
//!
//! A static bias field `h^{1/2} E0` makes a `chi^(3)` medium birefringent for
//! a weak beam of wavelength `2 pi h`: the component perpendicular to the
//! bias picks up the phase `tau`, the parallel one `3 tau`, where `tau` is a
//! line integral of `chi^(3)`. The crate builds that asymptotic solution,
//! checks it against a direct solver of the nonlinear wave equation, and
//! inverts synthetic detector data back to `chi^(3)`.

pub mod direct1d;
pub mod error;
pub mod geometry;
pub mod inversion;
pub mod kerrcell;
pub mod media;
pub mod profiles;
pub mod quadrature;
pub mod smooth;
pub mod stationary;

mod dst;

pub use error::{Error, Result};
pub use geometry::{Direction, Frame, Grid1D, Grid3D, Ray, Vec3};
pub use media::{GaussianBump, SusceptibilityField};
