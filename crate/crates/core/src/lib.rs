//! Filter-function tools for quantum noise spectroscopy of amplitude noise in
//! the presence of dephasing: control waveforms, filter functions, constraint
//! pruning, waveform design, noise synthesis, qubit simulation and spectrum
//! reconstruction.

pub mod cli;
pub mod error;
pub mod filterfn;
pub mod lp_reduce;
pub mod noisegen;
pub mod optimize;
pub mod qsim;
pub mod quad;
pub mod slepian;
pub mod special;
pub mod spectro;
pub mod transform;
pub mod waveform;

pub use error::{Error, Result};

/// 2π.
pub const TAU: f64 = std::f64::consts::TAU;

/// Convert ω/2π in MHz to angular frequency in rad/s.
pub fn mhz_to_rad(f_mhz: f64) -> f64 {
    TAU * f_mhz * 1e6
}

/// Convert angular frequency in rad/s to ω/2π in MHz.
pub fn rad_to_mhz(omega: f64) -> f64 {
    omega / TAU / 1e6
}
