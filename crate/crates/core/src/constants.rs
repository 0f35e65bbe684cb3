//! Physical constants (CODATA 2018).

/// Vacuum permeability, N·A⁻².
pub const MU_0: f64 = 1.256_637_062_12e-6;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// μ₀/4π in SI units.
pub const MU_0_OVER_4PI: f64 = MU_0 / (4.0 * std::f64::consts::PI);

/// One ångström in meters.
pub const ANGSTROM: f64 = 1e-10;

/// Converts a frequency in Hz to angular frequency in rad/s.
pub fn hz_to_rad(hz: f64) -> f64 {
    2.0 * std::f64::consts::PI * hz
}

/// Converts an angular frequency in rad/s to Hz.
pub fn rad_to_hz(rad: f64) -> f64 {
    rad / (2.0 * std::f64::consts::PI)
}
