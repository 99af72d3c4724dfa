//! Thin wrappers over libm so every transcendental in the crate goes through
//! one software implementation. This keeps simulator trajectories, trained
//! weights, and planner decisions bit-identical across platforms and across
//! std/no_std builds.

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

/// Wraps an angle to `[0, 2*pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let tau = core::f64::consts::TAU;
    let wrapped = theta - floor(theta / tau) * tau;
    // floor can land exactly on tau for tiny negative inputs.
    if wrapped >= tau {
        wrapped - tau
    } else {
        wrapped
    }
}
