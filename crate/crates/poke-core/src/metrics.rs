//! Evaluation metrics: how far an episode ended from its goal.

use crate::error::{Error, Result};
use crate::fmath;
use crate::sim::Pose;

/// Distance from the final to the goal center, divided by the initial-to-
/// goal distance. 1.0 means no net progress; 0 means the goal was reached.
pub fn relative_location_error(final_pose: &Pose, goal: &Pose, initial: &Pose) -> Result<f64> {
    let denom = (initial.center() - goal.center()).norm();
    if denom <= 1e-9 {
        return Err(Error::ZeroInitialDistance);
    }
    Ok((final_pose.center() - goal.center()).norm() / denom)
}

/// Angle in degrees between the rectangle axes of two poses, folded into
/// [0, 90]: the axis has 180-degree symmetry, and of the two angles an axis
/// pair makes the acute one is reported.
pub fn pose_error_degrees(final_pose: &Pose, goal: &Pose) -> f64 {
    let pi = core::f64::consts::PI;
    let mut r = fmath::wrap_angle(final_pose.theta - goal.theta);
    if r >= pi {
        r -= pi;
    }
    if r > pi / 2.0 {
        r = pi - r;
    }
    (r / pi) * 180.0
}
