//! Geometry-blind baseline: detect the object as a pixel blob in the
//! current and goal images and poke along the centroid difference vector.

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::fmath;
use crate::planner::{
    run_episode_with_policy, Episode, PlannerConfig, PokePolicy, PolicyAction, Selection,
    TerminalReason,
};
use crate::rng::{stream, StreamKind};
use crate::sim::{ArenaParams, Image, Poke, Pose, Vec2};

/// Object detection from one thresholded image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobEstimate {
    /// Mean of foreground pixel centers, in pixels.
    pub centroid: Vec2,
    /// Principal axis of the foreground pixel covariance, in [0, pi).
    pub major_axis_angle: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobConfig {
    /// Centroid distance below which the goal counts as reached, in pixels.
    pub stop_threshold: f64,
    /// Poke length per pixel of centroid distance.
    pub len_gain: f64,
    pub max_pokes: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            stop_threshold: 3.0,
            len_gain: 1.0,
            max_pokes: 10,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_threshold > 0.0 && self.len_gain > 0.0) {
            return Err(Error::InvalidParams(alloc::format!(
                "stop_threshold and len_gain must be positive, got {} and {}",
                self.stop_threshold,
                self.len_gain
            )));
        }
        if self.max_pokes == 0 {
            return Err(Error::InvalidParams("max_pokes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Centroid and principal axis of the pixels brighter than 0.5.
pub fn detect_blob(image: &Image) -> Result<BlobEstimate> {
    let size = image.size();
    let mut count = 0usize;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..size {
        for x in 0..size {
            if image.get(x, y) > 0.5 {
                count += 1;
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyForeground);
    }
    let inv = 1.0 / count as f64;
    let cx = sx * inv;
    let cy = sy * inv;
    let mut m20 = 0.0;
    let mut m02 = 0.0;
    let mut m11 = 0.0;
    for y in 0..size {
        for x in 0..size {
            if image.get(x, y) > 0.5 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                m20 += dx * dx;
                m02 += dy * dy;
                m11 += dx * dy;
            }
        }
    }
    // Principal eigenvector angle of the 2x2 covariance matrix.
    let mut axis = 0.5 * fmath::atan2(2.0 * m11 * inv, (m20 - m02) * inv);
    if axis < 0.0 {
        axis += core::f64::consts::PI;
    }
    Ok(BlobEstimate {
        centroid: Vec2::new(cx, cy),
        major_axis_angle: axis,
        pixel_count: count,
    })
}

/// Poke toward the goal centroid, or `None` once within the stop threshold.
/// The poke centers on the detected centroid with motion direction along
/// the difference vector (so the poke angle points the opposite way) and
/// length proportional to the remaining distance.
pub fn blob_next_poke(
    current: &BlobEstimate,
    goal_centroid: Vec2,
    config: &BlobConfig,
    arena: &ArenaParams,
) -> Option<Poke> {
    let v = goal_centroid - current.centroid;
    let dist = v.norm();
    if dist < config.stop_threshold {
        return None;
    }
    let theta = fmath::wrap_angle(fmath::atan2(v.y, v.x) + core::f64::consts::PI);
    let (lmin, lmax) = arena.poke_len_range;
    let length = (dist * config.len_gain).clamp(lmin, lmax);
    Some(Poke::new(current.centroid.x, current.centroid.y, theta, length))
}

/// [`PokePolicy`] wrapper; the goal centroid is detected once and cached.
pub struct BlobPolicy<'a> {
    arena: &'a ArenaParams,
    config: BlobConfig,
    goal_cache: Option<(Image, Vec2)>,
}

impl<'a> BlobPolicy<'a> {
    pub fn new(arena: &'a ArenaParams, config: BlobConfig) -> Self {
        BlobPolicy {
            arena,
            config,
            goal_cache: None,
        }
    }
}

impl PokePolicy for BlobPolicy<'_> {
    fn next_poke(&mut self, current: &Image, goal: &Image) -> Result<PolicyAction> {
        let goal_centroid = match &self.goal_cache {
            Some((img, c)) if img == goal => *c,
            _ => {
                let c = detect_blob(goal)?.centroid;
                self.goal_cache = Some((goal.clone(), c));
                c
            }
        };
        let est = detect_blob(current)?;
        Ok(
            match blob_next_poke(&est, goal_centroid, &self.config, self.arena) {
                None => PolicyAction::Stop(TerminalReason::Threshold),
                Some(poke) => PolicyAction::Poke(poke),
            },
        )
    }
}

/// Closed-loop episode under the blob policy. `seed` feeds simulator noise
/// only; on a noiseless arena the run is seed-independent.
pub fn run_blob_episode(
    init: &Pose,
    goal: &Pose,
    arena: &ArenaParams,
    config: &BlobConfig,
    seed: u64,
) -> Result<Episode> {
    config.validate()?;
    let planner_config = PlannerConfig {
        max_pokes: config.max_pokes,
        selection: Selection::Argmax,
        seed,
    };
    let mut policy = BlobPolicy::new(arena, *config);
    let mut noise_rng = noise_stream(seed);
    run_episode_with_policy(init, goal, arena, &planner_config, &mut policy, &mut noise_rng)
}

fn noise_stream(seed: u64) -> impl RngCore {
    stream(seed, StreamKind::Planner, 1)
}
