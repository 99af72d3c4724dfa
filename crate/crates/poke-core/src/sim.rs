//! Quasi-static 2-D poking physics for one rigid rectangle in a walled
//! square arena, plus rasterization to single-channel images.
//!
//! A poke is a straight finger sweep: the poke point `p`, direction `theta`
//! and length `l` define endpoints `p1 = p + (l/2)(cos theta, sin theta)`
//! and `p2 = p - (l/2)(cos theta, sin theta)`; the finger moves from `p1`
//! to `p2`, so the motion direction is `theta + 180` degrees. The object
//! responds quasi-statically: translation proportional to the push length
//! past first contact, rotation proportional to the torque-like lever
//! `r x d` at the contact point. Walls absorb excess motion (clamping).
//!
//! With `noise_std = 0` every function here is pure: fixed inputs give
//! bit-identical outputs on every platform (all math through [`crate::fmath`]).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use core::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{normal_pair, uniform_in, RngCore};

/// Plane vector in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        fmath::hypot(self.x, self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Scalar cross product `self.x * other.y - self.y * other.x`.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Arena geometry and physics constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArenaParams {
    /// Square arena side and rendered image edge, in pixels.
    pub arena_size: usize,
    pub rect_w: f64,
    pub rect_h: f64,
    /// Translation gain: center displacement = k_t * push_len.
    pub k_t: f64,
    /// Rotation gain, radians per pixel of push per pixel of lever arm.
    pub k_r: f64,
    /// Poses keep the rectangle at least this far from the walls.
    pub wall_margin: f64,
    /// Std-dev of Gaussian motion noise; 0 disables all rng consumption.
    pub noise_std: f64,
    /// Admissible poke lengths [l_min, l_max].
    pub poke_len_range: (f64, f64),
}

impl Default for ArenaParams {
    fn default() -> Self {
        ArenaParams {
            arena_size: 64,
            rect_w: 16.0,
            rect_h: 8.0,
            k_t: 0.8,
            k_r: 0.03,
            wall_margin: 1.0,
            noise_std: 0.0,
            poke_len_range: (4.0, 20.0),
        }
    }
}

impl ArenaParams {
    /// Checks every documented invariant, including that the rectangle fits
    /// inside the walls at any orientation.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidParams(String::from(msg)));
        let (l_min, l_max) = self.poke_len_range;
        if self.arena_size == 0 {
            return fail("arena_size must be positive");
        }
        let size = self.arena_size as f64;
        if !(size > self.rect_w && self.rect_w > self.rect_h && self.rect_h > 0.0) {
            return fail("need arena_size > rect_w > rect_h > 0");
        }
        if !(self.k_t > 0.0 && self.k_t <= 1.0) {
            return fail("k_t must lie in (0, 1]");
        }
        if !(self.k_r >= 0.0 && self.k_r.is_finite()) {
            return fail("k_r must be finite and non-negative");
        }
        if !(l_min >= 0.0 && l_min < l_max && l_max.is_finite()) {
            return fail("poke_len_range must satisfy 0 <= l_min < l_max");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        if !(self.wall_margin >= 0.0 && self.wall_margin.is_finite()) {
            return fail("wall_margin must be finite and non-negative");
        }
        // Worst-case half extent over theta is half the diagonal.
        if size - 2.0 * self.wall_margin < fmath::hypot(self.rect_w, self.rect_h) {
            return fail("rectangle cannot fit inside walls at every orientation");
        }
        Ok(())
    }

    /// Axis-aligned half extents of the rectangle at orientation `theta`.
    pub fn half_extents(&self, theta: f64) -> (f64, f64) {
        let c = fmath::abs(fmath::cos(theta));
        let s = fmath::abs(fmath::sin(theta));
        let hw = self.rect_w * 0.5;
        let hh = self.rect_h * 0.5;
        (hw * c + hh * s, hw * s + hh * c)
    }

    /// True when the whole rectangle lies inside the walls (tiny slack for
    /// float dust from clamping arithmetic).
    pub fn pose_in_bounds(&self, pose: &Pose) -> bool {
        let (ex, ey) = self.half_extents(pose.theta);
        let size = self.arena_size as f64;
        let m = self.wall_margin;
        const SLACK: f64 = 1e-9;
        pose.cx >= m + ex - SLACK
            && pose.cx <= size - m - ex + SLACK
            && pose.cy >= m + ey - SLACK
            && pose.cy <= size - m - ey + SLACK
    }
}

/// Rectangle pose: center in pixels, orientation in radians `[0, 2*pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
}

impl Pose {
    pub const fn new(cx: f64, cy: f64, theta: f64) -> Self {
        Pose { cx, cy, theta }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    /// World point -> rectangle-local coordinates (x along rect_w).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let c = fmath::cos(self.theta);
        let s = fmath::sin(self.theta);
        let d = p - self.center();
        Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

/// A poke action, or the reserved no-poke.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Poke {
    pub px: f64,
    pub py: f64,
    /// Direction of the p1 side; the finger moves toward theta + 180 deg.
    pub theta: f64,
    pub length: f64,
    pub is_nopoke: bool,
}

impl Poke {
    pub const fn new(px: f64, py: f64, theta: f64, length: f64) -> Self {
        Poke {
            px,
            py,
            theta,
            length,
            is_nopoke: false,
        }
    }

    pub const fn nopoke() -> Self {
        Poke {
            px: 0.0,
            py: 0.0,
            theta: 0.0,
            length: 0.0,
            is_nopoke: true,
        }
    }
}

/// First contact of a poke sweep with the rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    /// First intersection along the motion direction (world frame). Lies on
    /// the rectangle boundary, or equals p1 when the sweep starts inside.
    pub point: Vec2,
    /// Remaining sweep length from the contact point to p2.
    pub push_len: f64,
}

/// One simulated transition: pose, executed poke, resulting pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub pose_t: Pose,
    pub poke: Poke,
    pub pose_t1: Pose,
}

/// Single-channel image, row-major, values in {0.0, 1.0}.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.size + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Sweep endpoints (p1, p2) of a poke.
pub fn poke_endpoints(poke: &Poke) -> Result<(Vec2, Vec2)> {
    if poke.is_nopoke {
        return Err(Error::NoPokeEndpoints);
    }
    let half = poke.length * 0.5;
    let dir = Vec2::new(fmath::cos(poke.theta), fmath::sin(poke.theta));
    let p = Vec2::new(poke.px, poke.py);
    Ok((p + dir * half, p - dir * half))
}

/// Clips the sweep segment against the oriented rectangle.
///
/// Returns the first crossing along the motion direction; a sweep that
/// starts inside contacts at p1 with the full segment length as push_len.
pub fn intersect_poke_rect(pose: &Pose, poke: &Poke, params: &ArenaParams) -> Result<Option<Contact>> {
    let (p1, p2) = poke_endpoints(poke)?;
    let a = pose.to_local(p1);
    let b = pose.to_local(p2);
    let d = b - a;
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for (start, vel, half) in [
        (a.x, d.x, params.rect_w * 0.5),
        (a.y, d.y, params.rect_h * 0.5),
    ] {
        if fmath::abs(vel) < 1e-12 {
            if fmath::abs(start) > half {
                return Ok(None);
            }
            continue;
        }
        let mut enter = (-half - start) / vel;
        let mut exit = (half - start) / vel;
        if enter > exit {
            core::mem::swap(&mut enter, &mut exit);
        }
        t0 = t0.max(enter);
        t1 = t1.min(exit);
        if t0 > t1 {
            return Ok(None);
        }
    }
    let seg = p2 - p1;
    let point = p1 + seg * t0;
    Ok(Some(Contact {
        point,
        push_len: (1.0 - t0) * seg.norm(),
    }))
}

/// Advances the pose by one poke.
///
/// No-poke and non-intersecting pokes leave the pose unchanged. Otherwise,
/// with motion direction `d = unit(p2 - p1)`, lever `r = contact - center`
/// and push length `s`:
///
/// ```text
/// delta_center = k_t * s * d          (+ translation noise)
/// delta_theta  = k_r * s * cross(r,d) (+ k_r-scaled rotation noise)
/// ```
///
/// The new orientation is applied first, then the center is clamped with
/// the orientation-dependent extents so the rectangle stays inside the
/// walls. The rng is consumed (four u64s) only when `noise_std > 0` and
/// the poke makes contact.
pub fn step(pose: &Pose, poke: &Poke, params: &ArenaParams, rng: &mut impl RngCore) -> Pose {
    if poke.is_nopoke {
        return *pose;
    }
    let contact = match intersect_poke_rect(pose, poke, params) {
        Ok(Some(c)) => c,
        _ => return *pose,
    };
    // Endpoints exist: is_nopoke was checked above.
    let (p1, p2) = poke_endpoints(poke).expect("checked non-nopoke");
    let seg = p2 - p1;
    let len = seg.norm();
    if len < 1e-12 {
        return *pose;
    }
    let d = seg * (1.0 / len);
    let r = contact.point - pose.center();
    let s = contact.push_len;
    let mut delta = d * (params.k_t * s);
    let mut dtheta = params.k_r * s * r.cross(d);
    if params.noise_std > 0.0 {
        let (n1, n2) = normal_pair(rng);
        let (n3, _) = normal_pair(rng);
        delta.x += params.noise_std * n1;
        delta.y += params.noise_std * n2;
        dtheta += params.k_r * params.noise_std * n3;
    }
    let theta = fmath::wrap_angle(pose.theta + dtheta);
    let (ex, ey) = params.half_extents(theta);
    let size = params.arena_size as f64;
    let m = params.wall_margin;
    Pose {
        cx: clamp(pose.cx + delta.x, m + ex, size - m - ex),
        cy: clamp(pose.cy + delta.y, m + ey, size - m - ey),
        theta,
    }
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Rasterizes the pose: pixel value 1.0 iff the pixel center lies inside
/// the oriented rectangle (boundary inclusive), else 0.0.
pub fn render(pose: &Pose, params: &ArenaParams) -> Image {
    let n = params.arena_size;
    let hw = params.rect_w * 0.5;
    let hh = params.rect_h * 0.5;
    let c = fmath::cos(pose.theta);
    let s = fmath::sin(pose.theta);
    let mut img = Image::new(n);
    for iy in 0..n {
        let dy = (iy as f64 + 0.5) - pose.cy;
        for ix in 0..n {
            let dx = (ix as f64 + 0.5) - pose.cx;
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            if fmath::abs(lx) <= hw && fmath::abs(ly) <= hh {
                img.data[iy * n + ix] = 1.0;
            }
        }
    }
    img
}

/// Draws a poke whose point lies on the object: p uniform over the
/// rectangle by rejection from its bounding box, theta uniform over
/// [0, 2*pi), length uniform over [l_min, l_max).
///
/// Draw order per attempt is (px, py); theta and length are drawn once
/// after acceptance. Never returns no-poke.
pub fn sample_random_poke(pose: &Pose, params: &ArenaParams, rng: &mut impl RngCore) -> Result<Poke> {
    const MAX_ATTEMPTS: u32 = 10_000;
    let (ex, ey) = params.half_extents(pose.theta);
    let hw = params.rect_w * 0.5;
    let hh = params.rect_h * 0.5;
    for _ in 0..MAX_ATTEMPTS {
        let px = uniform_in(rng, pose.cx - ex, pose.cx + ex);
        let py = uniform_in(rng, pose.cy - ey, pose.cy + ey);
        let local = pose.to_local(Vec2::new(px, py));
        if fmath::abs(local.x) <= hw && fmath::abs(local.y) <= hh {
            let theta = uniform_in(rng, 0.0, TAU);
            let (l_min, l_max) = params.poke_len_range;
            let length = uniform_in(rng, l_min, l_max);
            return Ok(Poke::new(px, py, theta, length));
        }
    }
    Err(Error::SamplingFailed {
        attempts: MAX_ATTEMPTS,
    })
}

/// Uniform in-bounds pose: theta first, then the center uniform over the
/// feasible interval for that orientation.
pub fn random_pose(params: &ArenaParams, rng: &mut impl RngCore) -> Pose {
    let theta = uniform_in(rng, 0.0, TAU);
    let (ex, ey) = params.half_extents(theta);
    let size = params.arena_size as f64;
    let m = params.wall_margin;
    Pose {
        cx: uniform_in(rng, m + ex, size - m - ex),
        cy: uniform_in(rng, m + ey, size - m - ey),
        theta,
    }
}

/// Number of consecutive records sharing one poke chain before the pose is
/// re-randomized, mimicking continuous robot interaction.
pub const CHAIN_LEN: usize = 20;

/// Generates `n` interaction records: random_pose -> sample_random_poke ->
/// step, chained for [`CHAIN_LEN`] records at a time.
///
/// Fully determined by (n, seed, params).
pub fn generate_interactions(n: usize, seed: u64, params: &ArenaParams) -> Result<Vec<Interaction>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Dataset, 0);
    let mut records = Vec::with_capacity(n);
    let mut pose = random_pose(params, &mut rng);
    for i in 0..n {
        if i > 0 && i % CHAIN_LEN == 0 {
            pose = random_pose(params, &mut rng);
        }
        let poke = sample_random_poke(&pose, params, &mut rng)?;
        let next = step(&pose, &poke, params, &mut rng);
        records.push(Interaction {
            pose_t: pose,
            poke,
            pose_t1: next,
        });
        pose = next;
    }
    Ok(records)
}
