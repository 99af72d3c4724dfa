//! Greedy closed-loop poking: query a policy with the current and goal
//! observations, execute the returned poke in the simulator, repeat.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::fmath;
use crate::model::{
    encode, inverse_predict, predict_action_bins, undiscretize, Conditioning, DiscretizedAction,
    ModelParams, ANGLE_BINS, LEN_BINS, LOC_BINS, NOPOKE_BIN,
};
use crate::nn::NdArray;
use crate::rng::{stream, uniform01, StreamKind};
use crate::sim::{render, step, ArenaParams, Image, Poke, Pose};

/// Why an episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalReason {
    /// The model predicted the reserved no-poke bin.
    NoPoke,
    /// The poke budget ran out.
    MaxSteps,
    /// A policy-specific convergence test fired (blob baseline).
    Threshold,
}

impl TerminalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalReason::NoPoke => "no_poke",
            TerminalReason::MaxSteps => "max_steps",
            TerminalReason::Threshold => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStep {
    pub before: Pose,
    pub poke: Poke,
    pub after: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub init: Pose,
    pub goal: Pose,
    pub steps: Vec<EpisodeStep>,
    pub terminal: TerminalReason,
}

impl Episode {
    pub fn final_pose(&self) -> Pose {
        self.steps.last().map(|s| s.after).unwrap_or(self.init)
    }

    /// Pose after `k` pokes; past the end of a short episode the final pose
    /// carries forward (the object does not move once the planner stops).
    pub fn pose_after(&self, k: usize) -> Pose {
        if k == 0 || self.steps.is_empty() {
            return if k == 0 { self.init } else { self.final_pose() };
        }
        let idx = k.min(self.steps.len());
        self.steps[idx - 1].after
    }
}

/// How the planner turns head distributions into one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Greedy argmax chain (default).
    Argmax,
    /// Per-head softmax sampling at temperature 1, chained.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    pub max_pokes: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            max_pokes: 10,
            selection: Selection::Argmax,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_pokes == 0 {
            return Err(Error::InvalidParams("max_pokes must be at least 1".into()));
        }
        Ok(())
    }
}

/// A policy's verdict for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyAction {
    Poke(Poke),
    /// Stop with this reason ([`TerminalReason::MaxSteps`] is the episode
    /// runner's own verdict and not a policy's to give).
    Stop(TerminalReason),
}

/// Anything that can pick the next poke from (current, goal) observations.
pub trait PokePolicy {
    fn next_poke(&mut self, current: &Image, goal: &Image) -> Result<PolicyAction>;
}

/// Greedy-chain action prediction from a trained model; the poke is the bin
/// center of the predicted cell, direction, and length, or `None` when the
/// model predicts the no-poke bin.
pub fn plan_next_poke(
    current: &Image,
    goal: &Image,
    params: &ModelParams,
    arena: &ArenaParams,
) -> Result<Option<Poke>> {
    let x = encode(current, params)?;
    let g = encode(goal, params)?;
    let bins = predict_action_bins(&x, &g, params)?;
    Ok(if bins.len == NOPOKE_BIN {
        None
    } else {
        Some(undiscretize(&bins, arena))
    })
}

/// Policy wrapper over the learned inverse model. The goal latent is cached
/// (bitwise identical to re-encoding, since rendering and encoding are
/// deterministic) and invalidated if a different goal image arrives.
pub struct ModelPolicy<'a> {
    params: &'a ModelParams,
    arena: &'a ArenaParams,
    selection: Selection,
    rng: rand_chacha::ChaCha8Rng,
    goal_cache: Option<(Image, NdArray)>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(params: &'a ModelParams, arena: &'a ArenaParams, config: &PlannerConfig) -> Self {
        ModelPolicy {
            params,
            arena,
            selection: config.selection,
            rng: stream(config.seed, StreamKind::Planner, 0),
            goal_cache: None,
        }
    }

    fn goal_latent(&mut self, goal: &Image) -> Result<NdArray> {
        if let Some((img, latent)) = &self.goal_cache {
            if img == goal {
                return Ok(latent.clone());
            }
        }
        let latent = encode(goal, self.params)?;
        self.goal_cache = Some((goal.clone(), latent.clone()));
        Ok(latent)
    }

    fn sampled_bins(&mut self, x: &NdArray, g: &NdArray) -> Result<DiscretizedAction> {
        // Chained sampling mirrors the greedy chain: each sampled bin
        // conditions the next head.
        let mut bins = DiscretizedAction {
            loc: 0,
            angle: 0,
            len: 0,
        };
        let cond = Conditioning::TeacherForced(bins);
        let logits = inverse_predict(x, g, self.params, cond)?;
        bins.loc = sample_softmax(&logits.loc, &mut self.rng);
        let cond = Conditioning::TeacherForced(bins);
        let logits = inverse_predict(x, g, self.params, cond)?;
        bins.angle = sample_softmax(&logits.angle, &mut self.rng);
        let cond = Conditioning::TeacherForced(bins);
        let logits = inverse_predict(x, g, self.params, cond)?;
        bins.len = sample_softmax(&logits.len, &mut self.rng);
        debug_assert!(bins.loc < LOC_BINS && bins.angle < ANGLE_BINS && bins.len < LEN_BINS);
        Ok(bins)
    }
}

impl PokePolicy for ModelPolicy<'_> {
    fn next_poke(&mut self, current: &Image, goal: &Image) -> Result<PolicyAction> {
        let g = self.goal_latent(goal)?;
        let x = encode(current, self.params)?;
        let bins = match self.selection {
            Selection::Argmax => predict_action_bins(&x, &g, self.params)?,
            Selection::Sample => self.sampled_bins(&x, &g)?,
        };
        Ok(if bins.len == NOPOKE_BIN {
            PolicyAction::Stop(TerminalReason::NoPoke)
        } else {
            PolicyAction::Poke(undiscretize(&bins, self.arena))
        })
    }
}

/// Draws a class from softmax(logits) at temperature 1.
fn sample_softmax(logits: &NdArray, rng: &mut impl RngCore) -> usize {
    let ld = logits.data();
    let mut max = f64::NEG_INFINITY;
    for &v in ld {
        if v > max {
            max = v;
        }
    }
    let mut z = 0.0;
    for &v in ld {
        z += fmath::exp(v - max);
    }
    let mut u = uniform01(rng) * z;
    for (i, &v) in ld.iter().enumerate() {
        u -= fmath::exp(v - max);
        if u <= 0.0 {
            return i;
        }
    }
    ld.len() - 1
}

/// Runs one closed-loop episode under any policy. `rng` feeds simulator
/// motion noise only (untouched when the arena is noiseless).
pub fn run_episode_with_policy(
    init: &Pose,
    goal: &Pose,
    arena: &ArenaParams,
    config: &PlannerConfig,
    policy: &mut impl PokePolicy,
    rng: &mut impl RngCore,
) -> Result<Episode> {
    config.validate()?;
    arena.validate()?;
    for (name, pose) in [("init", init), ("goal", goal)] {
        if !arena.pose_in_bounds(pose) {
            return Err(Error::InvalidParams(alloc::format!(
                "{name} pose ({}, {}, {}) is out of bounds",
                pose.cx,
                pose.cy,
                pose.theta
            )));
        }
    }
    let goal_img = render(goal, arena);
    let mut current = *init;
    let mut steps = Vec::new();
    let terminal = loop {
        if steps.len() >= config.max_pokes {
            break TerminalReason::MaxSteps;
        }
        let img = render(&current, arena);
        match policy.next_poke(&img, &goal_img)? {
            PolicyAction::Stop(reason) => break reason,
            PolicyAction::Poke(poke) => {
                let after = step(&current, &poke, arena, rng);
                steps.push(EpisodeStep {
                    before: current,
                    poke,
                    after,
                });
                current = after;
            }
        }
    };
    Ok(Episode {
        init: *init,
        goal: *goal,
        steps,
        terminal,
    })
}

/// Closed-loop episode under the learned model.
pub fn run_episode(
    init: &Pose,
    goal: &Pose,
    params: &ModelParams,
    arena: &ArenaParams,
    config: &PlannerConfig,
) -> Result<Episode> {
    let mut policy = ModelPolicy::new(params, arena, config);
    let mut noise_rng = stream(config.seed, StreamKind::Planner, 1);
    run_episode_with_policy(init, goal, arena, config, &mut policy, &mut noise_rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_arena() -> ArenaParams {
        ArenaParams {
            arena_size: 40,
            ..ArenaParams::default()
        }
    }

    fn test_params(seed: u64) -> ModelParams {
        ModelParams::init(40, seed).unwrap()
    }

    #[test]
    fn episode_respects_budget_and_chains_poses() {
        let arena = test_arena();
        let params = test_params(1);
        let config = PlannerConfig::default();
        let ep = run_episode(
            &Pose::new(14.0, 14.0, 0.2),
            &Pose::new(26.0, 26.0, 1.0),
            &params,
            &arena,
            &config,
        )
        .unwrap();
        assert!(ep.steps.len() <= config.max_pokes);
        for pair in ep.steps.windows(2) {
            assert_eq!(pair[0].after, pair[1].before);
        }
        for s in &ep.steps {
            assert!(arena.pose_in_bounds(&s.after), "pose left the arena");
            assert!(!s.poke.is_nopoke, "executed pokes are real pokes");
        }
        if ep.steps.len() < config.max_pokes {
            assert_eq!(ep.terminal, TerminalReason::NoPoke);
        } else {
            assert_eq!(ep.terminal, TerminalReason::MaxSteps);
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let arena = test_arena();
        let params = test_params(2);
        let config = PlannerConfig::default();
        let run = || {
            run_episode(
                &Pose::new(15.0, 20.0, 0.0),
                &Pose::new(25.0, 20.0, 0.5),
                &params,
                &arena,
                &config,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_selection_is_seeded() {
        let arena = test_arena();
        let params = test_params(3);
        let base = PlannerConfig {
            selection: Selection::Sample,
            seed: 7,
            ..PlannerConfig::default()
        };
        let run = |config: &PlannerConfig| {
            run_episode(
                &Pose::new(15.0, 20.0, 0.0),
                &Pose::new(25.0, 22.0, 0.3),
                &params,
                &arena,
                config,
            )
            .unwrap()
        };
        assert_eq!(run(&base), run(&base));
        let other = PlannerConfig { seed: 8, ..base };
        assert_ne!(run(&base), run(&other), "different seeds, different pokes");
    }

    #[test]
    fn planned_poke_center_is_inside_the_image() {
        let arena = test_arena();
        let params = test_params(4);
        let img_a = render(&Pose::new(14.0, 14.0, 0.0), &arena);
        let img_b = render(&Pose::new(26.0, 24.0, 0.8), &arena);
        if let Some(poke) = plan_next_poke(&img_a, &img_b, &params, &arena).unwrap() {
            let size = arena.arena_size as f64;
            assert!(poke.px > 0.0 && poke.px < size);
            assert!(poke.py > 0.0 && poke.py < size);
            let (lmin, lmax) = arena.poke_len_range;
            assert!(poke.length >= lmin && poke.length <= lmax);
        }
    }

    #[test]
    fn nopoke_prediction_stops_the_episode() {
        let arena = test_arena();
        let mut params = test_params(5);
        // Pin the length head to the no-poke bin.
        params.head_len.b.data_mut()[NOPOKE_BIN] = 50.0;
        let ep = run_episode(
            &Pose::new(15.0, 20.0, 0.0),
            &Pose::new(25.0, 20.0, 0.0),
            &params,
            &arena,
            &PlannerConfig::default(),
        )
        .unwrap();
        assert_eq!(ep.terminal, TerminalReason::NoPoke);
        assert!(ep.steps.is_empty());
        assert_eq!(ep.final_pose(), ep.init);
    }

    #[test]
    fn pose_after_carries_the_final_pose_forward() {
        let arena = test_arena();
        let params = test_params(6);
        let ep = run_episode(
            &Pose::new(14.0, 14.0, 0.2),
            &Pose::new(26.0, 26.0, 1.0),
            &params,
            &arena,
            &PlannerConfig::default(),
        )
        .unwrap();
        assert_eq!(ep.pose_after(0), ep.init);
        for k in 1..=ep.steps.len() {
            assert_eq!(ep.pose_after(k), ep.steps[k - 1].after);
        }
        assert_eq!(ep.pose_after(ep.steps.len() + 5), ep.final_pose());
    }

    #[test]
    fn out_of_bounds_poses_are_rejected() {
        let arena = test_arena();
        let params = test_params(7);
        let bad = Pose::new(1.0, 1.0, 0.0);
        let good = Pose::new(20.0, 20.0, 0.0);
        assert!(run_episode(&bad, &good, &params, &arena, &PlannerConfig::default()).is_err());
        assert!(run_episode(&good, &bad, &params, &arena, &PlannerConfig::default()).is_err());
    }

    #[test]
    fn zero_max_pokes_is_rejected() {
        let config = PlannerConfig {
            max_pokes: 0,
            ..PlannerConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
