//! Toy continuous-control tasks and scripted behavior policies.
//!
//! `one_step_jump` is a one-dimensional bandit: from position 0 the agent
//! jumps to `a ∈ [-10, 10]` and the episode ends. A far goal at 7 pays 10,
//! a near goal at -6 pays 5, obstacle bands pay -1 and everything else
//! costs `0.1 * |a|`.
//!
//! `point_mass` moves a point in the plane by `0.25 * action` per step for
//! 20 steps, paying the negative distance to the goal at (2, 2).

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::{Error, Result};

const JUMP_FAR_GOAL: f64 = 7.0;
const JUMP_NEAR_GOAL: f64 = -6.0;
const JUMP_GOAL_RADIUS: f64 = 0.5;
const JUMP_EXPERT_NOISE: f64 = 0.15;
const JUMP_MEDIUM_NOISE: f64 = 1.5;

const POINT_GOAL: [f64; 2] = [2.0, 2.0];
const POINT_STEP_SCALE: f64 = 0.25;
const POINT_START_HALF_WIDTH: f64 = 1.0;
const POINT_GAIN: f64 = 2.0;
const POINT_EXPERT_NOISE: f64 = 0.05;
const POINT_MEDIUM_NOISE: f64 = 0.4;

const MEDIUM_RANDOM_PROB: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnvKind {
    OneStepJump,
    PointMass,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::OneStepJump => "one_step_jump",
            EnvKind::PointMass => "point_mass",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step_jump" => Ok(EnvKind::OneStepJump),
            "point_mass" => Ok(EnvKind::PointMass),
            other => Err(Error::InvalidArgument(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn one_step_jump() -> Self {
        Self {
            kind: EnvKind::OneStepJump,
            obs_dim: 1,
            act_dim: 1,
            action_low: vec![-10.0],
            action_high: vec![10.0],
            horizon: 1,
            gamma: 1.0,
        }
    }

    pub fn point_mass() -> Self {
        Self {
            kind: EnvKind::PointMass,
            obs_dim: 4,
            act_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            horizon: 20,
            gamma: 0.99,
        }
    }

    pub fn from_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::OneStepJump => Self::one_step_jump(),
            EnvKind::PointMass => Self::point_mass(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn action_box(&self) -> ActionBox {
        ActionBox::new(self.action_low.clone(), self.action_high.clone())
    }

    /// Corner of the start square, `[low, high]` per position coordinate.
    pub fn start_square(&self) -> Option<(f64, f64)> {
        match self.kind {
            EnvKind::OneStepJump => None,
            EnvKind::PointMass => Some((-POINT_START_HALF_WIDTH, POINT_START_HALF_WIDTH)),
        }
    }
}

/// Axis-aligned action bounds with the affine map to and from `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        assert!(low.iter().zip(&high).all(|(l, h)| l < h), "empty action box");
        Self { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn mid(&self, j: usize) -> f64 {
        0.5 * (self.low[j] + self.high[j])
    }

    pub fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.high[j] - self.low[j])
    }

    pub fn to_unit(&self, j: usize, a: f64) -> f64 {
        (a - self.mid(j)) / self.half_range(j)
    }

    pub fn from_unit(&self, j: usize, u: f64) -> f64 {
        self.mid(j) + self.half_range(j) * u
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim()
            && a.iter()
                .enumerate()
                .all(|(j, &v)| v >= self.low[j] && v <= self.high[j])
    }

    pub fn clamp(&self, a: &mut [f64]) -> bool {
        let mut clamped = false;
        for (j, v) in a.iter_mut().enumerate() {
            let c = v.clamp(self.low[j], self.high[j]);
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        clamped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub terminated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    /// Whether the action had to be clamped into the action box.
    pub clamped: bool,
}

pub fn reset<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> EnvState {
    let observation = match spec.kind {
        EnvKind::OneStepJump => vec![0.0],
        EnvKind::PointMass => {
            let px = rng.random_range(-POINT_START_HALF_WIDTH..=POINT_START_HALF_WIDTH);
            let py = rng.random_range(-POINT_START_HALF_WIDTH..=POINT_START_HALF_WIDTH);
            point_observation(px, py)
        }
    };
    EnvState {
        observation,
        step_index: 0,
        terminated: false,
    }
}

fn point_observation(px: f64, py: f64) -> Vec<f64> {
    vec![px, py, POINT_GOAL[0] - px, POINT_GOAL[1] - py]
}

/// Reward table of the jump task.
pub fn jump_reward(a: f64) -> f64 {
    if (a - JUMP_FAR_GOAL).abs() <= JUMP_GOAL_RADIUS {
        10.0
    } else if (a - JUMP_NEAR_GOAL).abs() <= JUMP_GOAL_RADIUS {
        5.0
    } else if (2.0..=5.0).contains(&a) || (-4.0..=-2.0).contains(&a) {
        -1.0
    } else {
        -0.1 * a.abs()
    }
}

/// True when a jump lands in the far (r = 10) goal.
pub fn jump_hits_far_goal(a: f64) -> bool {
    (a - JUMP_FAR_GOAL).abs() <= JUMP_GOAL_RADIUS
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if state.terminated {
        return Err(Error::Env("step called on a terminated episode".into()));
    }
    if action.len() != spec.act_dim || state.observation.len() != spec.obs_dim {
        return Err(Error::Shape(format!(
            "{} expects obs {} / action {}, got obs {} / action {}",
            spec.name(),
            spec.obs_dim,
            spec.act_dim,
            state.observation.len(),
            action.len()
        )));
    }
    let mut a = action.to_vec();
    let clamped = spec.action_box().clamp(&mut a);
    let step_index = state.step_index + 1;

    let (observation, reward, terminated) = match spec.kind {
        EnvKind::OneStepJump => (vec![a[0]], jump_reward(a[0]), true),
        EnvKind::PointMass => {
            let px = state.observation[0] + POINT_STEP_SCALE * a[0];
            let py = state.observation[1] + POINT_STEP_SCALE * a[1];
            let dist = ((px - POINT_GOAL[0]).powi(2) + (py - POINT_GOAL[1]).powi(2)).sqrt();
            (point_observation(px, py), -dist, step_index >= spec.horizon)
        }
    };
    Ok(StepOutcome {
        next: EnvState {
            observation,
            step_index,
            terminated,
        },
        reward,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorTier {
    Random,
    Medium,
    Expert,
}

impl BehaviorTier {
    pub const ALL: [BehaviorTier; 3] = [BehaviorTier::Random, BehaviorTier::Medium, BehaviorTier::Expert];

    pub fn name(self) -> &'static str {
        match self {
            BehaviorTier::Random => "random",
            BehaviorTier::Medium => "medium",
            BehaviorTier::Expert => "expert",
        }
    }
}

impl fmt::Display for BehaviorTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BehaviorTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorTier::Random),
            "medium" => Ok(BehaviorTier::Medium),
            "expert" => Ok(BehaviorTier::Expert),
            other => Err(Error::InvalidArgument(format!("unknown behavior tier {other:?}"))),
        }
    }
}

fn uniform_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    spec.action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(&lo, &hi)| rng.random_range(lo..=hi))
        .collect()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    sigma * n
}

pub fn scripted_action<R: Rng + ?Sized>(
    spec: &EnvSpec,
    tier: BehaviorTier,
    state: &EnvState,
    rng: &mut R,
) -> Vec<f64> {
    if tier == BehaviorTier::Random
        || (tier == BehaviorTier::Medium && rng.random_bool(MEDIUM_RANDOM_PROB))
    {
        return uniform_action(spec, rng);
    }
    let mut action = match spec.kind {
        EnvKind::OneStepJump => {
            if tier == BehaviorTier::Expert {
                vec![JUMP_FAR_GOAL + gaussian(rng, JUMP_EXPERT_NOISE)]
            } else {
                let center = if rng.random_bool(0.5) {
                    JUMP_FAR_GOAL
                } else {
                    JUMP_NEAR_GOAL
                };
                vec![center + gaussian(rng, JUMP_MEDIUM_NOISE)]
            }
        }
        EnvKind::PointMass => {
            let sigma = if tier == BehaviorTier::Expert {
                POINT_EXPERT_NOISE
            } else {
                POINT_MEDIUM_NOISE
            };
            (0..2)
                .map(|j| POINT_GAIN * state.observation[2 + j] + gaussian(rng, sigma))
                .collect()
        }
    };
    spec.action_box().clamp(&mut action);
    action
}

pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if expert_ref.partial_cmp(&random_ref) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!(
            "expert reference {expert_ref} must exceed random reference {random_ref}"
        )));
    }
    Ok(100.0 * (raw - random_ref) / (expert_ref - random_ref))
}

/// Mean undiscounted return of one scripted episode per draw.
pub fn scripted_episode_return<R: Rng + ?Sized>(spec: &EnvSpec, tier: BehaviorTier, rng: &mut R) -> f64 {
    let mut state = reset(spec, rng);
    let mut ret = 0.0;
    while !state.terminated {
        let a = scripted_action(spec, tier, &state, rng);
        let out = step(spec, &state, &a).expect("scripted actions are well-formed");
        ret += out.reward;
        state = out.next;
    }
    ret
}

/// Episodes used to estimate the normalization anchors.
pub const REFERENCE_EPISODES: usize = 10_000;

/// `(random_ref, expert_ref)`: Monte-Carlo mean returns of the random and
/// expert scripted tiers, computed once per environment from a fixed seed.
pub fn reference_returns(kind: EnvKind) -> (f64, f64) {
    static JUMP: OnceLock<(f64, f64)> = OnceLock::new();
    static POINT: OnceLock<(f64, f64)> = OnceLock::new();
    let cell = match kind {
        EnvKind::OneStepJump => &JUMP,
        EnvKind::PointMass => &POINT,
    };
    *cell.get_or_init(|| {
        let spec = EnvSpec::from_kind(kind);
        let mean = |tier: BehaviorTier| {
            let mut rng = StreamRng::new(0, &format!("reference/{}", tier.name()));
            (0..REFERENCE_EPISODES)
                .map(|_| scripted_episode_return(&spec, tier, &mut rng))
                .sum::<f64>()
                / REFERENCE_EPISODES as f64
        };
        (mean(BehaviorTier::Random), mean(BehaviorTier::Expert))
    })
}

/// Normalized score against this environment's reference returns.
pub fn env_normalized_score(kind: EnvKind, raw: f64) -> f64 {
    let (lo, hi) = reference_returns(kind);
    normalized_score(raw, lo, hi).expect("expert reference exceeds random reference")
}
