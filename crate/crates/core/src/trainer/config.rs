//! Training configuration as flat `key = value` text, and the variant factory.

use std::fmt;
use std::str::FromStr;

use crate::critic::AdvantageMode;
use crate::envs::EnvKind;
use crate::{Error, Result};

pub const DEFAULT_DISCRETE_EPSILON: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VariantKind {
    A2po,
    A2poFixedXi,
    A2poDiscreteXi { epsilon: f64 },
    A2poNoBc,
    CvaePolicyOnly,
    Bc,
    Td3Bc,
}

impl VariantKind {
    pub fn uses_latent_actor(self) -> bool {
        matches!(
            self,
            VariantKind::A2po | VariantKind::A2poFixedXi | VariantKind::A2poDiscreteXi { .. } | VariantKind::A2poNoBc
        )
    }

    pub fn uses_cvae(self) -> bool {
        self.uses_latent_actor() || self == VariantKind::CvaePolicyOnly
    }

    pub fn uses_critics(self) -> bool {
        self != VariantKind::Bc
    }

    pub fn uses_direct_actor(self) -> bool {
        matches!(self, VariantKind::Bc | VariantKind::Td3Bc)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantKind::A2po => f.write_str("a2po"),
            VariantKind::A2poFixedXi => f.write_str("a2po_fixed_xi"),
            VariantKind::A2poDiscreteXi { epsilon } => write!(f, "a2po_discrete_xi:{epsilon}"),
            VariantKind::A2poNoBc => f.write_str("a2po_no_bc"),
            VariantKind::CvaePolicyOnly => f.write_str("cvae_policy_only"),
            VariantKind::Bc => f.write_str("bc"),
            VariantKind::Td3Bc => f.write_str("td3_bc"),
        }
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "a2po" => VariantKind::A2po,
            "a2po_fixed_xi" => VariantKind::A2poFixedXi,
            "a2po_discrete_xi" => VariantKind::A2poDiscreteXi {
                epsilon: DEFAULT_DISCRETE_EPSILON,
            },
            "a2po_no_bc" => VariantKind::A2poNoBc,
            "cvae_policy_only" => VariantKind::CvaePolicyOnly,
            "bc" => VariantKind::Bc,
            "td3_bc" => VariantKind::Td3Bc,
            other => match other.strip_prefix("a2po_discrete_xi:") {
                Some(eps) => {
                    let epsilon: f64 = eps
                        .parse()
                        .map_err(|_| Error::Config(format!("bad discrete epsilon {eps:?}")))?;
                    AdvantageMode::Discrete { epsilon }.validate()?;
                    VariantKind::A2poDiscreteXi { epsilon }
                }
                None => return Err(Error::Config(format!("unknown variant {other:?}"))),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub variant: VariantKind,
    pub total_steps: u64,
    pub cvae_steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub alpha_kl: f64,
    pub alpha_q: f64,
    pub advantage_mode: AdvantageMode,
    pub include_bc: bool,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub hidden: Vec<usize>,
    /// 0 selects twice the action dimension.
    pub latent_dim: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::OneStepJump,
            variant: VariantKind::A2po,
            total_steps: 20_000,
            cvae_steps: 5_000,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            alpha_kl: 0.5,
            alpha_q: 1.0,
            advantage_mode: AdvantageMode::Continuous,
            include_bc: true,
            seed: 0,
            eval_every: 1_000,
            eval_episodes: 10,
            hidden: vec![64, 64],
            latent_dim: 0,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "env",
    "variant",
    "total_steps",
    "cvae_steps",
    "batch_size",
    "gamma",
    "tau",
    "lr",
    "alpha_kl",
    "alpha_q",
    "advantage_mode",
    "include_bc",
    "seed",
    "eval_every",
    "eval_episodes",
    "hidden",
    "latent_dim",
    "policy_noise",
    "noise_clip",
    "policy_delay",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Sets one field from its text form; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "env" => self.env = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "cvae_steps" => self.cvae_steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "alpha_kl" => self.alpha_kl = parse_num(key, value)?,
            "alpha_q" => self.alpha_q = parse_num(key, value)?,
            "advantage_mode" => self.advantage_mode = value.parse()?,
            "include_bc" => self.include_bc = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse_num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "policy_noise" => self.policy_noise = parse_num(key, value)?,
            "noise_clip" => self.noise_clip = parse_num(key, value)?,
            "policy_delay" => self.policy_delay = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; keys outside this config are returned untouched
    /// so callers can layer their own settings on the same file.
    pub fn parse_lenient(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut extra = Vec::new();
        for (key, value) in parse_pairs(text)? {
            if Self::is_key(&key) {
                cfg.set(&key, &value)?;
            } else {
                extra.push((key, value));
            }
        }
        Ok((cfg, extra))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (cfg, extra) = Self::parse_lenient(text)?;
        if let Some((key, _)) = extra.first() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("variant", self.variant.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("cvae_steps", self.cvae_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("lr", self.lr.to_string()),
            ("alpha_kl", self.alpha_kl.to_string()),
            ("alpha_q", self.alpha_q.to_string()),
            ("advantage_mode", self.advantage_mode.to_string()),
            ("include_bc", self.include_bc.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("hidden", hidden.join(",")),
            ("latent_dim", self.latent_dim.to_string()),
            ("policy_noise", self.policy_noise.to_string()),
            ("noise_clip", self.noise_clip.to_string()),
            ("policy_delay", self.policy_delay.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if self.cvae_steps > self.total_steps {
            return fail(format!("cvae_steps {} exceeds total_steps {}", self.cvae_steps, self.total_steps));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.alpha_kl >= 0.0 && self.alpha_kl.is_finite()) {
            return fail(format!("alpha_kl {} must be non-negative", self.alpha_kl));
        }
        if !(self.alpha_q > 0.0 && self.alpha_q.is_finite()) {
            return fail(format!("alpha_q {} must be positive", self.alpha_q));
        }
        self.advantage_mode.validate()?;
        if self.eval_episodes == 0 {
            return fail("eval_episodes must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden widths must be a non-empty list of positive integers".into());
        }
        if !(self.policy_noise >= 0.0 && self.noise_clip >= 0.0) {
            return fail("policy_noise and noise_clip must be non-negative".into());
        }
        if self.policy_delay == 0 {
            return fail("policy_delay must be at least 1".into());
        }
        Ok(())
    }

    /// The advantage mode after the variant's overrides.
    pub fn effective_mode(&self) -> AdvantageMode {
        match self.variant {
            VariantKind::A2poFixedXi => AdvantageMode::FixedOne,
            VariantKind::A2poDiscreteXi { epsilon } => AdvantageMode::Discrete { epsilon },
            _ => self.advantage_mode,
        }
    }

    pub fn effective_bc(&self) -> bool {
        self.include_bc && self.variant != VariantKind::A2poNoBc
    }

    pub fn effective_latent_dim(&self, act_dim: usize) -> usize {
        if self.latent_dim == 0 {
            2 * act_dim
        } else {
            self.latent_dim
        }
    }
}

/// `key = value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
