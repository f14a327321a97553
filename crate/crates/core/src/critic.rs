//! Twin Q-networks, the V-network and their TD losses, plus the advantage
//! condition `ξ = tanh(min_i Q_i(s, a) - V(s))` and its discrete and fixed
//! variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::approximator::{soft_update, HiddenActivation, MlpSpec, Network, OutputActivation};
use crate::cvae::hstack;
use crate::dataset::Batch;
use crate::envs::ActionBox;
use crate::{Error, Matrix, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdvantageMode {
    Continuous,
    Discrete { epsilon: f64 },
    FixedOne,
}

impl AdvantageMode {
    pub fn validate(&self) -> Result<()> {
        if let AdvantageMode::Discrete { epsilon } = *self {
            if !(0.0..1.0).contains(&epsilon) {
                return Err(Error::Config(format!("discrete epsilon {epsilon} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for AdvantageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvantageMode::Continuous => f.write_str("continuous"),
            AdvantageMode::Discrete { epsilon } => write!(f, "discrete:{epsilon}"),
            AdvantageMode::FixedOne => f.write_str("fixed_one"),
        }
    }
}

impl FromStr for AdvantageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "continuous" => AdvantageMode::Continuous,
            "fixed_one" => AdvantageMode::FixedOne,
            other => match other.strip_prefix("discrete:") {
                Some(eps) => AdvantageMode::Discrete {
                    epsilon: eps
                        .parse()
                        .map_err(|_| Error::Config(format!("bad discrete epsilon {eps:?}")))?,
                },
                None => return Err(Error::Config(format!("unknown advantage mode {other:?}"))),
            },
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// `sgn(ξ) · 1{|ξ| > ε}`.
pub fn discretize(xi: f64, epsilon: f64) -> f64 {
    if xi.abs() > epsilon {
        xi.signum()
    } else {
        0.0
    }
}

/// Advantage condition from the two Q estimates and the state value.
pub fn xi_from_values(q1: f64, q2: f64, v: f64, mode: AdvantageMode) -> f64 {
    let xi = (q1.min(q2) - v).tanh();
    match mode {
        AdvantageMode::Continuous => xi,
        AdvantageMode::Discrete { epsilon } => discretize(xi, epsilon),
        AdvantageMode::FixedOne => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct QLoss {
    pub loss: f64,
    pub q1_grads: Vec<f64>,
    pub q2_grads: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VLoss {
    pub loss: f64,
    pub v_grads: Vec<f64>,
}

/// Q-networks read `s ∥ a` with actions in box-normalized units.
#[derive(Clone, Debug)]
pub struct CriticBundle {
    pub q1: Network,
    pub q2: Network,
    pub v: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    pub action_box: ActionBox,
    pub obs_dim: usize,
}

impl CriticBundle {
    fn specs(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Result<(MlpSpec, MlpSpec)> {
        let q = MlpSpec::new(
            obs_dim + act_dim,
            hidden.to_vec(),
            1,
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )?;
        let v = MlpSpec::new(obs_dim, hidden.to_vec(), 1, HiddenActivation::Relu, OutputActivation::Identity)?;
        Ok((q, v))
    }

    /// Fresh networks; targets start as copies of the online Q-networks.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_box: ActionBox, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let (q, v) = Self::specs(obs_dim, action_box.dim(), hidden)?;
        let q1 = Network::new(q.clone(), rng);
        let q2 = Network::new(q, rng);
        let v = Network::new(v, rng);
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            v,
            action_box,
            obs_dim,
        })
    }

    pub fn zeroed(obs_dim: usize, action_box: ActionBox, hidden: &[usize]) -> Result<Self> {
        let (q, v) = Self::specs(obs_dim, action_box.dim(), hidden)?;
        let q = Network::zeroed(q);
        Ok(Self {
            q1: q.clone(),
            q2: q.clone(),
            q1_target: q.clone(),
            q2_target: q,
            v: Network::zeroed(v),
            action_box,
            obs_dim,
        })
    }

    /// `s ∥ unit(a)`.
    pub fn q_input(&self, s: &Matrix, a: &Matrix) -> Result<Matrix> {
        if s.ncols() != self.obs_dim || a.ncols() != self.action_box.dim() || s.nrows() != a.nrows() {
            return Err(Error::Shape(format!(
                "state batch {:?} / action batch {:?} for obs_dim {} act_dim {}",
                s.dim(),
                a.dim(),
                self.obs_dim,
                self.action_box.dim()
            )));
        }
        let mut unit = a.clone();
        for mut row in unit.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.action_box.to_unit(j, *v);
            }
        }
        Ok(hstack(s.view(), unit.view()))
    }

    pub fn q_values(&self, net: &Network, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        Ok(net.predict(self.q_input(s, a)?.view())?.column(0).to_vec())
    }

    pub fn v_values(&self, s: &Matrix) -> Result<Vec<f64>> {
        Ok(self.v.predict(s.view())?.column(0).to_vec())
    }

    /// Advantage condition from the online critics.
    pub fn advantage_condition(&self, s: &Matrix, a: &Matrix, mode: AdvantageMode) -> Result<Vec<f64>> {
        if mode == AdvantageMode::FixedOne {
            self.q_input(s, a)?;
            return Ok(vec![1.0; s.nrows()]);
        }
        let q1 = self.q_values(&self.q1, s, a)?;
        let q2 = self.q_values(&self.q2, s, a)?;
        let v = self.v_values(s)?;
        Ok((0..s.nrows()).map(|i| xi_from_values(q1[i], q2[i], v[i], mode)).collect())
    }

    /// `r + γ · (1 - done) · min_j Q̂_j(s', a*)`.
    pub fn td_targets(&self, batch: &Batch, a_star: &Matrix, gamma: f64) -> Result<Vec<f64>> {
        let t1 = self.q_values(&self.q1_target, &batch.s_next, a_star)?;
        let t2 = self.q_values(&self.q2_target, &batch.s_next, a_star)?;
        Ok((0..batch.len())
            .map(|i| {
                if batch.done[i] {
                    batch.r[i]
                } else {
                    batch.r[i] + gamma * t1[i].min(t2[i])
                }
            })
            .collect())
    }

    pub fn q_td_loss(&self, batch: &Batch, a_star: &Matrix, gamma: f64) -> Result<QLoss> {
        let targets = self.td_targets(batch, a_star, gamma)?;
        self.q_loss_against(batch, &targets)
    }

    pub fn v_td_loss(&self, batch: &Batch, a_star: &Matrix, gamma: f64) -> Result<VLoss> {
        let targets = self.td_targets(batch, a_star, gamma)?;
        self.v_loss_against(batch, &targets)
    }

    /// Mean over the batch and over both Q-networks of the squared TD error.
    pub fn q_loss_against(&self, batch: &Batch, targets: &[f64]) -> Result<QLoss> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let input = self.q_input(&batch.s, &batch.a)?;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for net in [&self.q1, &self.q2] {
            let (q, tape) = net.forward(input.view())?;
            let mut up = Matrix::zeros((n, 1));
            for i in 0..n {
                let err = q[[i, 0]] - targets[i];
                loss += 0.5 * err * err / n as f64;
                up[[i, 0]] = err / n as f64;
            }
            grads.push(net.backward(&tape, up.view())?.param_grads);
        }
        let q2_grads = grads.pop().expect("two networks");
        let q1_grads = grads.pop().expect("two networks");
        Ok(QLoss { loss, q1_grads, q2_grads })
    }

    pub fn v_loss_against(&self, batch: &Batch, targets: &[f64]) -> Result<VLoss> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (v, tape) = self.v.forward(batch.s.view())?;
        let mut loss = 0.0;
        let mut up = Matrix::zeros((n, 1));
        for i in 0..n {
            let err = v[[i, 0]] - targets[i];
            loss += err * err / n as f64;
            up[[i, 0]] = 2.0 * err / n as f64;
        }
        let v_grads = self.v.backward(&tape, up.view())?.param_grads;
        Ok(VLoss { loss, v_grads })
    }

    pub fn update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.q1_target.params, &self.q1.params, tau)?;
        soft_update(&mut self.q2_target.params, &self.q2.params, tau)
    }
}
