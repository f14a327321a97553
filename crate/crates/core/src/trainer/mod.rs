//! The training loop: per-step ordering of batch sampling, advantage
//! conditions, CVAE, critic, actor and target updates, plus the ablation
//! variants and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_pairs, TrainConfig, VariantKind, DEFAULT_DISCRETE_EPSILON};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actor::{DirectActor, LambdaConfig, LambdaSource, LatentActor};
use crate::approximator::AdamConfig;
use crate::critic::CriticBundle;
use crate::cvae::{condition_matrix, ConditionVector, Cvae};
use crate::dataset::{sample_indices, Batch, OfflineDataset};
use crate::envs::EnvSpec;
use crate::evalsuite::{evaluate, Policy};
use crate::rng::StreamRng;
use crate::{Error, Matrix, Result};

/// Policy delay of the `td3_bc` reference, as in TD3.
pub const TD3_POLICY_DELAY: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Sample,
    Xi,
    Cvae,
    Critic,
    Actor,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub norm_score: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cvae_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub v_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub actor_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSummary>,
}

impl StepMetrics {
    fn new(step: u64) -> Self {
        Self {
            step,
            cvae_loss: None,
            recon: None,
            kl: None,
            q_loss: None,
            v_loss: None,
            actor_loss: None,
            lambda: None,
            xi_mean: None,
            xi_min: None,
            xi_max: None,
            eval: None,
        }
    }
}

fn finite(step: u64, name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { step, loss: name })
    }
}

/// Everything a run carries between steps. Components a variant does not
/// use are `None`.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub spec: EnvSpec,
    pub step: u64,
    pub rng: StreamRng,
    pub cvae: Option<Cvae>,
    pub critics: Option<CriticBundle>,
    pub actor: Option<LatentActor>,
    pub direct: Option<DirectActor>,
}

impl TrainState {
    /// Fresh networks drawn from the run's "init" stream.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec::from_kind(config.env);
        let mut init = StreamRng::new(config.seed, "init");
        let v = config.variant;
        let latent = config.effective_latent_dim(spec.act_dim);
        let bx = spec.action_box();
        let cvae = v
            .uses_cvae()
            .then(|| Cvae::new(spec.obs_dim, bx.clone(), latent, &config.hidden, &mut init))
            .transpose()?;
        let critics = v
            .uses_critics()
            .then(|| CriticBundle::new(spec.obs_dim, bx.clone(), &config.hidden, &mut init))
            .transpose()?;
        let actor = v
            .uses_latent_actor()
            .then(|| LatentActor::new(spec.obs_dim, latent, &config.hidden, &mut init))
            .transpose()?;
        let direct = v
            .uses_direct_actor()
            .then(|| DirectActor::new(spec.obs_dim, bx.clone(), &config.hidden, &mut init))
            .transpose()?;
        Ok(Self {
            rng: StreamRng::new(config.seed, "train"),
            config,
            spec,
            step: 0,
            cvae,
            critics,
            actor,
            direct,
        })
    }

    /// Named networks in a fixed order, used by checkpoints.
    pub fn networks(&self) -> Vec<(&'static str, &crate::approximator::Network)> {
        let mut out = Vec::new();
        if let Some(c) = &self.cvae {
            out.push(("cvae.encoder", &c.encoder));
            out.push(("cvae.decoder", &c.decoder));
        }
        if let Some(c) = &self.critics {
            out.push(("critic.q1", &c.q1));
            out.push(("critic.q2", &c.q2));
            out.push(("critic.v", &c.v));
            out.push(("critic.q1_target", &c.q1_target));
            out.push(("critic.q2_target", &c.q2_target));
        }
        if let Some(a) = &self.actor {
            out.push(("actor.pi", &a.pi));
        }
        if let Some(d) = &self.direct {
            out.push(("direct.pi", &d.pi));
        }
        out
    }

    pub(crate) fn networks_mut(&mut self) -> Vec<(&'static str, &mut crate::approximator::Network)> {
        let mut out = Vec::new();
        if let Some(c) = &mut self.cvae {
            out.push(("cvae.encoder", &mut c.encoder));
            out.push(("cvae.decoder", &mut c.decoder));
        }
        if let Some(c) = &mut self.critics {
            out.push(("critic.q1", &mut c.q1));
            out.push(("critic.q2", &mut c.q2));
            out.push(("critic.v", &mut c.v));
            out.push(("critic.q1_target", &mut c.q1_target));
            out.push(("critic.q2_target", &mut c.q2_target));
        }
        if let Some(a) = &mut self.actor {
            out.push(("actor.pi", &mut a.pi));
        }
        if let Some(d) = &mut self.direct {
            out.push(("direct.pi", &mut d.pi));
        }
        out
    }

    /// Bitwise equality of step, rng position and every network.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.networks(), other.networks());
        self.config == other.config
            && self.step == other.step
            && self.rng.state() == other.rng.state()
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, x), (nb, y))| na == nb && x.params.bit_eq(&y.params))
    }

    pub fn check_dataset(&self, dataset: &OfflineDataset) -> Result<()> {
        if dataset.spec.kind != self.config.env {
            return Err(Error::Config(format!(
                "dataset is for {} but the config trains on {}",
                dataset.spec.kind, self.config.env
            )));
        }
        if self.config.batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                self.config.batch_size,
                dataset.len()
            )));
        }
        Ok(())
    }

    /// Unit-coordinate actions used inside TD targets at `s'`, before noise.
    fn target_actions_unit(&self, s_next: &Matrix) -> Result<Matrix> {
        let n = s_next.nrows();
        match (&self.actor, &self.cvae, &self.direct) {
            (Some(actor), Some(cvae), _) => actor.act_unit_batch(cvae, &condition_matrix(s_next, &vec![1.0; n])),
            (None, Some(cvae), _) => Ok(cvae
                .decode_unit(&Matrix::zeros((n, cvae.latent_dim)), &condition_matrix(s_next, &vec![1.0; n]))?
                .0),
            (_, _, Some(direct)) => direct.act_unit_batch(s_next),
            _ => Err(Error::Config("variant has no policy to bootstrap from".into())),
        }
    }

    /// One iteration of the loop, reporting phase boundaries to `probe`.
    pub fn step_probed(&mut self, dataset: &OfflineDataset, probe: &mut dyn FnMut(Phase)) -> Result<StepMetrics> {
        self.check_dataset(dataset)?;
        let i = self.step + 1;
        let cfg = self.config.clone();
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut m = StepMetrics::new(i);

        probe(Phase::Sample);
        let idx = sample_indices(dataset, cfg.batch_size, &mut self.rng)?;
        let rows: Vec<_> = idx.iter().map(|&k| &dataset.transitions[k]).collect();
        let batch = Batch::from_transitions(&rows);
        let n = batch.len();

        probe(Phase::Xi);
        let xi = match &self.critics {
            Some(critics) if cfg.variant.uses_cvae() => {
                let xi = critics.advantage_condition(&batch.s, &batch.a, cfg.effective_mode())?;
                m.xi_mean = Some(xi.iter().sum::<f64>() / n as f64);
                m.xi_min = Some(xi.iter().copied().fold(f64::INFINITY, f64::min));
                m.xi_max = Some(xi.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                Some(xi)
            }
            _ => None,
        };

        if let (Some(cvae), Some(xi)) = (&mut self.cvae, &xi) {
            if i <= cfg.cvae_steps {
                probe(Phase::Cvae);
                let c = condition_matrix(&batch.s, xi);
                let out = cvae.loss(&batch.a, &c, cfg.alpha_kl, &mut self.rng)?;
                m.cvae_loss = Some(finite(i, "cvae_loss", out.loss)?);
                m.recon = Some(out.reconstruction);
                m.kl = Some(out.kl);
                cvae.encoder.adam_step(&out.encoder_grads, &adam)?;
                cvae.decoder.adam_step(&out.decoder_grads, &adam)?;
            }
        }

        let smoothed = if self.critics.is_some() {
            probe(Phase::Critic);
            let mut a_star = self.target_actions_unit(&batch.s_next)?;
            let noise_clip = cfg.noise_clip;
            a_star.mapv_inplace(|u| {
                let eps: f64 = self.rng.sample::<f64, _>(StandardNormal) * cfg.policy_noise;
                (u + eps.clamp(-noise_clip, noise_clip)).clamp(-1.0, 1.0)
            });
            Some(a_star)
        } else {
            None
        };
        if let (Some(critics), Some(mut a_star)) = (&mut self.critics, smoothed) {
            let bx = critics.action_box.clone();
            for mut row in a_star.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = bx.from_unit(j, *v);
                }
            }
            let targets = critics.td_targets(&batch, &a_star, cfg.gamma)?;
            let q = critics.q_loss_against(&batch, &targets)?;
            m.q_loss = Some(finite(i, "q_loss", q.loss)?);
            let train_v = cfg.variant.uses_cvae();
            let v = if train_v {
                let v = critics.v_loss_against(&batch, &targets)?;
                m.v_loss = Some(finite(i, "v_loss", v.loss)?);
                Some(v)
            } else {
                None
            };
            critics.q1.adam_step(&q.q1_grads, &adam)?;
            critics.q2.adam_step(&q.q2_grads, &adam)?;
            if let Some(v) = v {
                critics.v.adam_step(&v.v_grads, &adam)?;
            }
        }

        let delay = if cfg.variant == VariantKind::Td3Bc {
            TD3_POLICY_DELAY
        } else {
            cfg.policy_delay
        };
        if i.is_multiple_of(delay) {
            if let (Some(actor), Some(cvae), Some(critics), Some(xi)) = (&mut self.actor, &self.cvae, &self.critics, &xi) {
                probe(Phase::Actor);
                let out = actor.loss(cvae, critics, &batch, xi, &LambdaConfig::new(cfg.alpha_q)?, cfg.effective_bc())?;
                m.actor_loss = Some(finite(i, "actor_loss", out.loss)?);
                m.lambda = Some(out.lambda);
                actor.pi.adam_step(&out.grads, &adam)?;
            } else if let Some(direct) = &mut self.direct {
                probe(Phase::Actor);
                let out = direct.loss(self.critics.as_ref(), &batch, LambdaSource::Batch(cfg.alpha_q))?;
                m.actor_loss = Some(finite(i, "actor_loss", out.loss)?);
                if self.critics.is_some() {
                    m.lambda = Some(out.lambda);
                }
                direct.pi.adam_step(&out.grads, &adam)?;
            }
        }

        if let Some(critics) = &mut self.critics {
            probe(Phase::Target);
            critics.update_targets(cfg.tau)?;
        }
        self.step = i;
        Ok(m)
    }

    pub fn train_step(&mut self, dataset: &OfflineDataset) -> Result<StepMetrics> {
        self.step_probed(dataset, &mut |_| {})
    }

    /// Environment evaluation at the optimal condition, on a stream keyed by
    /// the step so it never perturbs training.
    pub fn evaluate_at(&self, step: u64) -> Result<EvalSummary> {
        let mut rng = StreamRng::new(self.config.seed, &format!("eval/{step}"));
        let r = evaluate(self, &self.spec, 1.0, self.config.eval_episodes, &mut rng)?;
        Ok(EvalSummary {
            mean: r.mean_return,
            std: r.std_return,
            norm_score: r.normalized_score,
        })
    }
}

impl Policy for TrainState {
    fn act(&self, s: &[f64], xi: f64) -> Result<Vec<f64>> {
        match (&self.actor, &self.cvae, &self.direct) {
            (Some(actor), Some(cvae), _) => actor.act(cvae, s, xi),
            (None, Some(cvae), _) => {
                let c = ConditionVector::new(s, xi)?;
                cvae.decode(&vec![0.0; cvae.latent_dim], &c)
            }
            (_, _, Some(direct)) => direct.act(s),
            _ => Err(Error::Config("variant has no policy".into())),
        }
    }

    fn latent(&self, s: &[f64], xi: f64) -> Result<Option<Vec<f64>>> {
        match (&self.actor, &self.cvae) {
            (Some(actor), Some(_)) => Ok(Some(actor.latent(&ConditionVector::new(s, xi)?)?)),
            (None, Some(cvae)) => {
                ConditionVector::new(s, xi)?;
                Ok(Some(vec![0.0; cvae.latent_dim]))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Continues `state` to `config.total_steps`, handing each step's metrics to
/// `sink` as it is produced.
pub fn run_from(
    state: &mut TrainState,
    dataset: &OfflineDataset,
    sink: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    state.check_dataset(dataset)?;
    while state.step < state.config.total_steps {
        let mut m = state.train_step(dataset)?;
        let every = state.config.eval_every;
        if every > 0 && m.step % every == 0 {
            m.eval = Some(state.evaluate_at(m.step)?);
        }
        sink(&m)?;
    }
    Ok(())
}

pub fn run(config: &TrainConfig, dataset: &OfflineDataset, variant: VariantKind) -> Result<RunResult> {
    let mut config = config.clone();
    config.variant = variant;
    let mut state = TrainState::new(config)?;
    let mut metrics = Vec::new();
    run_from(&mut state, dataset, &mut |m| {
        metrics.push(m.clone());
        Ok(())
    })?;
    Ok(RunResult { state, metrics })
}
