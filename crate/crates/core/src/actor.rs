//! Latent policy `π_ω(c)` acting through the frozen CVAE decoder, its loss,
//! and a plain action-space actor used by the non-latent baselines.

use ndarray::s;
use rand::Rng;

use crate::approximator::{HiddenActivation, MlpSpec, Network, OutputActivation};
use crate::critic::CriticBundle;
use crate::cvae::{condition_matrix, hstack, ConditionVector, Cvae};
use crate::dataset::Batch;
use crate::envs::ActionBox;
use crate::{Error, Matrix, Result};

pub const DEFAULT_LATENT_BOUND: f64 = 2.0;
pub const LAMBDA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaConfig {
    pub alpha_q: f64,
}

impl LambdaConfig {
    pub fn new(alpha_q: f64) -> Result<Self> {
        if !(alpha_q > 0.0 && alpha_q.is_finite()) {
            return Err(Error::Config(format!("alpha_q must be positive, got {alpha_q}")));
        }
        Ok(Self { alpha_q })
    }
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self { alpha_q: 1.0 }
    }
}

/// `alpha_q / mean |q|`, with the mean floored at `1e-8`.
pub fn lambda_coef(q_values: &[f64], alpha_q: f64) -> Result<f64> {
    if q_values.is_empty() {
        return Err(Error::InvalidArgument("lambda of an empty batch".into()));
    }
    let mean_abs = q_values.iter().map(|q| q.abs()).sum::<f64>() / q_values.len() as f64;
    Ok(alpha_q / mean_abs.max(LAMBDA_FLOOR))
}

#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub loss: f64,
    pub q_term: f64,
    pub bc_term: f64,
    pub lambda: f64,
    pub grads: Vec<f64>,
}

/// Deterministic latent policy: `z̃ = bound · tanh(f_ω(s ∥ ξ))`.
#[derive(Clone, Debug)]
pub struct LatentActor {
    pub pi: Network,
    pub latent_bound: f64,
    pub obs_dim: usize,
}

impl LatentActor {
    fn spec(obs_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        MlpSpec::new(obs_dim + 1, hidden.to_vec(), latent_dim, HiddenActivation::Relu, OutputActivation::Tanh)
    }

    pub fn new<R: Rng + ?Sized>(obs_dim: usize, latent_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self {
            pi: Network::new(Self::spec(obs_dim, latent_dim, hidden)?, rng),
            latent_bound: DEFAULT_LATENT_BOUND,
            obs_dim,
        })
    }

    pub fn zeroed(obs_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            pi: Network::zeroed(Self::spec(obs_dim, latent_dim, hidden)?),
            latent_bound: DEFAULT_LATENT_BOUND,
            obs_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.pi.spec.output_dim
    }

    pub fn latent_batch(&self, c: &Matrix) -> Result<Matrix> {
        Ok(self.pi.predict(c.view())? * self.latent_bound)
    }

    pub fn latent(&self, c: &ConditionVector) -> Result<Vec<f64>> {
        let c = Matrix::from_shape_vec((1, c.as_slice().len()), c.as_slice().to_vec()).expect("row vector");
        Ok(self.latent_batch(&c)?.row(0).to_vec())
    }

    fn check(&self, cvae: &Cvae) -> Result<()> {
        if cvae.latent_dim != self.latent_dim() || cvae.obs_dim != self.obs_dim {
            return Err(Error::Shape(format!(
                "actor (obs {}, latent {}) does not match decoder (obs {}, latent {})",
                self.obs_dim,
                self.latent_dim(),
                cvae.obs_dim,
                cvae.latent_dim
            )));
        }
        Ok(())
    }

    /// Decoded actions in unit coordinates for a batch of conditions.
    pub fn act_unit_batch(&self, cvae: &Cvae, c: &Matrix) -> Result<Matrix> {
        self.check(cvae)?;
        let z = self.latent_batch(c)?;
        Ok(cvae.decode_unit(&z, c)?.0)
    }

    pub fn act_batch(&self, cvae: &Cvae, s: &Matrix, xi: &[f64]) -> Result<Matrix> {
        if s.ncols() != self.obs_dim || xi.len() != s.nrows() {
            return Err(Error::Shape(format!("state batch {:?} with {} conditions", s.dim(), xi.len())));
        }
        Ok(cvae.from_unit(&self.act_unit_batch(cvae, &condition_matrix(s, xi))?))
    }

    pub fn act(&self, cvae: &Cvae, s: &[f64], xi: f64) -> Result<Vec<f64>> {
        let c = ConditionVector::new(s, xi)?;
        if s.len() != self.obs_dim {
            return Err(Error::Shape(format!("state of length {} for obs_dim {}", s.len(), self.obs_dim)));
        }
        self.check(cvae)?;
        cvae.decode(&self.latent(&c)?, &c)
    }

    /// `-λ·mean Q1(s, a*) + mean ‖a_ξ - a‖²` with λ computed from this batch
    /// and held constant for differentiation.
    pub fn loss(
        &self,
        cvae: &Cvae,
        critics: &CriticBundle,
        batch: &Batch,
        xi: &[f64],
        lambda_cfg: &LambdaConfig,
        include_bc: bool,
    ) -> Result<ActorLoss> {
        self.loss_with_lambda(cvae, critics, batch, xi, LambdaSource::Batch(lambda_cfg.alpha_q), include_bc)
    }

    pub fn loss_with_lambda(
        &self,
        cvae: &Cvae,
        critics: &CriticBundle,
        batch: &Batch,
        xi: &[f64],
        lambda: LambdaSource,
        include_bc: bool,
    ) -> Result<ActorLoss> {
        self.check(cvae)?;
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if xi.len() != n {
            return Err(Error::Shape(format!("{} conditions for a batch of {n}", xi.len())));
        }
        let c_star = condition_matrix(&batch.s, &vec![1.0; n]);
        let stacked = if include_bc {
            ndarray::concatenate(ndarray::Axis(0), &[c_star.view(), condition_matrix(&batch.s, xi).view()])
                .expect("matching widths")
        } else {
            c_star
        };
        let (raw_z, pi_tape) = self.pi.forward(stacked.view())?;
        let z = &raw_z * self.latent_bound;
        let (dec, dec_tape) = cvae.decode_unit(&z, &stacked)?;
        let act_dim = cvae.act_dim();

        let mut dec_up = Matrix::zeros(dec.dim());
        let a_star = dec.slice(s![..n, ..]).to_owned();
        let (q, q_tape) = critics.q1.forward(hstack(batch.s.view(), a_star.view()).view())?;
        let qv = q.column(0).to_vec();
        let lam = match lambda {
            LambdaSource::Batch(alpha_q) => lambda_coef(&qv, alpha_q)?,
            LambdaSource::Fixed(l) => l,
        };
        let mean_q = qv.iter().sum::<f64>() / n as f64;
        let q_term = -lam * mean_q;
        let q_up = Matrix::from_elem((n, 1), -lam / n as f64);
        let q_grad = critics.q1.backward(&q_tape, q_up.view())?.input_grad;
        dec_up.slice_mut(s![..n, ..]).assign(&q_grad.slice(s![.., self.obs_dim..]));

        let mut bc_term = 0.0;
        if include_bc {
            let a_unit = cvae.to_unit(&batch.a);
            for i in 0..n {
                for j in 0..act_dim {
                    let d = dec[[n + i, j]] - a_unit[[i, j]];
                    bc_term += d * d / n as f64;
                    dec_up[[n + i, j]] = 2.0 * d / n as f64;
                }
            }
        }

        let dz = cvae.decoder.backward(&dec_tape, dec_up.view())?.input_grad;
        let pi_up = dz.slice(s![.., ..cvae.latent_dim]).to_owned() * self.latent_bound;
        let grads = self.pi.backward(&pi_tape, pi_up.view())?.param_grads;
        Ok(ActorLoss {
            loss: q_term + bc_term,
            q_term,
            bc_term,
            lambda: lam,
            grads,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSource {
    /// `alpha_q / mean |Q1|` over the current batch.
    Batch(f64),
    Fixed(f64),
}

/// Action-space actor `s -> unit action`, used by `bc` and `td3_bc`.
#[derive(Clone, Debug)]
pub struct DirectActor {
    pub pi: Network,
    pub obs_dim: usize,
    pub action_box: ActionBox,
}

impl DirectActor {
    fn spec(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        MlpSpec::new(obs_dim, hidden.to_vec(), act_dim, HiddenActivation::Relu, OutputActivation::Tanh)
    }

    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_box: ActionBox, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self {
            pi: Network::new(Self::spec(obs_dim, action_box.dim(), hidden)?, rng),
            obs_dim,
            action_box,
        })
    }

    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        let s = Matrix::from_shape_vec((1, s.len()), s.to_vec()).expect("row vector");
        let u = self.act_unit_batch(&s)?;
        Ok(u.row(0).iter().enumerate().map(|(j, v)| self.action_box.from_unit(j, *v)).collect())
    }

    pub fn act_unit_batch(&self, s: &Matrix) -> Result<Matrix> {
        self.pi.predict(s.view())
    }

    /// `-λ·mean Q1(s, π(s))` (when `critics` is given) plus `mean ‖π(s) - a‖²`.
    pub fn loss(&self, critics: Option<&CriticBundle>, batch: &Batch, lambda: LambdaSource) -> Result<ActorLoss> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (out, tape) = self.pi.forward(batch.s.view())?;
        let mut up = Matrix::zeros(out.dim());
        let mut q_term = 0.0;
        let mut lam = 0.0;
        if let Some(critics) = critics {
            let (q, q_tape) = critics.q1.forward(hstack(batch.s.view(), out.view()).view())?;
            let qv = q.column(0).to_vec();
            lam = match lambda {
                LambdaSource::Batch(alpha_q) => lambda_coef(&qv, alpha_q)?,
                LambdaSource::Fixed(l) => l,
            };
            q_term = -lam * qv.iter().sum::<f64>() / n as f64;
            let q_up = Matrix::from_elem((n, 1), -lam / n as f64);
            let g = critics.q1.backward(&q_tape, q_up.view())?.input_grad;
            up.assign(&g.slice(s![.., self.obs_dim..]));
        }
        let mut bc_term = 0.0;
        for i in 0..n {
            for j in 0..out.ncols() {
                let target = self.action_box.to_unit(j, batch.a[[i, j]]);
                let d = out[[i, j]] - target;
                bc_term += d * d / n as f64;
                up[[i, j]] += 2.0 * d / n as f64;
            }
        }
        let grads = self.pi.backward(&tape, up.view())?.param_grads;
        Ok(ActorLoss {
            loss: q_term + bc_term,
            q_term,
            bc_term,
            lambda: lam,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_coef(&[4.0, -4.0], 1.0).unwrap(), 0.25);
        assert_eq!(lambda_coef(&[0.0, 0.0], 1.0).unwrap(), 1e8);
        assert!(lambda_coef(&[], 1.0).is_err());
        assert!(LambdaConfig::new(0.0).is_err());
        assert_eq!(LambdaConfig::default().alpha_q, 1.0);
    }

    struct Fixture {
        actor: LatentActor,
        cvae: Cvae,
        critics: CriticBundle,
        batch: Batch,
        xi: Vec<f64>,
    }

    fn jitter(net: &mut Network, rng: &mut StreamRng) {
        for v in net.params.values.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = StreamRng::new(seed, "actor-fixture");
        let bx = ActionBox::new(vec![-2.0, -1.0], vec![2.0, 3.0]);
        let mut actor = LatentActor::new(3, 4, &[6, 5], &mut rng).unwrap();
        let mut cvae = Cvae::new(3, bx.clone(), 4, &[7], &mut rng).unwrap();
        let mut critics = CriticBundle::new(3, bx.clone(), &[6], &mut rng).unwrap();
        critics.q2 = Network::new(critics.q2.spec.clone(), &mut rng);
        jitter(&mut actor.pi, &mut rng);
        jitter(&mut cvae.decoder, &mut rng);
        jitter(&mut critics.q1, &mut rng);
        let n = 3;
        let batch = Batch {
            s: Matrix::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
            a: Matrix::from_shape_fn((n, 2), |(_, j)| rng.random_range(bx.low[j]..bx.high[j])),
            r: vec![0.0; n],
            s_next: Matrix::zeros((n, 3)),
            done: vec![false; n],
        };
        let xi = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Fixture { actor, cvae, critics, batch, xi }
    }

    #[test]
    fn act_is_deterministic_and_in_box() {
        let f = fixture(1);
        let mut rng = StreamRng::new(2, "s");
        for _ in 0..200 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let xi = rng.random_range(-1.0..=1.0);
            let a = f.actor.act(&f.cvae, &s, xi).unwrap();
            assert!(f.cvae.action_box.contains(&a));
            assert_eq!(a, f.actor.act(&f.cvae, &s, xi).unwrap());
        }
        assert!(f.actor.act(&f.cvae, &[0.0; 2], 0.0).is_err());
        assert!(f.actor.act(&f.cvae, &[0.0; 3], 1.5).is_err());
    }

    #[test]
    fn zero_networks_act_at_box_midpoint() {
        let bx = ActionBox::new(vec![-10.0, 0.0], vec![10.0, 4.0]);
        let actor = LatentActor::zeroed(1, 4, &[5]).unwrap();
        let cvae = Cvae::zeroed(1, bx, 4, &[5]).unwrap();
        for xi in [-1.0, 0.0, 0.7] {
            assert_eq!(actor.act(&cvae, &[3.0], xi).unwrap(), vec![0.0, 2.0]);
        }
    }

    #[test]
    fn empty_objective_gives_zero() {
        let f = fixture(3);
        let out = f
            .actor
            .loss_with_lambda(&f.cvae, &f.critics, &f.batch, &f.xi, LambdaSource::Fixed(0.0), false)
            .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn bc_term_vanishes_on_perfect_imitation() {
        let mut f = fixture(4);
        let c = condition_matrix(&f.batch.s, &f.xi);
        f.batch.a = f.cvae.from_unit(&f.actor.act_unit_batch(&f.cvae, &c).unwrap());
        let out = f
            .actor
            .loss_with_lambda(&f.cvae, &f.critics, &f.batch, &f.xi, LambdaSource::Fixed(0.0), true)
            .unwrap();
        assert!(out.bc_term < 1e-25, "{}", out.bc_term);
    }

    #[test]
    fn q_term_reads_q1_only() {
        let f = fixture(5);
        let base = f.actor.loss(&f.cvae, &f.critics, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap();
        let mut other = f.critics.clone();
        other.q2.set_output_bias(&[1e3]);
        other.q1_target.set_output_bias(&[-1e3]);
        let same = f.actor.loss(&f.cvae, &other, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap();
        assert_eq!(base.loss, same.loss);
        assert_eq!(base.grads, same.grads);
        other.q1.set_output_bias(&[5.0]);
        let moved = f.actor.loss(&f.cvae, &other, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap();
        assert_ne!(base.q_term, moved.q_term);
    }

    #[test]
    fn decoder_is_never_touched() {
        let f = fixture(6);
        let before = f.cvae.decoder.params.clone();
        let out = f.actor.loss(&f.cvae, &f.critics, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap();
        assert_eq!(out.grads.len(), f.actor.pi.params.len());
        assert!(f.cvae.decoder.params.bit_eq(&before));
        let mut moved = f.cvae.clone();
        moved.decoder.params.values[0] += 0.3;
        let other = f.actor.loss(&moved, &f.critics, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap();
        assert_ne!(out.loss, other.loss);
        assert_eq!(other.grads.len(), f.actor.pi.params.len());
    }

    #[test]
    fn q_term_is_scale_invariant() {
        let f = fixture(7);
        let base = f.actor.loss(&f.cvae, &f.critics, &f.batch, &f.xi, &LambdaConfig::default(), false).unwrap();
        let mut scaled = f.critics.clone();
        let last = *scaled.q1.params.layout().last().unwrap();
        for v in &mut scaled.q1.params.values[last.weight_offset..] {
            *v *= 7.5;
        }
        let out = f.actor.loss(&f.cvae, &scaled, &f.batch, &f.xi, &LambdaConfig::default(), false).unwrap();
        assert!((out.q_term - base.q_term).abs() < 1e-12);
        assert!((out.lambda * 7.5 - base.lambda).abs() < 1e-9 * base.lambda);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let f = fixture(100 + seed);
            let lam = f.actor.loss(&f.cvae, &f.critics, &f.batch, &f.xi, &LambdaConfig::default(), true).unwrap().lambda;
            for include_bc in [true, false] {
                let loss = |a: &LatentActor| {
                    a.loss_with_lambda(&f.cvae, &f.critics, &f.batch, &f.xi, LambdaSource::Fixed(lam), include_bc)
                        .unwrap()
                };
                let g = loss(&f.actor).grads;
                let mut worst: f64 = 0.0;
                for i in 0..g.len() {
                    let at = |d: f64| {
                        let mut a = f.actor.clone();
                        a.pi.params.values[i] += d;
                        loss(&a).loss
                    };
                    let h = 1e-5 * (1.0 + f.actor.pi.params.values[i].abs());
                    let fd = (at(h) - at(-h)) / (2.0 * h);
                    worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
                }
                assert!(worst < 1e-4, "seed {seed} bc {include_bc}: {worst}");
            }
        }
    }

    #[test]
    fn direct_actor_gradients_match_finite_differences() {
        for seed in 0..10 {
            let f = fixture(200 + seed);
            let mut rng = StreamRng::new(seed, "direct");
            let mut actor = DirectActor::new(3, f.cvae.action_box.clone(), &[6], &mut rng).unwrap();
            jitter(&mut actor.pi, &mut rng);
            for critics in [Some(&f.critics), None] {
                let loss = |a: &DirectActor| a.loss(critics, &f.batch, LambdaSource::Fixed(0.7)).unwrap();
                let g = loss(&actor).grads;
                for i in 0..g.len() {
                    let at = |d: f64| {
                        let mut a = actor.clone();
                        a.pi.params.values[i] += d;
                        loss(&a).loss
                    };
                    let h = 1e-5 * (1.0 + actor.pi.params.values[i].abs());
                    let fd = (at(h) - at(-h)) / (2.0 * h);
                    let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                    assert!(err < 1e-4, "seed {seed} param {i}: {err}");
                }
            }
        }
    }

    #[test]
    fn latent_stays_within_bound() {
        let f = fixture(8);
        let c = array![[100.0, -100.0, 50.0, 1.0]];
        let z = f.actor.latent_batch(&c).unwrap();
        assert!(z.iter().all(|v| v.abs() <= DEFAULT_LATENT_BOUND));
    }
}
