//! Advantage-conditioned variational autoencoder.
//!
//! The encoder maps `(a ∥ c)` to a diagonal Gaussian over the latent code and
//! the decoder maps `(z ∥ c)` back to an action, where `c = s ∥ ξ` is the
//! state-advantage condition. Actions enter the encoder in box-normalized
//! units `[-1, 1]`; the decoder ends in `tanh` and [`Cvae::decode`] rescales
//! its output to the environment box. The reconstruction error is measured in
//! environment units.

use ndarray::{concatenate, s, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::approximator::{HiddenActivation, MlpSpec, Network, OutputActivation, Tape};
use crate::envs::ActionBox;
use crate::{Error, Matrix, Result};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// `c = s ∥ ξ` with `ξ ∈ [-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(s: &[f64], xi: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&xi) {
            return Err(Error::InvalidArgument(format!("advantage condition {xi} outside [-1, 1]")));
        }
        let mut c = s.to_vec();
        c.push(xi);
        Ok(Self(c))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn xi(&self) -> f64 {
        *self.0.last().expect("condition holds at least xi")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Stacks `s` and a column of advantage conditions into `c = s ∥ ξ`.
pub fn condition_matrix(s: &Matrix, xi: &[f64]) -> Matrix {
    assert_eq!(s.nrows(), xi.len(), "one advantage condition per state");
    let mut c = Matrix::zeros((s.nrows(), s.ncols() + 1));
    c.slice_mut(s![.., ..s.ncols()]).assign(s);
    for (i, &x) in xi.iter().enumerate() {
        c[[i, s.ncols()]] = x;
    }
    c
}

pub(crate) fn hstack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Matrix {
    concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

pub fn reparameterize(head: &GaussianHead, noise: &[f64]) -> Result<LatentCode> {
    if noise.len() != head.mean.len() || head.log_std.len() != head.mean.len() {
        return Err(Error::Shape(format!(
            "noise of length {} for a {}-dimensional head",
            noise.len(),
            head.mean.len()
        )));
    }
    Ok(LatentCode(
        head.mean
            .iter()
            .zip(&head.log_std)
            .zip(noise)
            .map(|((m, ls), n)| m + ls.exp() * n)
            .collect(),
    ))
}

/// `KL[N(mean, exp(log_std)^2) || N(0, I)]` in closed form.
pub fn kl_to_standard_normal(head: &GaussianHead) -> f64 {
    0.5 * head
        .mean
        .iter()
        .zip(&head.log_std)
        .map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct CvaeLoss {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub encoder_grads: Vec<f64>,
    pub decoder_grads: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Cvae {
    pub encoder: Network,
    pub decoder: Network,
    pub action_box: ActionBox,
    pub obs_dim: usize,
    pub latent_dim: usize,
}

impl Cvae {
    fn specs(obs_dim: usize, act_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<(MlpSpec, MlpSpec)> {
        let cond = obs_dim + 1;
        let enc = MlpSpec::new(
            act_dim + cond,
            hidden.to_vec(),
            2 * latent_dim,
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )?;
        let dec = MlpSpec::new(
            latent_dim + cond,
            hidden.to_vec(),
            act_dim,
            HiddenActivation::Relu,
            OutputActivation::Tanh,
        )?;
        Ok((enc, dec))
    }

    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_box: ActionBox,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let (enc, dec) = Self::specs(obs_dim, action_box.dim(), latent_dim, hidden)?;
        let encoder = Network::new(enc, rng);
        let decoder = Network::new(dec, rng);
        Ok(Self {
            encoder,
            decoder,
            action_box,
            obs_dim,
            latent_dim,
        })
    }

    /// All-zero encoder and decoder.
    pub fn zeroed(obs_dim: usize, action_box: ActionBox, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        let (enc, dec) = Self::specs(obs_dim, action_box.dim(), latent_dim, hidden)?;
        Ok(Self {
            encoder: Network::zeroed(enc),
            decoder: Network::zeroed(dec),
            action_box,
            obs_dim,
            latent_dim,
        })
    }

    pub fn act_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn to_unit(&self, a: &Matrix) -> Matrix {
        let mut u = a.clone();
        for mut row in u.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.action_box.to_unit(j, *v);
            }
        }
        u
    }

    pub fn from_unit(&self, u: &Matrix) -> Matrix {
        let mut a = u.clone();
        for mut row in a.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.action_box.from_unit(j, *v);
            }
        }
        a
    }

    fn check_condition(&self, c: &Matrix) -> Result<()> {
        if c.ncols() != self.obs_dim + 1 {
            return Err(Error::Shape(format!(
                "condition has {} columns, expected {}",
                c.ncols(),
                self.obs_dim + 1
            )));
        }
        if let Some(xi) = c.column(self.obs_dim).iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::InvalidArgument(format!("advantage condition {xi} outside [-1, 1]")));
        }
        Ok(())
    }

    /// Encoder pass returning `(mean, raw log-std before clamping, tape)`.
    fn encode_raw(&self, a_unit: &Matrix, c: &Matrix) -> Result<(Matrix, Matrix, Tape)> {
        self.check_condition(c)?;
        if a_unit.ncols() != self.act_dim() || a_unit.nrows() != c.nrows() {
            return Err(Error::Shape(format!(
                "action batch {:?} does not match condition batch {:?}",
                a_unit.dim(),
                c.dim()
            )));
        }
        let (out, tape) = self.encoder.forward(hstack(a_unit.view(), c.view()).view())?;
        let l = self.latent_dim;
        Ok((out.slice(s![.., ..l]).to_owned(), out.slice(s![.., l..]).to_owned(), tape))
    }

    pub fn encode(&self, a: &[f64], c: &ConditionVector) -> Result<GaussianHead> {
        let a = Matrix::from_shape_vec((1, a.len()), a.to_vec()).expect("row vector");
        let c = Matrix::from_shape_vec((1, c.0.len()), c.0.clone()).expect("row vector");
        let (mean, raw_ls, _) = self.encode_raw(&self.to_unit(&a), &c)?;
        Ok(GaussianHead {
            mean: mean.row(0).to_vec(),
            log_std: raw_ls.row(0).iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        })
    }

    /// Decoder pass in unit action coordinates, keeping the tape for backprop.
    pub fn decode_unit(&self, z: &Matrix, c: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_condition(c)?;
        if z.ncols() != self.latent_dim || z.nrows() != c.nrows() {
            return Err(Error::Shape(format!(
                "latent batch {:?} does not match condition batch {:?}",
                z.dim(),
                c.dim()
            )));
        }
        self.decoder.forward(hstack(z.view(), c.view()).view())
    }

    /// Decoded actions in environment units.
    pub fn decode_batch(&self, z: &Matrix, c: &Matrix) -> Result<Matrix> {
        Ok(self.from_unit(&self.decode_unit(z, c)?.0))
    }

    pub fn decode(&self, z: &[f64], c: &ConditionVector) -> Result<Vec<f64>> {
        let z = Matrix::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        let c = Matrix::from_shape_vec((1, c.0.len()), c.0.clone()).expect("row vector");
        Ok(self.decode_batch(&z, &c)?.row(0).to_vec())
    }

    /// Negative ELBO with a unit-variance Gaussian decoder, averaged over the batch.
    pub fn loss<R: Rng + ?Sized>(&self, a: &Matrix, c: &Matrix, alpha_kl: f64, rng: &mut R) -> Result<CvaeLoss> {
        let noise = Matrix::from_shape_simple_fn((a.nrows(), self.latent_dim), || rng.sample(StandardNormal));
        self.loss_with_noise(a, c, alpha_kl, &noise)
    }

    pub fn loss_with_noise(&self, a: &Matrix, c: &Matrix, alpha_kl: f64, noise: &Matrix) -> Result<CvaeLoss> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if noise.dim() != (n, self.latent_dim) {
            return Err(Error::Shape(format!("noise has shape {:?}", noise.dim())));
        }
        let a_unit = self.to_unit(a);
        let (mean, raw_ls, enc_tape) = self.encode_raw(&a_unit, c)?;
        let log_std = raw_ls.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let std = log_std.mapv(f64::exp);
        let z = &mean + &(&std * noise);
        let (y, dec_tape) = self.decode_unit(&z, c)?;

        // squared error in environment units: each unit-coordinate residual
        // is scaled by its half-range
        let mut diff = &y - &a_unit;
        for mut row in diff.rows_mut() {
            for (j, d) in row.iter_mut().enumerate() {
                *d *= self.action_box.half_range(j);
            }
        }
        let reconstruction = diff.mapv(|d| d * d).sum() / n as f64;
        let kl_terms = &mean * &mean + &log_std.mapv(|ls| (2.0 * ls).exp() - 1.0 - 2.0 * ls);
        let kl = 0.5 * kl_terms.sum() / n as f64;
        let loss = reconstruction + alpha_kl * kl;

        let inv_n = 1.0 / n as f64;
        let mut dy = diff.mapv(|d| 2.0 * d * inv_n);
        for mut row in dy.rows_mut() {
            for (j, d) in row.iter_mut().enumerate() {
                *d *= self.action_box.half_range(j);
            }
        }
        let dec_grads = self.decoder.backward(&dec_tape, dy.view())?;
        let dz = dec_grads.input_grad.slice(s![.., ..self.latent_dim]).to_owned();

        let d_mean = &dz + &(&mean * (alpha_kl * inv_n));
        let mut d_ls = &(&dz * &std) * noise;
        d_ls.zip_mut_with(&log_std, |d, &ls| *d += alpha_kl * inv_n * ((2.0 * ls).exp() - 1.0));
        // clamped entries pass no gradient
        d_ls.zip_mut_with(&raw_ls, |d, &r| {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&r) {
                *d = 0.0
            }
        });
        let upstream = hstack(d_mean.view(), d_ls.view());
        let enc_grads = self.encoder.backward(&enc_tape, upstream.view())?;

        Ok(CvaeLoss {
            loss,
            reconstruction,
            kl,
            encoder_grads: enc_grads.param_grads,
            decoder_grads: dec_grads.param_grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvSpec;
    use crate::rng::StreamRng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn jump_box() -> ActionBox {
        EnvSpec::one_step_jump().action_box()
    }

    #[test]
    fn zero_encoder_gives_unit_head() {
        let cvae = Cvae::zeroed(1, jump_box(), 2, &[8]).unwrap();
        let head = cvae.encode(&[3.0], &ConditionVector::new(&[0.0], 0.4).unwrap()).unwrap();
        assert_eq!(head.mean, vec![0.0, 0.0]);
        assert_eq!(head.log_std, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_is_deterministic_and_clamped() {
        let mut rng = StreamRng::new(1, "t");
        let mut cvae = Cvae::new(1, jump_box(), 2, &[8], &mut rng).unwrap();
        for v in &mut cvae.encoder.params.values {
            *v *= 40.0;
        }
        let c = ConditionVector::new(&[0.5], -0.3).unwrap();
        let h1 = cvae.encode(&[9.0], &c).unwrap();
        let h2 = cvae.encode(&[9.0], &c).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.log_std.iter().all(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)));
    }

    #[test]
    fn rejects_bad_condition() {
        assert!(ConditionVector::new(&[0.0], 1.5).is_err());
        let cvae = Cvae::zeroed(1, jump_box(), 2, &[4]).unwrap();
        assert!(cvae.decode_batch(&array![[0.0, 0.0]], &array![[0.0, 0.0, 0.0]]).is_err());
        assert!(cvae.decode_batch(&array![[0.0]], &array![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let head = GaussianHead {
            mean: vec![0.3, -1.0],
            log_std: vec![0.7, 0.0],
        };
        assert_eq!(reparameterize(&head, &[0.0, 0.0]).unwrap().0, head.mean);
        let unit = GaussianHead {
            mean: vec![0.3, -1.0],
            log_std: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&unit, &[0.5, 2.0]).unwrap().0, vec![0.8, 1.0]);
        let scaled = GaussianHead {
            mean: vec![0.0],
            log_std: vec![std::f64::consts::LN_2],
        };
        assert!((reparameterize(&scaled, &[1.0]).unwrap().0[0] - 2.0).abs() < 1e-15);
        assert!(reparameterize(&head, &[1.0]).is_err());
    }

    #[test]
    fn decoder_stays_in_box() {
        let mut rng = StreamRng::new(2, "t");
        let mut cvae = Cvae::new(1, jump_box(), 2, &[8], &mut rng).unwrap();
        for v in &mut cvae.decoder.params.values {
            *v *= 30.0;
        }
        for _ in 0..100 {
            let z = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let c = ConditionVector::new(&[rng.random_range(-3.0..3.0)], rng.random_range(-1.0..=1.0)).unwrap();
            let a = cvae.decode(&z, &c).unwrap();
            assert!(a[0].abs() <= 10.0);
        }
    }

    #[test]
    fn zero_decoder_gives_box_midpoint() {
        let bx = ActionBox::new(vec![-1.0, 0.0], vec![3.0, 4.0]);
        let cvae = Cvae::zeroed(2, bx, 4, &[8]).unwrap();
        let a = cvae.decode(&[0.1, 0.2, 0.3, 0.4], &ConditionVector::new(&[1.0, 2.0], 0.0).unwrap()).unwrap();
        assert_eq!(a, vec![1.0, 2.0]);
    }

    #[test]
    fn decoder_scales_tanh_to_box() {
        // one hidden unit fed by a constant bias, output pre-activation 0.1
        let mut cvae = Cvae::zeroed(1, jump_box(), 2, &[1]).unwrap();
        let layout = cvae.decoder.params.layout().to_vec();
        cvae.decoder.params.values[layout[0].bias_offset] = 1.0;
        cvae.decoder.params.values[layout[1].weight_offset] = 0.1;
        let a = cvae.decode(&[0.0, 0.0], &ConditionVector::new(&[0.0], 0.0).unwrap()).unwrap();
        assert!((a[0] - 10.0 * 0.1f64.tanh()).abs() < 1e-12);
        assert!((a[0] - 0.9967).abs() < 1e-4);
    }

    #[test]
    fn kl_closed_form() {
        let prior = GaussianHead {
            mean: vec![0.0; 3],
            log_std: vec![0.0; 3],
        };
        assert_eq!(kl_to_standard_normal(&prior), 0.0);
        let shifted = GaussianHead {
            mean: vec![1.0],
            log_std: vec![0.0],
        };
        assert_eq!(kl_to_standard_normal(&shifted), 0.5);
    }

    /// KL of a 1-D Gaussian against N(0, 1) by Simpson quadrature over ±8σ.
    fn kl_quadrature(m: f64, ls: f64) -> f64 {
        let sd = ls.exp();
        let (lo, hi) = (m - 8.0 * sd, m + 8.0 * sd);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let log_q = -0.5 * ((x - m) / sd).powi(2) - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
            log_q.exp() * (log_q - log_p)
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = StreamRng::new(3, "kl");
        for _ in 0..20 {
            let mean: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let log_std: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let quad: f64 = mean.iter().zip(&log_std).map(|(&m, &ls)| kl_quadrature(m, ls)).sum();
            let head = GaussianHead { mean, log_std };
            assert!((kl_to_standard_normal(&head) - quad).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mean in proptest::collection::vec(-5.0f64..5.0, 1..5),
            ls in -4.0f64..4.0,
        ) {
            let head = GaussianHead { log_std: vec![ls; mean.len()], mean };
            prop_assert!(kl_to_standard_normal(&head) >= 0.0);
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        // zero decoder reproduces the box midpoint; zero encoder is the prior
        let cvae = Cvae::zeroed(1, jump_box(), 2, &[4]).unwrap();
        let a = Matrix::zeros((3, 1));
        let c = condition_matrix(&Matrix::zeros((3, 1)), &[0.1, -0.2, 1.0]);
        let out = cvae.loss(&a, &c, 0.5, &mut StreamRng::new(4, "n")).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn reconstruction_is_in_environment_units() {
        let cvae = Cvae::zeroed(1, jump_box(), 2, &[4]).unwrap();
        let a = array![[3.0], [-7.0]];
        let c = condition_matrix(&array![[0.0], [0.0]], &[0.5, -0.5]);
        let out = cvae.loss_with_noise(&a, &c, 0.0, &Matrix::zeros((2, 2))).unwrap();
        assert!((out.reconstruction - 29.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_isolates_reconstruction() {
        let mut rng = StreamRng::new(5, "t");
        let cvae = Cvae::new(1, jump_box(), 2, &[8], &mut rng).unwrap();
        let a = array![[3.0], [-7.0]];
        let c = condition_matrix(&array![[0.0], [0.0]], &[0.5, -0.5]);
        let noise = array![[0.3, -0.2], [1.1, 0.4]];
        let out = cvae.loss_with_noise(&a, &c, 0.0, &noise).unwrap();
        assert_eq!(out.loss, out.reconstruction);
        assert!(out.kl > 0.0);
        assert!(cvae.loss_with_noise(&Matrix::zeros((0, 1)), &Matrix::zeros((0, 2)), 0.5, &Matrix::zeros((0, 2))).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let bx = ActionBox::new(vec![-2.0, -1.0], vec![2.0, 3.0]);
        for seed in 0..10 {
            let mut rng = StreamRng::new(seed, "fd");
            let mut cvae = Cvae::new(2, bx.clone(), 3, &[7, 6], &mut rng).unwrap();
            // zero biases can leave a pre-activation exactly on the ReLU kink
            for v in cvae.encoder.params.values.iter_mut().chain(cvae.decoder.params.values.iter_mut()) {
                *v += rng.random_range(-0.05..0.05);
            }
            let a = Matrix::from_shape_fn((4, 2), |(_, j)| rng.random_range(bx.low[j]..bx.high[j]));
            let s = Matrix::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
            let xi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = condition_matrix(&s, &xi);
            let noise = Matrix::from_shape_simple_fn((4, 3), || rng.sample(StandardNormal));
            let out = cvae.loss_with_noise(&a, &c, 0.5, &noise).unwrap();

            let check = |net_sel: usize, grads: &[f64]| {
                let mut worst: f64 = 0.0;
                for i in 0..grads.len() {
                    let eval = |delta: f64| {
                        let mut m = cvae.clone();
                        let net = if net_sel == 0 { &mut m.encoder } else { &mut m.decoder };
                        net.params.values[i] += delta;
                        m.loss_with_noise(&a, &c, 0.5, &noise).unwrap().loss
                    };
                    let p = if net_sel == 0 { cvae.encoder.params.values[i] } else { cvae.decoder.params.values[i] };
                    let h = 1e-5 * (1.0 + p.abs());
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
                    worst = worst.max(err);
                }
                worst
            };
            let e = check(0, &out.encoder_grads);
            let d = check(1, &out.decoder_grads);
            assert!(e < 1e-4 && d < 1e-4, "seed {seed}: encoder {e}, decoder {d}");
        }
    }
}
