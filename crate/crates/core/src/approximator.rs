//! Dense multilayer perceptrons with exact backward passes.
//!
//! Parameters of one network live in a single flat [`ParamSet`]. Layer `l`
//! stores its weight matrix row-major with shape `(fan_out, fan_in)` followed
//! by its bias vector. Batches are [`Matrix`] values with one sample per row.
//!
//! Every network in the crate (encoder, decoder, actor, Q and V) is an
//! instance of this module.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::{Error, Matrix, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Shape("input and output dims must be >= 1".into()));
        }
        if hidden_dims.is_empty() || hidden_dims.contains(&0) {
            return Err(Error::Shape(
                "need at least one hidden layer, every width >= 1".into(),
            ));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            hidden_activation,
            output_activation,
        })
    }

    /// `(fan_in, fan_out)` for each layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &width in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, width));
            fan_in = width;
        }
        dims
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset = slot.bias_offset + fan_out;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Location of one layer inside a flat parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    fn weights<'a>(&self, values: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &values[self.weight_offset..self.bias_offset],
        )
        .expect("layout is consistent with the flat array")
    }

    fn bias<'a>(&self, values: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&values[self.bias_offset..self.bias_offset + self.fan_out])
    }
}

/// Flat parameters of one network plus its Adam state.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
    layout: Vec<LayerSlot>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            values: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
            layout: spec.layout(),
        }
    }

    /// Rebuilds a parameter set from raw arrays, checking them against `spec`.
    pub fn from_parts(
        spec: &MlpSpec,
        values: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
        step_count: u64,
    ) -> Result<Self> {
        let n = spec.param_count();
        if values.len() != n || adam_m.len() != n || adam_v.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} parameters, got values={} m={} v={}",
                values.len(),
                adam_m.len(),
                adam_v.len()
            )));
        }
        Ok(Self {
            values,
            adam_m,
            adam_v,
            step_count,
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of values, moments and step count.
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.step_count == other.step_count
            && same(&self.values, &other.values)
            && same(&self.adam_m, &other.adam_m)
            && same(&self.adam_v, &other.adam_v)
    }

    fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            hash ^= v.to_bits();
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }

    fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(Error::Shape(
                "parameter layout does not match the network spec".into(),
            ));
        }
        Ok(())
    }
}

/// Activations cached by [`mlp_forward`]; `activations[0]` is the input and
/// `activations[l + 1]` the post-activation output of layer `l`.
#[derive(Clone, Debug)]
pub struct Tape {
    activations: Vec<Matrix>,
    fingerprint: u64,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

#[derive(Clone, Debug)]
pub struct GradBundle {
    pub param_grads: Vec<f64>,
    pub input_grad: Matrix,
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, x: ArrayView2<f64>) -> Result<(Matrix, Tape)> {
    params.check_spec(spec)?;
    if x.ncols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "network expects {} inputs, got {}",
            spec.input_dim,
            x.ncols()
        )));
    }
    let n_layers = params.layout.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(x.to_owned());
    for (l, slot) in params.layout.iter().enumerate() {
        let input = &activations[l];
        let mut out = Matrix::zeros((input.nrows(), slot.fan_out));
        out += &slot.bias(&params.values);
        general_mat_mul(1.0, input, &slot.weights(&params.values).t(), 1.0, &mut out);
        if l + 1 < n_layers {
            match spec.hidden_activation {
                HiddenActivation::Relu => out.mapv_inplace(|v| v.max(0.0)),
                HiddenActivation::Tanh => out.mapv_inplace(f64::tanh),
            }
        } else if spec.output_activation == OutputActivation::Tanh {
            out.mapv_inplace(f64::tanh);
        }
        activations.push(out);
    }
    let y = activations[n_layers].clone();
    Ok((
        y,
        Tape {
            activations,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Single-sample convenience wrapper around [`mlp_forward`].
pub fn mlp_forward_one(spec: &MlpSpec, params: &ParamSet, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (y, tape) = mlp_forward(spec, params, view)?;
    Ok((y.into_raw_vec_and_offset().0, tape))
}

/// Vector-Jacobian product of the network at the taped point.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamSet,
    tape: &Tape,
    upstream: ArrayView2<f64>,
) -> Result<GradBundle> {
    params.check_spec(spec)?;
    if tape.fingerprint != params.fingerprint() || tape.activations.len() != params.layout.len() + 1 {
        return Err(Error::Shape(
            "tape was not produced with these parameters".into(),
        ));
    }
    let out = tape.output();
    if upstream.dim() != out.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient has shape {:?}, output has {:?}",
            upstream.dim(),
            out.dim()
        )));
    }

    let mut grads = vec![0.0; params.len()];
    let mut delta = upstream.to_owned();
    if spec.output_activation == OutputActivation::Tanh {
        delta.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
    }

    let mut input_grad = Matrix::zeros((0, 0));
    for l in (0..params.layout.len()).rev() {
        let slot = params.layout[l];
        let input = &tape.activations[l];
        {
            let mut dw = ArrayViewMut2::from_shape(
                (slot.fan_out, slot.fan_in),
                &mut grads[slot.weight_offset..slot.bias_offset],
            )
            .expect("layout is consistent with the flat array");
            general_mat_mul(1.0, &delta.t(), input, 0.0, &mut dw);
        }
        let db: Array1<f64> = delta.sum_axis(Axis(0));
        grads[slot.bias_offset..slot.bias_offset + slot.fan_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));

        let mut back = delta.dot(&slot.weights(&params.values));
        if l == 0 {
            input_grad = back;
            break;
        }
        match spec.hidden_activation {
            HiddenActivation::Relu => back.zip_mut_with(input, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            }),
            HiddenActivation::Tanh => back.zip_mut_with(input, |d, &a| *d *= 1.0 - a * a),
        }
        delta = back;
    }

    Ok(GradBundle {
        param_grads: grads,
        input_grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update. Nothing is mutated if `grads` is rejected.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }

    params.step_count += 1;
    let t = params.step_count as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(params.adam_m.iter_mut())
        .zip(params.adam_v.iter_mut())
        .zip(grads)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after Adam update".into()));
    }
    Ok(())
}

/// Polyak averaging `target <- (1 - tau) * target + tau * online`.
///
/// Only parameter values move; the target's optimizer state is left alone.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if target.layout != online.layout {
        return Err(Error::Shape("soft update between different layouts".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must be in (0, 1], got {tau}")));
    }
    if tau == 1.0 {
        target.values.copy_from_slice(&online.values);
        return Ok(());
    }
    // t + tau * (o - t) keeps t == o as an exact fixed point.
    for (t, &o) in target.values.iter_mut().zip(&online.values) {
        *t += tau * (o - *t);
    }
    Ok(())
}

/// Weights uniform in `±sqrt(1 / fan_in)`, biases zero, fresh optimizer state.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamSet {
    let mut params = ParamSet::zeros(spec);
    for slot in spec.layout() {
        let bound = (1.0 / slot.fan_in as f64).sqrt();
        for w in &mut params.values[slot.weight_offset..slot.bias_offset] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    params
}

/// A network spec bundled with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = init_params(&spec, rng);
        Self { spec, params }
    }

    pub fn zeroed(spec: MlpSpec) -> Self {
        let params = ParamSet::zeros(&spec);
        Self { spec, params }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Matrix, Tape)> {
        mlp_forward(&self.spec, &self.params, x)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<GradBundle> {
        mlp_backward(&self.spec, &self.params, tape, upstream)
    }

    pub fn adam_step(&mut self, grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, grads, cfg)
    }

    /// Overwrites the bias of the output layer, leaving everything else intact.
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        let slot = *self.params.layout.last().expect("at least one layer");
        self.params.values[slot.bias_offset..slot.bias_offset + slot.fan_out].copy_from_slice(bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(i: usize, h: &[usize], o: usize, ha: HiddenActivation, oa: OutputActivation) -> MlpSpec {
        MlpSpec::new(i, h.to_vec(), o, ha, oa).unwrap()
    }

    #[test]
    fn rejects_degenerate_specs() {
        use HiddenActivation::Relu;
        use OutputActivation::Identity;
        assert!(MlpSpec::new(0, vec![4], 1, Relu, Identity).is_err());
        assert!(MlpSpec::new(2, vec![], 1, Relu, Identity).is_err());
        assert!(MlpSpec::new(2, vec![4, 0], 1, Relu, Identity).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(3, &[5, 5], 2, HiddenActivation::Tanh, OutputActivation::Identity);
        let net = Network::zeroed(s);
        let y = net.predict(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn one_one_one_relu_network() {
        let s = spec(1, &[1], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut net = Network::zeroed(s);
        let layout = net.params.layout().to_vec();
        for slot in &layout {
            net.params.values[slot.weight_offset] = 1.0;
        }
        let y = net.predict(array![[2.0]].view()).unwrap();
        assert_eq!(y, array![[2.0]]);
    }

    #[test]
    fn tanh_output_is_bounded() {
        let s = spec(2, &[8], 3, HiddenActivation::Relu, OutputActivation::Tanh);
        let mut rng = StreamRng::new(1, "t");
        let mut net = Network::new(s, &mut rng);
        for v in &mut net.params.values {
            *v *= 50.0;
        }
        let y = net.predict(array![[30.0, -40.0]].view()).unwrap();
        assert!(y.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let s = spec(3, &[4], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let net = Network::zeroed(s);
        assert!(matches!(net.predict(array![[1.0, 2.0]].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let s = spec(3, &[6], 2, HiddenActivation::Tanh, OutputActivation::Tanh);
        let mut rng = StreamRng::new(2, "t");
        let net = Network::new(s, &mut rng);
        let (y, tape) = net.forward(array![[0.3, -0.1, 0.7]].view()).unwrap();
        let g = net.backward(&tape, Matrix::zeros(y.dim()).view()).unwrap();
        assert!(g.param_grads.iter().all(|&v| v == 0.0));
        assert!(g.input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_chain_rule() {
        // 1-1-1 with identity-like path: relu hidden weight 1, output weight w.
        let s = spec(1, &[1], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut net = Network::zeroed(s);
        let layout = net.params.layout().to_vec();
        net.params.values[layout[0].weight_offset] = 1.0;
        let w = 1.7;
        net.params.values[layout[1].weight_offset] = w;
        let x = 0.8;
        let (_, tape) = net.forward(array![[x]].view()).unwrap();
        let g = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.param_grads[layout[1].weight_offset], x);
        assert_eq!(g.input_grad[[0, 0]], w);
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let s = spec(2, &[4], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut rng = StreamRng::new(3, "t");
        let a = Network::new(s.clone(), &mut rng);
        let b = Network::new(s, &mut rng);
        let (_, tape) = a.forward(array![[1.0, 2.0]].view()).unwrap();
        assert!(b.backward(&tape, array![[1.0]].view()).is_err());
    }

    fn fd_check(s: MlpSpec, seed: u64, batch: usize) -> f64 {
        let mut rng = StreamRng::new(seed, "fd");
        let net = Network::new(s.clone(), &mut rng);
        let x = Matrix::from_shape_fn((batch, s.input_dim), |_| rng.random_range(-1.0..1.0));
        let up = Matrix::from_shape_fn((batch, s.output_dim), |_| rng.random_range(-1.0..1.0));
        let (_, tape) = net.forward(x.view()).unwrap();
        let g = net.backward(&tape, up.view()).unwrap();
        let loss = |n: &Network, x: &Matrix| (n.predict(x.view()).unwrap() * &up).sum();

        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let p = net.params.values[i];
            let h = 1e-5 * (1.0 + p.abs());
            let mut plus = net.clone();
            plus.params.values[i] = p + h;
            let mut minus = net.clone();
            minus.params.values[i] = p - h;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            worst = worst.max(rel_err(g.param_grads[i], fd));
        }
        for idx in 0..x.len() {
            let (r, c) = (idx / s.input_dim, idx % s.input_dim);
            let h = 1e-5 * (1.0 + x[[r, c]].abs());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            worst = worst.max(rel_err(g.input_grad[[r, c]], fd));
        }
        worst
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for ha in [HiddenActivation::Relu, HiddenActivation::Tanh] {
            for oa in [OutputActivation::Identity, OutputActivation::Tanh] {
                for seed in 0..10 {
                    let err = fd_check(spec(3, &[16], 2, ha, oa), seed, 4);
                    assert!(err < 1e-4, "{ha:?}/{oa:?} seed {seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn deep_network_gradients_match_finite_differences() {
        let err = fd_check(spec(4, &[8, 7, 6], 3, HiddenActivation::Tanh, OutputActivation::Tanh), 11, 5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let s = spec(2, &[3], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut rng = StreamRng::new(4, "t");
        let mut p = init_params(&s, &mut rng);
        let before = p.values.clone();
        let zeros = vec![0.0; p.len()];
        adam_step(&mut p, &zeros, &AdamConfig::default()).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(p.step_count, 1);

        // moments left by an earlier step decay geometrically under zero gradients
        let ones = vec![1.0; p.len()];
        adam_step(&mut p, &ones, &AdamConfig::default()).unwrap();
        let m_before = p.adam_m.clone();
        adam_step(&mut p, &zeros, &AdamConfig::default()).unwrap();
        for (m, m0) in p.adam_m.iter().zip(&m_before) {
            assert!((m - 0.9 * m0).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let s = spec(1, &[1], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut p = ParamSet::zeros(&s);
        let mut grads = vec![0.0; p.len()];
        grads[0] = 2.5;
        grads[1] = -0.01;
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grads, &cfg).unwrap();
        // Step one: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
        assert!((p.values[0] + cfg.lr * 2.5 / (2.5 + 1e-8)).abs() < 1e-15);
        assert!((p.values[1] - cfg.lr * 0.01 / (0.01 + 1e-8)).abs() < 1e-15);
        assert_eq!(AdamConfig::default().lr, 3e-4);
    }

    #[test]
    fn adam_rejects_non_finite_without_mutation() {
        let s = spec(1, &[2], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut rng = StreamRng::new(5, "t");
        let mut p = init_params(&s, &mut rng);
        let before = p.clone();
        let mut grads = vec![0.1; p.len()];
        grads[2] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &grads, &AdamConfig::default()), Err(Error::NonFinite(_))));
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn soft_update_limits() {
        let s = spec(2, &[4], 2, HiddenActivation::Relu, OutputActivation::Identity);
        let mut rng = StreamRng::new(6, "t");
        let online = init_params(&s, &mut rng);
        let mut target = init_params(&s, &mut rng);
        target.adam_m.iter_mut().for_each(|m| *m = 9.0);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.values, online.values);
        assert!(target.adam_m.iter().all(|&m| m == 9.0));

        let mut same = online.clone();
        soft_update(&mut same, &online, 0.005).unwrap();
        assert!(same.bit_eq(&online));

        let other = spec(2, &[5], 2, HiddenActivation::Relu, OutputActivation::Identity);
        let mut bad = ParamSet::zeros(&other);
        assert!(soft_update(&mut bad, &online, 0.5).is_err());
    }

    #[test]
    fn soft_update_interpolates() {
        let s = spec(1, &[1], 1, HiddenActivation::Relu, OutputActivation::Identity);
        let mut t = ParamSet::zeros(&s);
        let mut o = ParamSet::zeros(&s);
        o.values.iter_mut().for_each(|v| *v = 1.0);
        soft_update(&mut t, &o, 0.005).unwrap();
        assert!(t.values.iter().all(|&v| (v - 0.005).abs() < 1e-15));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(4, &[64, 64], 3, HiddenActivation::Relu, OutputActivation::Identity);
        let a = init_params(&s, &mut StreamRng::new(9, "init"));
        let b = init_params(&s, &mut StreamRng::new(9, "init"));
        assert!(a.bit_eq(&b));
        for slot in a.layout() {
            let bound = (1.0 / slot.fan_in as f64).sqrt();
            let w = &a.values[slot.weight_offset..slot.bias_offset];
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert!(a.values[slot.bias_offset..slot.bias_offset + slot.fan_out]
                .iter()
                .all(|&b| b == 0.0));
        }
        // fan_in = 4 for the first layer
        assert!(a.values[..4 * 64].iter().all(|v| v.abs() <= 0.5));
    }

    proptest! {
        #[test]
        fn adam_commutes_with_permutation(
            vals in proptest::collection::vec(-1.0f64..1.0, 9),
            grads in proptest::collection::vec(-1.0f64..1.0, 9),
            seed in 0u64..1000,
        ) {
            // 2-2-1 network has 2*2+2 + 2*1+1 = 9 parameters.
            let s = spec(2, &[2], 1, HiddenActivation::Relu, OutputActivation::Identity);
            let mut perm: Vec<usize> = (0..9).collect();
            let mut rng = StreamRng::new(seed, "perm");
            for i in (1..9).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut a = ParamSet::from_parts(&s, vals.clone(), vec![0.0; 9], vec![0.0; 9], 0).unwrap();
            let mut b = ParamSet::from_parts(
                &s,
                perm.iter().map(|&i| vals[i]).collect(),
                vec![0.0; 9],
                vec![0.0; 9],
                0,
            ).unwrap();
            let cfg = AdamConfig::default();
            for _ in 0..3 {
                adam_step(&mut a, &grads, &cfg).unwrap();
                let pg: Vec<f64> = perm.iter().map(|&i| grads[i]).collect();
                adam_step(&mut b, &pg, &cfg).unwrap();
            }
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.values[i].to_bits(), b.values[j].to_bits());
                prop_assert_eq!(a.adam_v[i].to_bits(), b.adam_v[j].to_bits());
            }
        }
    }
}
