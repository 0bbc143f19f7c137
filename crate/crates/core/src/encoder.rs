//! Toy-scale twin encoders: an MLP with tanh hidden layers and an
//! L2-normalized output, explicit reverse-mode gradients, SGD with momentum
//! and weight decay under a cosine schedule, and the momentum (EMA) update
//! that lets the class encoder trail the feature encoder.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, l2_normalize, norm, normalize_backward, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Mat::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.same_shape(&other.weight) && self.bias.len() == other.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Layer>,
    /// Bumped on every mutation so a tape can tell it has gone stale.
    generation: u64,
}

/// Activations recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// tanh outputs of the hidden layers.
    hidden: Vec<Vec<f64>>,
    /// Final pre-normalization output.
    raw: Vec<f64>,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// Random MLP with the given layer widths (`[input, hidden.., output]`).
    /// Weights are `N(0, 1/fan_in)`, biases zero.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!("invalid encoder widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weight: Mat::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers, generation: 0 })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(format!("layer {i} bias of {}", l.outputs()), l.bias.len()));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::shape(
                    format!("layer {i} input width {}", layers[i - 1].outputs()),
                    l.inputs(),
                ));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Single linear layer equal to the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Mat::identity(dim),
                bias: vec![0.0; dim],
            }],
            generation: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Flat parameter buffers in a fixed order: weight then bias per layer.
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Distance `‖θ − other‖` over all parameters.
    pub fn distance(&self, other: &EncoderParams) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape("identical encoder shapes", "different shapes"));
        }
        let sq: f64 = self
            .buffers()
            .iter()
            .zip(other.buffers())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum();
        Ok(sq.sqrt())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("input width {}", self.input_dim()), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.weight.matvec(&cur)?;
            for (yi, bi) in y.iter_mut().zip(&layer.bias) {
                *yi += bi;
            }
            inputs.push(cur);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
                hidden.push(y.clone());
            }
            cur = y;
        }
        if !cur.iter().all(|v| v.is_finite()) || !norm(&cur).is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let feature = l2_normalize(&cur)?;
        Ok((
            feature,
            Tape {
                generation: self.generation,
                inputs,
                hidden,
                raw: cur,
            },
        ))
    }

    /// Forward pass without keeping the tape.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(f, _)| f)
    }

    /// Reverse-mode gradients of a scalar loss given `∂L/∂feature`, including
    /// the Jacobian of the final normalization.
    pub fn backward(&self, tape: &Tape, grad_feature: &[f64]) -> Result<ParamGrads> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape {
                tape: tape.generation,
                params: self.generation,
            });
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::shape(self.layers.len(), tape.inputs.len()));
        }
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.inputs(), l.outputs()))
            .collect();
        let mut g = normalize_backward(&tape.raw, grad_feature)?;
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (gi, h) in g.iter_mut().zip(&tape.hidden[i]) {
                    *gi *= 1.0 - h * h;
                }
            }
            let x = &tape.inputs[i];
            let gl = &mut grads[i];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    axpy(gr, x, gl.weight.row_mut(r));
                }
            }
            gl.bias.copy_from_slice(&g);
            if i > 0 {
                g = self.layers[i].weight.matvec_t(&g)?;
            }
        }
        Ok(ParamGrads { layers: grads })
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, b.weight.as_slice(), a.weight.as_mut_slice());
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|&x| x == 0.0))
    }
}

/// `lr0 · ½ (1 + cos(π · step / total))`
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Invalid("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond total {total_steps}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// SGD with momentum and L2 weight decay over a fixed list of flat buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub total_steps: u64,
    step: u64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        lr0: f64,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
        total_steps: u64,
        buffer_lens: &[usize],
    ) -> Self {
        Self {
            lr0,
            momentum,
            weight_decay,
            schedule,
            total_steps,
            step: 0,
            velocity: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Optimizer for every buffer of `params`.
    pub fn for_params(
        params: &EncoderParams,
        lr0: f64,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
        total_steps: u64,
    ) -> Self {
        let lens: Vec<usize> = params.buffers().iter().map(|b| b.len()).collect();
        Self::new(lr0, momentum, weight_decay, schedule, total_steps, &lens)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn current_lr(&self) -> Result<f64> {
        match self.schedule {
            LrSchedule::Constant => Ok(self.lr0),
            LrSchedule::Cosine => cosine_lr(self.step.min(self.total_steps), self.total_steps, self.lr0),
        }
    }

    /// `v ← μ v + (g + λ θ)`, `θ ← θ − lr · v`. `decay[i]` selects whether
    /// buffer `i` receives weight decay. Returns the learning rate used.
    pub fn step_buffers(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        decay: &[bool],
    ) -> Result<f64> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape(
                format!("{} buffers", self.velocity.len()),
                format!("{} params / {} grads / {} flags", params.len(), grads.len(), decay.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.velocity[i].len() || g.len() != p.len() {
                return Err(Error::shape(self.velocity[i].len(), format!("{} / {}", p.len(), g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient in buffer {i}")));
            }
        }
        let lr = self.current_lr()?;
        for (((p, g), v), &wd) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(decay) {
            let lambda = if wd { self.weight_decay } else { 0.0 };
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + lambda * *pi);
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

/// One SGD step on every encoder buffer, all with weight decay.
pub fn sgd_step(params: &mut EncoderParams, grads: &ParamGrads, opt: &mut OptimizerState) -> Result<f64> {
    let g = grads.buffers();
    let decay = vec![true; g.len()];
    let mut p = params.buffers_mut();
    opt.step_buffers(&mut p, &g, &decay)
}

/// `θ_ce ← γ θ_ce + (1 − γ) θ_fe`, entrywise.
pub fn momentum_update(class_enc: &mut EncoderParams, feature_enc: &EncoderParams, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("momentum factor must lie in [0, 1], got {gamma}")));
    }
    if !class_enc.same_shape(feature_enc) {
        return Err(Error::shape("identical encoder shapes", "different shapes"));
    }
    let src = feature_enc.buffers();
    for (dst, s) in class_enc.buffers_mut().into_iter().zip(src) {
        for (d, x) in dst.iter_mut().zip(s) {
            *d = gamma * *d + (1.0 - gamma) * x;
        }
    }
    Ok(())
}

/// Anything that maps an input vector to a unit-norm feature.
pub trait FeatureExtractor: Sync {
    fn extract(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl FeatureExtractor for EncoderParams {
    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.embed(x)
    }
}

/// Uses the L2-normalized input itself as the feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedInput;

impl FeatureExtractor for NormalizedInput {
    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(x)
    }
}

/// Scalar parameters of an FC head storing one center per identity.
pub fn fc_head_params(dim: usize, identities: usize) -> usize {
    dim * identities
}

/// Scalar parameters of a container holding `capacity` centers.
pub fn dcc_head_params(dim: usize, capacity: usize) -> usize {
    dim * capacity
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, max_relative_error, DEFAULT_FD_STEP};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature_norm_ok(v: &[f64]) -> bool {
        (norm(v) - 1.0).abs() <= 1e-12
    }

    #[test]
    fn identity_encoder_passes_unit_input() {
        let enc = EncoderParams::identity(3);
        let x = l2_normalize(&[0.2, -0.5, 0.1]).unwrap();
        let f = enc.embed(&x).unwrap();
        for (a, b) in f.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_bias_direction() {
        let enc = EncoderParams::from_layers(vec![Layer {
            weight: Mat::zeros(2, 3),
            bias: vec![3.0, 4.0],
        }])
        .unwrap();
        let f = enc.embed(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(f[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::random(&[6, 10, 4], &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(feature_norm_ok(&enc.embed(&x).unwrap()));
        }
        assert!(enc.embed(&[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderParams::random(&[3, 5, 2], &mut rng).unwrap();
        let (_, tape) = enc.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(enc.backward(&tape, &[0.0, 0.0]).unwrap().is_zero());
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EncoderParams::random(&[3, 2], &mut rng).unwrap();
        let (_, tape) = enc.forward(&[0.1, 0.2, 0.3]).unwrap();
        let snapshot = enc.clone();
        momentum_update(&mut enc, &snapshot, 0.5).unwrap();
        assert!(matches!(enc.backward(&tape, &[1.0, 0.0]), Err(Error::StaleTape { .. })));
    }

    /// Loss `u · f(x)` so that `∂L/∂f = u`.
    fn check_against_fd(widths: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::random(widths, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, tape) = enc.forward(&x).unwrap();
        let grads = enc.backward(&tape, &u).unwrap();
        for (li, layer) in enc.layers().iter().enumerate() {
            let w = layer.weight.as_slice().to_vec();
            let fd_w = finite_diff_grad(
                |probe| {
                    let mut e = enc.clone();
                    e.layers[li].weight.as_mut_slice().copy_from_slice(probe);
                    dot(&u, &e.embed(&x).unwrap())
                },
                &w,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let err = max_relative_error(grads.layers[li].weight.as_slice(), &fd_w, 1e-6);
            assert!(err < 1e-5, "layer {li} weight rel err {err}");
            let fd_b = finite_diff_grad(
                |probe| {
                    let mut e = enc.clone();
                    e.layers[li].bias.copy_from_slice(probe);
                    dot(&u, &e.embed(&x).unwrap())
                },
                &layer.bias,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let err = max_relative_error(&grads.layers[li].bias, &fd_b, 1e-6);
            assert!(err < 1e-5, "layer {li} bias rel err {err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_against_fd(&[4, 3], 10);
        check_against_fd(&[5, 6, 3], 11);
        check_against_fd(&[4, 7, 5, 3], 12);
    }

    #[test]
    fn linear_two_by_two_chain_rule() {
        // f = normalize(W x), W = I, x = (3, 4): raw = (3, 4), u = (0.6, 0.8)
        let enc = EncoderParams::identity(2);
        let (_, tape) = enc.forward(&[3.0, 4.0]).unwrap();
        let g_unit = [1.0, 0.0];
        let grads = enc.backward(&tape, &g_unit).unwrap();
        // g_raw = (g − u (u·g)) / 5 = ((1 − 0.36), −0.48) / 5
        let g_raw = [0.64 / 5.0, -0.48 / 5.0];
        let gw = &grads.layers[0].weight;
        for r in 0..2 {
            for c in 0..2 {
                let x = [3.0, 4.0][c];
                assert_abs_diff_eq!(gw[(r, c)], g_raw[r] * x, epsilon = 1e-15);
            }
        }
        assert_abs_diff_eq!(grads.layers[0].bias[0], g_raw[0], epsilon = 1e-15);
    }

    fn scalar_encoder(v: f64) -> EncoderParams {
        EncoderParams::from_layers(vec![Layer {
            weight: Mat::from_vec(1, 1, vec![v]).unwrap(),
            bias: vec![0.0],
        }])
        .unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_encoder(2.0);
        let mut opt = OptimizerState::for_params(&p, 0.1, 0.9, 0.0, LrSchedule::Constant, 10);
        let zero = ParamGrads::zeros_like(&p);
        sgd_step(&mut p, &zero, &mut opt).unwrap();
        assert_eq!(p.layers()[0].weight[(0, 0)], 2.0);

        let mut p = scalar_encoder(2.0);
        let mut opt = OptimizerState::for_params(&p, 0.1, 0.9, 0.0005, LrSchedule::Constant, 10);
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].weight[(0, 0)] = 0.5;
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert_abs_diff_eq!(p.layers()[0].weight[(0, 0)], 2.0 - 0.1 * (0.5 + 0.0005 * 2.0), epsilon = 1e-15);
        assert_eq!(opt.step(), 1);

        // v1 = g, v2 = 0.9 g + g: displacement lr g (1 + 1.9)
        let mut p = scalar_encoder(0.0);
        let mut opt = OptimizerState::for_params(&p, 0.1, 0.9, 0.0, LrSchedule::Constant, 10);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert_abs_diff_eq!(p.layers()[0].weight[(0, 0)], -0.1 * 0.5 * 2.9, epsilon = 1e-15);

        g.layers[0].weight[(0, 0)] = f64::NAN;
        assert!(sgd_step(&mut p, &g, &mut opt).is_err());
    }

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert_abs_diff_eq!(cosine_lr(100, 100, 0.1).unwrap(), 0.0, epsilon = 1e-17);
        assert_abs_diff_eq!(cosine_lr(50, 100, 0.1).unwrap(), 0.05, epsilon = 1e-15);
        assert!(cosine_lr(0, 0, 0.1).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 0.1).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn momentum_update_examples() {
        let fe = scalar_encoder(0.0);
        let mut ce = scalar_encoder(1.0);
        momentum_update(&mut ce, &fe, 1.0).unwrap();
        assert_eq!(ce.layers()[0].weight[(0, 0)], 1.0);
        momentum_update(&mut ce, &fe, 0.999).unwrap();
        assert_eq!(ce.layers()[0].weight[(0, 0)], 0.999);
        momentum_update(&mut ce, &fe, 0.0).unwrap();
        assert_eq!(ce.layers()[0].weight[(0, 0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = EncoderParams::random(&[2, 2], &mut rng).unwrap();
        assert!(momentum_update(&mut ce, &other, 0.5).is_err());
        assert!(momentum_update(&mut ce, &fe, 1.5).is_err());
    }

    #[test]
    fn momentum_contracts_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fe = EncoderParams::random(&[5, 8, 3], &mut rng).unwrap();
        let mut ce = EncoderParams::random(&[5, 8, 3], &mut rng).unwrap();
        let d0 = ce.distance(&fe).unwrap();
        for n in 1..=1000 {
            momentum_update(&mut ce, &fe, 0.999).unwrap();
            let expected = 0.999f64.powi(n) * d0;
            assert!(((ce.distance(&fe).unwrap() - expected) / expected).abs() < 1e-10);
            assert!(ce.same_shape(&fe));
        }
    }

    #[test]
    fn head_parameter_counts() {
        assert_eq!(fc_head_params(512, 93431), 47_836_672);
        assert_eq!(dcc_head_params(512, 27648), 14_155_776);
        let ratio = 14_155_776.0f64 / 47_836_672.0;
        assert!((ratio - 0.296).abs() < 5e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(EncoderParams::random(&[64, 64, 32], &mut rng).unwrap().param_count(), 64 * 64 + 64 + 64 * 32 + 32);
    }
}
