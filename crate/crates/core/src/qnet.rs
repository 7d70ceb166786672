//! Dueling two-stream Q-network: two fully connected hidden layers feeding a
//! scalar state-value head and a two-wide advantage head,
//!
//! ```text
//! Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a')
//! ```
//!
//! Gradients are computed in closed form (no autodiff); the adaptive-moment
//! optimizer lives next to the network because it owns per-parameter state.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};

pub const ACTIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|x| x.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    fn apply1(self, mut z: Array1<f64>) -> Array1<f64> {
        match self {
            Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
        z
    }

    /// Multiplies `grad` in place by the derivative, given pre-activation `z`
    /// and activation output `a`.
    fn backprop(self, grad: &mut Array2<f64>, z: &Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(z).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(a).for_each(|g, &a| *g *= 1.0 - a * a),
        }
    }
}

/// Layer sizes and activation; fixes the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub activation: Activation,
}

impl NetShape {
    pub fn new(input_dim: usize) -> Self {
        NetShape {
            input_dim,
            hidden: [512, 256],
            activation: Activation::Relu,
        }
    }

    pub fn with_hidden(mut self, h1: usize, h2: usize) -> Self {
        self.hidden = [h1, h2];
        self
    }

    pub fn param_count(&self) -> usize {
        let [h1, h2] = self.hidden;
        self.input_dim * h1 + h1 + h1 * h2 + h2 + h2 + 1 + h2 * ACTIONS + ACTIONS
    }
}

/// Weights and biases, or gradients of the same shapes.
///
/// Weight matrices are stored `fan_in x fan_out`, so a batch of row vectors
/// `X` maps to `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_value: Array2<f64>,
    pub b_value: Array1<f64>,
    pub w_adv: Array2<f64>,
    pub b_adv: Array1<f64>,
}

impl Params {
    pub fn zeros(shape: &NetShape) -> Self {
        let [h1, h2] = shape.hidden;
        Params {
            w1: Array2::zeros((shape.input_dim, h1)),
            b1: Array1::zeros(h1),
            w2: Array2::zeros((h1, h2)),
            b2: Array1::zeros(h2),
            w_value: Array2::zeros((h2, 1)),
            b_value: Array1::zeros(1),
            w_adv: Array2::zeros((h2, ACTIONS)),
            b_adv: Array1::zeros(ACTIONS),
        }
    }

    /// Parameter blocks in their fixed serialization order.
    pub fn blocks(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w_value.as_slice().expect("standard layout"),
            self.b_value.as_slice().expect("standard layout"),
            self.w_adv.as_slice().expect("standard layout"),
            self.b_adv.as_slice().expect("standard layout"),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w_value.as_slice_mut().expect("standard layout"),
            self.b_value.as_slice_mut().expect("standard layout"),
            self.w_adv.as_slice_mut().expect("standard layout"),
            self.b_adv.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `x · w + b` for a single row, accumulated row by row of `w` so that zero
/// inputs (inactive ReLU units) cost nothing.
fn dense_layer(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut z = b.clone();
    for (&xi, row) in x.iter().zip(w.outer_iter()) {
        if xi != 0.0 {
            z.scaled_add(xi, &row);
        }
    }
    z
}

/// `Q[i] = v + a[i] - mean(a)`.
pub fn dueling_aggregate(v: f64, a: [f64; ACTIONS]) -> [f64; ACTIONS] {
    let mean = (a[0] + a[1]) / 2.0;
    [v + (a[0] - mean), v + (a[1] - mean)]
}

/// Greedy action for a pair of Q-values; exact ties go to `NotGo`.
pub fn greedy(q: [f64; ACTIONS]) -> Action {
    if q[Action::Go.index()] > q[Action::NotGo.index()] {
        Action::Go
    } else {
        Action::NotGo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    shape: NetShape,
    params: Params,
}

/// Intermediate values kept for the backward pass.
struct Activations {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    q: Array2<f64>,
}

/// One regression sample: normalized observation, action taken, target value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub action: Action,
    pub target: f64,
}

impl QNetwork {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let mut params = Params::zeros(&shape);
        let [h1, h2] = shape.hidden;
        let fan_in = [shape.input_dim, shape.input_dim, h1, h1, h2, h2, h2, h2];
        for (block, n) in params.blocks_mut().into_iter().zip(fan_in) {
            let bound = 1.0 / (n as f64).sqrt();
            for w in block.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        QNetwork { shape, params }
    }

    pub fn from_params(shape: NetShape, params: Params) -> Result<Self> {
        let expected = Params::zeros(&shape);
        let same = expected
            .blocks()
            .iter()
            .zip(params.blocks().iter())
            .all(|(a, b)| a.len() == b.len())
            && params.w1.dim() == expected.w1.dim()
            && params.w2.dim() == expected.w2.dim()
            && params.w_adv.dim() == expected.w_adv.dim();
        if !same {
            return Err(Error::Checkpoint("parameter shapes do not match layer sizes".into()));
        }
        Ok(QNetwork { shape, params })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn copy_from(&mut self, other: &QNetwork) {
        self.params.clone_from(&other.params);
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.shape.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.input_dim,
                actual,
            });
        }
        Ok(())
    }

    fn forward_full(&self, x: ArrayView2<f64>) -> Activations {
        let p = &self.params;
        let act = self.shape.activation;
        let z1 = x.dot(&p.w1) + &p.b1;
        let a1 = act.apply(&z1);
        let z2 = a1.dot(&p.w2) + &p.b2;
        let a2 = act.apply(&z2);
        let v = a2.dot(&p.w_value) + &p.b_value;
        let adv = a2.dot(&p.w_adv) + &p.b_adv;
        let mut q = Array2::zeros((x.nrows(), ACTIONS));
        for ((mut row, v), a) in q
            .outer_iter_mut()
            .zip(v.column(0).iter())
            .zip(adv.outer_iter())
        {
            let out = dueling_aggregate(*v, [a[0], a[1]]);
            row[0] = out[0];
            row[1] = out[1];
        }
        Activations { z1, a1, z2, a2, q }
    }

    /// Q-values for a batch of normalized observations (one per row).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        Ok(self.forward_full(x).q)
    }

    /// Q-values `[Go, NotGo]` for one normalized observation.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; ACTIONS]> {
        self.check_dim(x.len())?;
        let p = &self.params;
        let act = self.shape.activation;
        let a1 = act.apply1(dense_layer(x, &p.w1, &p.b1));
        let a2 = act.apply1(dense_layer(a1.as_slice().expect("owned"), &p.w2, &p.b2));
        let a2 = a2.as_slice().expect("owned");
        let v = dense_layer(a2, &p.w_value, &p.b_value)[0];
        let adv = dense_layer(a2, &p.w_adv, &p.b_adv);
        Ok(dueling_aggregate(v, [adv[0], adv[1]]))
    }

    pub fn greedy_action(&self, x: &[f64]) -> Result<Action> {
        Ok(greedy(self.forward(x)?))
    }

    /// Mean squared error of `Q(x, action)` against the targets, and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, actions: &[Action], targets: &[f64]) -> Result<(f64, Params)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_dim(x.ncols())?;
        let acts = self.forward_full(x);
        let p = &self.params;

        let mut loss = 0.0;
        // dL/dV and dL/dA per row
        let mut d_value = Array2::zeros((n, 1));
        let mut d_adv = Array2::zeros((n, ACTIONS));
        for i in 0..n {
            let a = actions[i].index();
            let err = acts.q[[i, a]] - targets[i];
            loss += err * err;
            let dq = 2.0 * err / n as f64;
            d_value[[i, 0]] = dq;
            // dQ_a/dA_j = [j == a] - 1/2
            for j in 0..ACTIONS {
                let indicator = if j == a { 1.0 } else { 0.0 };
                d_adv[[i, j]] = dq * (indicator - 1.0 / ACTIONS as f64);
            }
        }
        loss /= n as f64;

        let act = self.shape.activation;
        let w_value = acts.a2.t().dot(&d_value);
        let w_adv = acts.a2.t().dot(&d_adv);
        let mut d2 = d_value.dot(&p.w_value.t()) + d_adv.dot(&p.w_adv.t());
        act.backprop(&mut d2, &acts.z2, &acts.a2);
        let w2 = acts.a1.t().dot(&d2);
        let mut d1 = d2.dot(&p.w2.t());
        act.backprop(&mut d1, &acts.z1, &acts.a1);
        let mut grad = Params {
            w1: x.t().dot(&d1),
            b1: d1.sum_axis(Axis(0)),
            w2,
            b2: d2.sum_axis(Axis(0)),
            w_value,
            b_value: d_value.sum_axis(Axis(0)),
            w_adv,
            b_adv: d_adv.sum_axis(Axis(0)),
        };

        // transposed products can come back in Fortran order
        for m in [&mut grad.w1, &mut grad.w2, &mut grad.w_value, &mut grad.w_adv] {
            if !m.is_standard_layout() {
                *m = m.as_standard_layout().into_owned();
            }
        }
        Ok((loss, grad))
    }

    /// Loss only; used by gradient checks.
    pub fn loss(&self, x: ArrayView2<f64>, actions: &[Action], targets: &[f64]) -> Result<f64> {
        self.check_dim(x.ncols())?;
        let q = self.forward_full(x).q;
        let n = x.nrows() as f64;
        Ok(actions
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (a, t))| (q[[i, a.index()]] - t).powi(2))
            .sum::<f64>()
            / n)
    }

    /// Writes all parameters as little-endian f64 in block order.
    pub fn write_params<W: Write>(&self, mut out: W) -> Result<()> {
        for block in self.params.blocks() {
            for v in block {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_params<R: Read>(shape: NetShape, mut input: R) -> Result<Self> {
        let mut params = Params::zeros(&shape);
        let mut buf = [0u8; 8];
        for block in params.blocks_mut() {
            for v in block.iter_mut() {
                input.read_exact(&mut buf).map_err(|e| {
                    Error::Checkpoint(format!("truncated parameter block: {e}"))
                })?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(QNetwork { shape, params })
    }
}

/// Stacks rows of equal length into a matrix.
pub fn stack_rows<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).expect("rows share a length")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    pub fn new(shape: &NetShape, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Params::zeros(shape),
            v: Params::zeros(shape),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(&mut self, net: &mut QNetwork, grad: &Params) {
        self.t += 1;
        let c = self.cfg;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grad.norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let t = self.t as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let step = c.lr / bias1;
        let blocks = net
            .params
            .blocks_mut()
            .into_iter()
            .zip(grad.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for (((w, g), m), v) in blocks {
            for i in 0..w.len() {
                let g = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                w[i] -= step * m[i] / ((v[i] / bias2).sqrt() + c.eps);
            }
        }
    }

    /// One regression step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, net: &mut QNetwork, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let x = stack_rows(batch.iter().map(|s| s.x.as_slice()), net.input_dim());
        let actions: Vec<Action> = batch.iter().map(|s| s.action).collect();
        let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
        self.train_on(net, x.view(), &actions, &targets)
    }

    pub fn train_on(
        &mut self,
        net: &mut QNetwork,
        x: ArrayView2<f64>,
        actions: &[Action],
        targets: &[f64],
    ) -> Result<f64> {
        let (loss, grad) = net.loss_and_gradient(x, actions, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss, step: self.t });
        }
        self.apply(net, &grad);
        Ok(loss)
    }
}

/// First `n` rows of a matrix as an owned copy (used to split stacked batches).
pub fn head_rows(m: &Array2<f64>, n: usize) -> Array2<f64> {
    m.slice(s![..n, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, activation: Activation) -> QNetwork {
        let mut shape = NetShape::new(3).with_hidden(4, 3);
        shape.activation = activation;
        QNetwork::new(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(dueling_aggregate(0.0, [0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(dueling_aggregate(1.0, [2.0, 4.0]), [0.0, 2.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let shape = NetShape::new(6).with_hidden(8, 4);
        let net = QNetwork::from_params(shape, Params::zeros(&shape)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn hand_computed_toy_network() {
        // 2 inputs, 2-2 hidden, relu
        let mut shape = NetShape::new(2).with_hidden(2, 2);
        shape.activation = Activation::Relu;
        let mut p = Params::zeros(&shape);
        p.w1 = ndarray::arr2(&[[1.0, -1.0], [2.0, 0.5]]);
        p.b1 = ndarray::arr1(&[0.0, 1.0]);
        p.w2 = ndarray::arr2(&[[1.0, 0.0], [-1.0, 2.0]]);
        p.b2 = ndarray::arr1(&[0.5, -0.5]);
        p.w_value = ndarray::arr2(&[[1.0], [1.0]]);
        p.b_value = ndarray::arr1(&[0.0]);
        p.w_adv = ndarray::arr2(&[[1.0, -1.0], [0.0, 3.0]]);
        p.b_adv = ndarray::arr1(&[0.0, 0.0]);
        let net = QNetwork::from_params(shape, p).unwrap();
        // x = [1, 1]: z1 = [3, 0.5] -> a1 = [3, 0.5]
        // z2 = [3 - 0.5 + 0.5, 0 + 1 - 0.5] = [3, 0.5]
        // v = 3.5; adv = [3, -3 + 1.5] = [3, -1.5]; mean = 0.75
        // q = [3.5 + 2.25, 3.5 - 2.25]
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), [5.75, 1.25]);
        // x = [-1, 0]: z1 = [-1, 2] -> a1 = [0, 2]
        // z2 = [-2 + 0.5, 4 - 0.5] -> a2 = [0, 3.5]
        // v = 3.5; adv = [0, 10.5]; mean = 5.25 -> q = [-1.75, 8.75]
        assert_eq!(net.forward(&[-1.0, 0.0]).unwrap(), [-1.75, 8.75]);
        assert_eq!(net.greedy_action(&[-1.0, 0.0]).unwrap(), Action::NotGo);
        assert_eq!(net.greedy_action(&[1.0, 1.0]).unwrap(), Action::Go);
    }

    #[test]
    fn dead_first_layer_ignores_input_scale() {
        let mut net = tiny(3, Activation::Relu);
        net.params_mut().w1.fill(0.0);
        let a = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let b = net.forward(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch() {
        let net = tiny(1, Activation::Relu);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn ties_go_to_not_go() {
        assert_eq!(greedy([1.0, 1.0]), Action::NotGo);
        assert_eq!(greedy([1.0 + 1e-12, 1.0]), Action::Go);
    }

    #[test]
    fn parameter_count() {
        let shape = NetShape::new(6);
        let net = QNetwork::new(shape, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.params().flatten().len(), shape.param_count());
        assert_eq!(shape.param_count(), 6 * 512 + 512 + 512 * 256 + 256 + 256 + 1 + 512 + 2);
    }

    #[test]
    fn zero_error_leaves_parameters_unchanged() {
        let mut net = tiny(5, Activation::Relu);
        let before = net.clone();
        let xs = [[0.3, -0.2, 0.9], [0.1, 0.4, -0.7]];
        let batch: Vec<Sample> = xs
            .iter()
            .zip([Action::Go, Action::NotGo])
            .map(|(x, a)| Sample { x: x.to_vec(), action: a, target: net.forward(x).unwrap()[a.index()] })
            .collect();
        let mut opt = Adam::new(net.shape(), AdamConfig::default());
        let loss = opt.train_step(&mut net, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn repeated_steps_fit_one_sample() {
        let mut net = tiny(8, Activation::Relu);
        let mut opt = Adam::new(net.shape(), AdamConfig { lr: 0.01, ..Default::default() });
        let batch = [Sample { x: vec![0.5, -0.5, 0.2], action: Action::Go, target: 3.0 }];
        let losses: Vec<f64> = (0..300).map(|_| opt.train_step(&mut net, &batch).unwrap()).collect();
        assert!(losses[299] < 1e-6 * losses[0], "{} -> {}", losses[0], losses[299]);
        let mut prev = f64::INFINITY;
        for (i, l) in losses.iter().enumerate().take(40) {
            assert!(*l < prev, "loss rose at step {i}");
            prev = *l;
        }
    }

    #[test]
    fn empty_batch_and_non_finite_loss() {
        let mut net = tiny(2, Activation::Relu);
        let mut opt = Adam::new(net.shape(), AdamConfig::default());
        assert!(matches!(opt.train_step(&mut net, &[]), Err(Error::EmptyBatch)));
        let bad = [Sample { x: vec![0.0; 3], action: Action::Go, target: f64::NAN }];
        assert!(matches!(opt.train_step(&mut net, &bad), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn single_item_gradient_matches_finite_differences() {
        for activation in [Activation::Relu, Activation::Tanh] {
            let net = tiny(13, activation);
            let x = ndarray::arr2(&[[0.4, -0.3, 0.8]]);
            let actions = [Action::NotGo];
            let targets = [1.5];
            let (_, grad) = net.loss_and_gradient(x.view(), &actions, &targets).unwrap();
            let analytic = grad.flatten();
            let mut numeric = Vec::new();
            let h = 1e-5;
            let n_blocks = net.params().blocks().len();
            for b in 0..n_blocks {
                for i in 0..net.params().blocks()[b].len() {
                    let mut plus = net.clone();
                    plus.params_mut().blocks_mut()[b][i] += h;
                    let mut minus = net.clone();
                    minus.params_mut().blocks_mut()[b][i] -= h;
                    let lp = plus.loss(x.view(), &actions, &targets).unwrap();
                    let lm = minus.loss(x.view(), &actions, &targets).unwrap();
                    numeric.push((lp - lm) / (2.0 * h));
                }
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-5, "{activation:?}: {}", diff / scale);
        }
    }

    #[test]
    fn params_round_trip_bitwise() {
        let net = tiny(21, Activation::Relu);
        let mut buf = Vec::new();
        net.write_params(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * net.shape().param_count());
        let back = QNetwork::read_params(*net.shape(), buf.as_slice()).unwrap();
        let x = [0.1, 0.2, -0.3];
        let a = net.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        assert!(QNetwork::read_params(*net.shape(), &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn batch_forward_matches_single() {
        let net = tiny(4, Activation::Tanh);
        let rows = [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
        let m = stack_rows(rows.iter().map(|r| r.as_slice()), 3);
        let q = net.forward_batch(m.view()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = net.forward(r).unwrap();
            assert!((q[[i, 0]] - single[0]).abs() < 1e-12);
            assert!((q[[i, 1]] - single[1]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn aggregate_ignores_advantage_offset(v in -1000i32..1000, a0 in -1000i32..1000, a1 in -1000i32..1000, c in -1000i32..1000) {
            // integer-valued inputs keep every intermediate exact
            let f = f64::from;
            let base = dueling_aggregate(f(v), [f(a0), f(a1)]);
            let shifted = dueling_aggregate(f(v), [f(a0 + c), f(a1 + c)]);
            prop_assert_eq!(base, shifted);
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let net = tiny(seed, Activation::Relu);
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }
}
