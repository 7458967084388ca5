//! Multilayer perceptrons and the diagonal-Gaussian policy.
//!
//! Every network has two evaluation paths: a plain array path used while
//! collecting rollouts, and a graph path (`bind` + `forward`) used whenever
//! gradients are needed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, GraphError, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Relu => std::f64::consts::SQRT_2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Dense layer computing `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

/// Orthogonal `[rows, cols]` matrix scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let gauss = nalgebra::DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix makes the distribution uniform over orthogonal matrices.
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Array::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.set(i, j, gain * v);
        }
    }
    out
}

/// Feed-forward network with a shared hidden activation and linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// Orthogonal weights and zero biases. `sizes` lists every layer width,
    /// input first; `output_gain` scales the last layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { output_gain } else { activation.gain() };
                Linear {
                    weight: orthogonal(sizes[i], sizes[i + 1], gain, rng),
                    bias: Array::zeros(1, sizes[i + 1]),
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    /// Zeroes the output layer so the network starts as the constant 0.
    pub fn with_zero_output(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.weight = Array::zeros(last.weight.rows(), last.weight.cols());
            last.bias = Array::zeros(1, last.bias.cols());
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    /// Plain evaluation of `[n, in]` inputs.
    pub fn forward(&self, input: &Array) -> Result<Array, GraphError> {
        if !input.is_matrix() || input.cols() != self.input_dim() {
            return Err(GraphError::ShapeMismatch {
                node: 0,
                op: "mlp_forward",
                detail: format!("input {:?}, network expects {} columns", input.shape(), self.input_dim()),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight);
            let cols = z.cols();
            let b = layer.bias.data();
            for (j, v) in z.data_mut().iter_mut().enumerate() {
                *v += b[j % cols];
                if i != last {
                    *v = self.activation.apply(*v);
                }
            }
            h = z;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases in layer order: `w0, b0, w1, b1, ...`.
    pub fn arrays(&self) -> Vec<Array> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Same architecture with replaced parameters (as laid out by [`Mlp::arrays`]).
    pub fn with_arrays(&self, arrays: &[Array]) -> Self {
        assert_eq!(arrays.len(), 2 * self.layers.len(), "parameter count mismatch");
        let layers = arrays
            .chunks(2)
            .zip(&self.layers)
            .map(|(pair, old)| {
                assert_eq!(pair[0].shape(), old.weight.shape());
                assert_eq!(pair[1].shape(), old.bias.shape());
                Linear {
                    weight: pair[0].clone(),
                    bias: pair[1].clone(),
                }
            })
            .collect();
        Mlp {
            layers,
            activation: self.activation,
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<MlpNodes, GraphError> {
        let ids = self
            .arrays()
            .into_iter()
            .map(|a| g.leaf(a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MlpNodes::from_ids(&ids, self.activation))
    }
}

/// Graph handles for an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub activation: Activation,
}

impl MlpNodes {
    pub fn from_ids(ids: &[NodeId], activation: Activation) -> Self {
        assert!(ids.len() % 2 == 0 && !ids.is_empty());
        MlpNodes {
            layers: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
            activation,
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<NodeId, GraphError> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i != last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }
}

/// Diagonal Gaussian policy with a state-independent learnable log-std.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    /// `[1, action_dim]`.
    pub log_std: Array,
}

impl GaussianPolicy {
    /// `hidden` lists hidden-layer widths; log-std starts at 0.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        GaussianPolicy {
            mean: Mlp::new(&sizes, Activation::Tanh, 0.01, rng),
            log_std: Array::zeros(1, action_dim),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.cols()
    }

    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        self.mean
            .forward(&Array::row(state))
            .expect("state dimension matches policy")
            .into_data()
    }

    /// Samples `mean(s) + exp(log_std) * z`. The action is not clipped; the
    /// environment clips it before applying dynamics.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Vec<f64> {
        let mut a = self.mean_action(state);
        for (v, ls) in a.iter_mut().zip(self.log_std.data()) {
            let z: f64 = rng.sample(StandardNormal);
            *v += ls.exp() * z;
        }
        a
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let mu = self.mean_action(state);
        diag_gaussian_log_density(action, &mu, self.log_std.data())
    }

    /// `mean` layers followed by `log_std`.
    pub fn arrays(&self) -> Vec<Array> {
        let mut v = self.mean.arrays();
        v.push(self.log_std.clone());
        v
    }

    pub fn with_arrays(&self, arrays: &[Array]) -> Self {
        let (last, rest) = arrays.split_last().expect("policy parameters");
        assert_eq!(last.shape(), self.log_std.shape());
        GaussianPolicy {
            mean: self.mean.with_arrays(rest),
            log_std: last.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.log_std.len()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<PolicyNodes, GraphError> {
        let mean = self.mean.bind(g)?;
        let log_std = g.leaf(self.log_std.clone())?;
        Ok(PolicyNodes { mean, log_std })
    }
}

/// Graph handles for a [`GaussianPolicy`].
#[derive(Clone, Debug)]
pub struct PolicyNodes {
    pub mean: MlpNodes,
    pub log_std: NodeId,
}

impl PolicyNodes {
    /// Parameter ids in the order of [`GaussianPolicy::arrays`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.mean.ids();
        v.push(self.log_std);
        v
    }

    pub fn from_ids(ids: &[NodeId], activation: Activation) -> Self {
        let (last, rest) = ids.split_last().expect("policy node ids");
        PolicyNodes {
            mean: MlpNodes::from_ids(rest, activation),
            log_std: *last,
        }
    }

    /// Per-row log density `[n, 1]` of `actions` given `states`.
    pub fn log_prob(&self, g: &mut Graph, states: NodeId, actions: NodeId) -> Result<NodeId, GraphError> {
        let mu = self.mean.forward(g, states)?;
        g.gaussian_log_density(actions, mu, self.log_std)
    }
}

pub fn diag_gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), l)| {
            let z = (x - m) * (-l).exp();
            -0.5 * z * z - l - HALF_LN_2PI
        })
        .sum()
}
