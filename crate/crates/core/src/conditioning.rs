//! λ-conditioning: an MLP hypernetwork that maps the DC weight to per-cascade
//! AdaIN scale/shift vectors, and the AdaIN modulation itself.

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dc::LambdaValue;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{Binder, ModelParams};
use crate::tensor::Tensor;

/// Added to the instance standard deviation before dividing.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypernetConfig {
    /// Trunk widths, input first. The input is the scalar λ.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// One trunk shared by all cascades, with per-cascade heads.
    pub shared_trunk: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![1, 64, 64, 64],
            activation: Activation::Relu,
            shared_trunk: false,
        }
    }
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.first() != Some(&1) {
            return Err(Error::invalid("hypernet.layer_dims", "first dimension must be 1 (scalar λ)"));
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::invalid("hypernet.layer_dims", "need at least one positive hidden width"));
        }
        Ok(())
    }
}

/// AdaIN scale and shift for one conditioned site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConditioningParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel instance mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn of(z: &Array3<f64>) -> Self {
        let (mu, std) = z
            .axis_iter(Axis(0))
            .map(|ch| {
                let n = ch.len() as f64;
                let mean = ch.sum() / n;
                let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip();
        Self { mu, std }
    }
}

/// `γ_c·(z_c − μ_c)/(σ_c + eps) + β_c` with statistics of this input.
pub fn adain(z: &Array3<f64>, params: &ConditioningParams, eps: f64) -> Result<Array3<f64>> {
    let c = z.len_of(Axis(0));
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(Error::ShapeMismatch {
            expected: vec![c],
            actual: vec![params.gamma.len(), params.beta.len()],
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature map"));
    }
    let stats = FeatureStats::of(z);
    let mut out = z.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let denom = stats.std[ch] + eps;
        let (g, b, mu) = (params.gamma[ch], params.beta[ch], stats.mu[ch]);
        plane.mapv_inplace(|v| g * (v - mu) / denom + b);
    }
    Ok(out)
}

/// Graph form of [`adain`].
pub fn adain_graph(graph: &mut Graph, z: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let normed = graph.instance_norm(z, eps);
    graph.channel_affine(normed, gamma, beta)
}

/// The λ → {(γ_t, β_t)} hypernetwork for `cascades` conditioned sites of
/// `channels` feature maps each.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypernet {
    pub config: HypernetConfig,
    pub cascades: usize,
    pub channels: usize,
}

impl Hypernet {
    pub fn new(config: HypernetConfig, cascades: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::invalid("hypernet", "conditioned channel count must be positive"));
        }
        Ok(Self {
            config,
            cascades,
            channels,
        })
    }

    /// Output width of each per-cascade head: `C` scales followed by `C` shifts.
    pub fn head_dim(&self) -> usize {
        2 * self.channels
    }

    fn trunk_prefix(&self, cascade: usize) -> String {
        if self.config.shared_trunk {
            "hyper.trunk".to_string()
        } else {
            format!("hyper.{cascade}")
        }
    }

    /// `(name, shape)` of every tensor this hypernetwork owns.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let dims = &self.config.layer_dims;
        let trunks: Vec<usize> = if self.config.shared_trunk {
            vec![0]
        } else {
            (0..self.cascades).collect()
        };
        let mut shapes = Vec::new();
        for t in trunks {
            let prefix = self.trunk_prefix(t);
            for (i, pair) in dims.windows(2).enumerate() {
                shapes.push((format!("{prefix}.l{i}.weight"), vec![pair[1], pair[0]]));
                shapes.push((format!("{prefix}.l{i}.bias"), vec![pair[1]]));
            }
        }
        let last = *dims.last().expect("validated non-empty");
        for t in 0..self.cascades {
            shapes.push((format!("hyper.{t}.head.weight"), vec![self.head_dim(), last]));
            shapes.push((format!("hyper.{t}.head.bias"), vec![self.head_dim()]));
        }
        shapes
    }

    /// Kaiming-uniform trunk; the head starts near γ = 1, β = 0 so the first
    /// forward passes behave like plain instance normalization.
    pub fn init(&self, rng: &mut impl Rng, params: &mut ModelParams) {
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.contains(".head.") {
                if name.ends_with("bias") {
                    (0..n).map(|i| if i < self.channels { 1.0 } else { 0.0 }).collect()
                } else {
                    let normal = Normal::new(0.0, 0.1 / (shape[1] as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let bound = (6.0 / shape[1] as f64).sqrt();
                let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
                (0..n).map(|_| uniform.sample(rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data));
        }
    }

    fn activate(&self, graph: &mut Graph, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => graph.relu(x),
            Activation::LeakyRelu => graph.leaky_relu(x, 0.2),
            Activation::Tanh => graph.tanh(x),
        }
    }

    /// `(γ, β)` variables for one cascade from the one-element λ variable.
    pub fn forward_graph(&self, graph: &mut Graph, binder: &mut Binder<'_>, lam: Var, cascade: usize) -> (Var, Var) {
        let prefix = self.trunk_prefix(cascade);
        let mut h = lam;
        for i in 0..self.config.layer_dims.len() - 1 {
            let w = binder.var(graph, &format!("{prefix}.l{i}.weight"));
            let b = binder.var(graph, &format!("{prefix}.l{i}.bias"));
            h = graph.linear(h, w, b);
            h = self.activate(graph, h);
        }
        let w = binder.var(graph, &format!("hyper.{cascade}.head.weight"));
        let b = binder.var(graph, &format!("hyper.{cascade}.head.bias"));
        let out = graph.linear(h, w, b);
        let gamma = graph.slice(out, 0, self.channels);
        let beta = graph.slice(out, self.channels, self.channels);
        (gamma, beta)
    }

    /// Evaluates every cascade's conditioning for a fixed λ.
    pub fn forward(&self, params: &ModelParams, lam: LambdaValue) -> Result<Vec<ConditioningParams>> {
        params.require_present(&self.param_shapes())?;
        let mut graph = Graph::inference();
        let mut binder = Binder::new(params);
        let lam_var = graph.constant(Tensor::scalar(lam.get()));
        Ok((0..self.cascades)
            .map(|t| {
                let (g, b) = self.forward_graph(&mut graph, &mut binder, lam_var, t);
                ConditioningParams {
                    gamma: graph.value(g).data().to_vec(),
                    beta: graph.value(b).data().to_vec(),
                }
            })
            .collect())
    }
}

/// Convenience wrapper matching the `hypernet_forward(λ, weights)` contract.
pub fn hypernet_forward(net: &Hypernet, lam: f64, params: &ModelParams) -> Result<Vec<ConditioningParams>> {
    net.forward(params, LambdaValue::new(lam)?)
}
