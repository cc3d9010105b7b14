use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// All trainable tensors of a model, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that exactly the expected names are present with the expected
    /// shapes, reporting every key that differs.
    pub fn require(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        self.check(expected, true)
    }

    /// Like [`require`](Self::require) but tolerates extra tensors, for
    /// sub-networks that read only their own slice of a model's parameters.
    pub fn require_present(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        self.check(expected, false)
    }

    fn check(&self, expected: &[(String, Vec<usize>)], exact: bool) -> Result<()> {
        let mut differing = Vec::new();
        let expected_map: BTreeMap<&str, &Vec<usize>> =
            expected.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for (name, shape) in &expected_map {
            match self.tensors.get(*name) {
                None => differing.push(format!("{name} (missing)")),
                Some(t) if t.shape() != shape.as_slice() => {
                    differing.push(format!("{name} (shape {:?}, expected {:?})", t.shape(), shape))
                }
                Some(_) => {}
            }
        }
        for name in self.tensors.keys().filter(|_| exact) {
            if !expected_map.contains_key(name.as_str()) {
                differing.push(format!("{name} (unexpected)"));
            }
        }
        if differing.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch { keys: differing })
        }
    }
}

/// Lazily binds named parameters onto a graph for one forward pass.
pub struct Binder<'p> {
    params: &'p ModelParams,
    bound: HashMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            bound: HashMap::new(),
        }
    }

    /// Panics on unknown names; callers validate params against the config first.
    pub fn var(&mut self, graph: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let tensor = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not present"))
            .clone();
        let v = graph.param(tensor);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Moves the gradients of every bound parameter out of `grads`.
    pub fn take_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Kaiming-uniform weights (fan-in over input channels × kernel area), zero
/// biases. Output layers (`tail`, `out`) and the second convolution of each
/// residual block start ten times smaller.
pub(crate) fn init_conv_tensor(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if name.ends_with("bias") {
        return Tensor::zeros(shape);
    }
    let fan_in = if name.ends_with("tconv.weight") || name.ends_with(".up.weight") {
        // Transposed conv weights are [Cin, Cout, k, k]; each output sees Cin inputs.
        shape[0]
    } else {
        shape[1..].iter().product()
    };
    let mut bound = (6.0 / fan_in as f64).sqrt();
    if name.contains(".tail.") || name.contains(".out.") || name.contains(".res.conv2.") {
        bound *= 0.1;
    }
    let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform.sample(rng)).collect())
}
