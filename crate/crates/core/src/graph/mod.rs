//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and, when any input
//! needs a gradient, a closure that maps the output gradient back onto the
//! inputs. `Graph::inference` skips recording altogether.

mod conv;
mod elementwise;
mod spectral;

use crate::tensor::Tensor;


/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &mut Grads) + Send>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push_node(value, requires_grad, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether an op over `inputs` will record a backward closure.
    pub(crate) fn needs_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Appends an op result. `make_backward` is only invoked when some input
    /// requires a gradient and the graph is recording.
    pub(crate) fn push_op<F>(&mut self, value: Tensor, inputs: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn,
    {
        let requires_grad = self.needs_grad(inputs);
        let backward = requires_grad.then(make_backward);
        self.push_node(value, requires_grad, backward)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            self.shape(output)
        );
        let mut grads = Grads {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[output.0].requires_grad {
            return grads;
        }
        grads.slots[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            if let Some(g) = grads.slots[i].take() {
                backward(&g, &mut grads);
            }
        }
        grads
    }
}

/// Gradients produced by [`Graph::backward`]; populated for leaves only.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
    needs: Vec<bool>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].take()
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Compares analytic leaf gradients of a scalar function against central
    /// differences, returning the worst relative error over all entries.
    pub fn check_gradients(
        inputs: &[Tensor],
        step: f64,
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);

        let eval = |perturbed: &[Tensor]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };

        let mut worst = 0.0f64;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += step;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }
}
