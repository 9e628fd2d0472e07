//! The recorded computation graph.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashSet;

struct Node {
    /// Applies the chain rule for one operation: reads the output's
    /// gradient and accumulates into the inputs' gradients.
    backward: Box<dyn FnOnce()>,
    output: Tensor,
    inputs: Vec<Tensor>,
}

/// Tape of recorded operations in execution (= topological) order.
///
/// A graph belongs to a single forward pass. [`Graph::backward`] consumes
/// it, so a graph can never be replayed and nodes are visited exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records one operation. `backward` must only accumulate into the
    /// gradients of `inputs`, reading the gradient of `output`.
    pub fn record(&mut self, inputs: Vec<Tensor>, output: Tensor, backward: Box<dyn FnOnce()>) {
        output.set_requires_grad(true);
        self.nodes.push(Node {
            backward,
            output,
            inputs,
        });
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1, walks
    /// the tape backwards once, then drops it. Leaves with
    /// `requires_grad` keep their accumulated gradients; intermediate
    /// buffers die with the graph.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.all_finite() {
            return Err(Error::non_finite("backward"));
        }
        loss.set_grad(vec![1.0]);

        let mut leaves: Vec<Tensor> = Vec::new();
        let mut produced: HashSet<usize> = HashSet::with_capacity(self.nodes.len());
        for node in &self.nodes {
            produced.insert(node.output.id());
        }
        let mut seen: HashSet<usize> = HashSet::new();

        for node in self.nodes.into_iter().rev() {
            // An output without a gradient did not contribute to the loss.
            if node.output.has_grad() {
                (node.backward)();
            }
            for input in node.inputs {
                if input.requires_grad()
                    && !produced.contains(&input.id())
                    && seen.insert(input.id())
                {
                    leaves.push(input);
                }
            }
        }

        for leaf in &leaves {
            if !leaf.grad_all_finite() {
                return Err(Error::non_finite("backward"));
            }
        }
        Ok(())
    }
}
