//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Each
//! recorded node owns its value and, when any of its inputs needs a
//! gradient, a [`BackwardRule`] mapping the upstream gradient to one
//! gradient per input. [`Tape::backward`] replays the rules in reverse
//! recording order, which visits every node after all of its consumers
//! because a node can only consume values recorded before it.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of one recorded operation.
pub trait BackwardRule<T: Element> {
    fn name(&self) -> &'static str;

    /// Inputs in the order `backward` returns their gradients.
    fn inputs(&self) -> Vec<Var>;

    /// Maps `grad_out` (same shape as the node's value) to one gradient per
    /// input. `None` means no contribution. Gradients returned for inputs
    /// that do not need one are ignored.
    fn backward(&self, ctx: &BackwardContext<'_, T>, grad_out: &[T])
        -> Result<Vec<Option<Vec<T>>>>;

    /// Smallest distance of any internal quantity from a point where this
    /// operation is not differentiable (sign flips, kinks).
    fn kink_distance(&self) -> Option<f64> {
        None
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    requires_grad: bool,
}

/// Read access to recorded values during a backward step.
pub struct BackwardContext<'a, T: Element> {
    nodes: &'a [Node<T>],
    output: usize,
}

impl<T: Element> BackwardContext<'_, T> {
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.nodes[self.output].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }
}

/// Recorded computation graph.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor` as a leaf, keeping its gradient flag.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut copy =
            Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("tensor invariant");
        copy.set_requires_grad(tensor.requires_grad());
        self.leaf(copy)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records the result of an operation. The rule is dropped when none of
    /// its inputs needs a gradient.
    pub fn push(&mut self, value: Tensor<T>, rule: impl BackwardRule<T> + 'static) -> Var {
        let requires_grad = rule.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn BackwardRule<T>>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Minimum [`BackwardRule::kink_distance`] over all recorded operations.
    pub fn kink_distance(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| n.rule.as_ref().and_then(|r| r.kink_distance()))
            .reduce(f64::min)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            let Some(rule) = &node.rule else { continue };
            let Some(grad_out) = grads[index].take() else {
                continue;
            };
            let ctx = BackwardContext {
                nodes: &self.nodes,
                output: index,
            };
            let inputs = rule.inputs();
            let contributions = rule.backward(&ctx, &grad_out)?;
            if contributions.len() != inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    rule.name(),
                    contributions.len(),
                    inputs.len()
                )));
            }
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                let Some(g) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let expected = self.nodes[input.0].value.numel();
                if g.len() != expected {
                    return Err(Error::Contract(format!(
                        "{} produced a gradient of length {} for an input of {} values",
                        rule.name(),
                        g.len(),
                        expected
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves of a tape with respect to one loss.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
