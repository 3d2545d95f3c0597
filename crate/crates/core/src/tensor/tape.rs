use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `backward` receives the gradient of the loss with respect to the
/// operation's output and returns one entry per input, `None` when the input
/// receives no gradient from this operation.
pub trait Backward<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &[T], inputs: &[&Tensor<T>], output: &Tensor<T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    inputs: Vec<Var>,
    output: Var,
    op: Box<dyn Backward<T>>,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new() }
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        Var(self.values.len() - 1)
    }

    /// Adds a differentiable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.values[v.0], Tensor::zeros(super::Shape::new(0, 0, 0, 0)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.values.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Stores `output` as the result of an operation over `inputs`. A node is
    /// recorded only when some input requires a gradient.
    pub fn record(&mut self, inputs: &[Var], mut output: Tensor<T>, op: impl Backward<T> + 'static) -> Var {
        let needs_grad = inputs.iter().any(|v| self.values[v.0].requires_grad());
        output.set_requires_grad(needs_grad);
        self.values.push(output);
        let out = Var(self.values.len() - 1);
        if needs_grad {
            self.nodes.push(Node { inputs: inputs.to_vec(), output: out, op: Box::new(op) });
        }
        out
    }

    /// Back-propagates from a scalar `loss`, populating the gradient buffer of
    /// every value that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let lv = &self.values[loss.0];
        if lv.numel() != 1 {
            return Err(Error::Usage(format!("loss must be a scalar, got shape {}", lv.shape())));
        }
        if !lv.requires_grad() {
            return Err(Error::Usage("loss does not depend on any differentiable value".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for node in self.nodes.iter().rev() {
            if node.output.0 > loss.0 {
                continue;
            }
            let Some(g) = grads[node.output.0].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let input_grads = node.op.backward(&g, &inputs, &self.values[node.output.0]);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.values[v.0].requires_grad() {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(ig),
                }
            }
            grads[node.output.0] = Some(g);
        }
        for (value, g) in self.values.iter_mut().zip(grads) {
            if value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![T::zero(); value.numel()]);
                value.set_grad(g);
            }
        }
        Ok(())
    }
}
