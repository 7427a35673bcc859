use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradient rule of a recorded operation.
///
/// Implementations keep whatever they saved during the forward pass
/// (argmax indices, dropout masks, normalized activations) and receive the
/// input values, the output value and the output gradient at backward time.
pub(crate) trait Backward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: Vec<bool>,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    name: &'static str,
}

/// Tape of executed operations. Values are immutable once recorded;
/// backward walks the tape in exact reverse order and may run once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node { value, grad: None, requires_grad, inputs: Vec::new(), op: None, name: "leaf" })
    }

    /// A constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, node: Node) -> Var {
        self.consumed = false;
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: Box<dyn Backward>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: inputs.to_vec(),
            op: requires_grad.then_some(op),
            name,
        }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients arriving at a node
    /// from several consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(idx);
            let node = &mut tail[0];
            let (Some(op), Some(grad)) = (node.op.as_ref(), node.grad.as_ref()) else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| head[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &head[v.0].value).collect(),
                output: &node.value,
                grad,
                needs,
            };
            let input_grads = op.backward(&ctx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let target = &mut head[v.0];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), target.value.shape(), "{}", node.name);
                match target.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => target.grad = Some(g),
                }
            }
            // intermediate grads are no longer needed once propagated
            if node.op.is_some() {
                node.grad = None;
            }
        }
        Ok(())
    }
}
