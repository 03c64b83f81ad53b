//! Tape that records a forward pass and replays it backwards.

use crate::gemm::Gemm;
use crate::ops;
use crate::tensor::Tensor;
use crate::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Conv {
        x: NodeId,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Deconv {
        x: NodeId,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Concat(Vec<NodeId>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Forward tape over a borrowed parameter list. Parameters are addressed by
/// index so their gradients come back in the same order.
pub struct Graph<'p, T> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Gemm> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn param(&self, i: usize) -> Result<&'p Tensor<T>, NeuralError> {
        self.params
            .get(i)
            .ok_or_else(|| NeuralError::ShapeMismatch(format!("no parameter {i}")))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.push(x, Op::Input)
    }

    pub fn conv(&mut self, x: NodeId, w: usize, b: usize, stride: usize, pad: usize) -> Result<NodeId, NeuralError> {
        let (y, cols) = ops::conv2d_forward(self.value(x), self.param(w)?, self.param(b)?, stride, pad)?;
        Ok(self.push(y, Op::Conv { x, w, b, stride, pad, cols }))
    }

    pub fn deconv(&mut self, x: NodeId, w: usize, b: usize, stride: usize, pad: usize) -> Result<NodeId, NeuralError> {
        let y = ops::deconv2d_forward(self.value(x), self.param(w)?, self.param(b)?, stride, pad)?;
        Ok(self.push(y, Op::Deconv { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn maxpool(&mut self, x: NodeId) -> Result<NodeId, NeuralError> {
        let (y, argmax) = ops::maxpool2_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NeuralError> {
        let y = {
            let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_channels(&values)?
        };
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Back-propagates `seed` (the gradient of the objective with respect to
    /// `root`) and returns one gradient per parameter.
    pub fn backward(&self, root: NodeId, seed: Tensor<T>) -> Result<Vec<Tensor<T>>, NeuralError> {
        if seed.shape != self.value(root).shape {
            return Err(NeuralError::ShapeMismatch("seed gradient shape differs from root".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        grads[root.0] = Some(seed);
        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: NodeId, g: Tensor<T>| match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        };
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b, stride, pad, cols } => {
                    let xs = self.value(*x).chw()?;
                    let (dx, dw, db) = ops::conv2d_backward(&dy, xs, self.param(*w)?, cols, *stride, *pad)?;
                    pgrads[*w].add_assign(&dw);
                    pgrads[*b].add_assign(&db);
                    if !matches!(self.nodes[x.0].op, Op::Input) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Deconv { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::deconv2d_backward(&dy, self.value(*x), self.param(*w)?, *stride, *pad)?;
                    pgrads[*w].add_assign(&dw);
                    pgrads[*b].add_assign(&db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => accumulate(&mut grads, *x, ops::relu_backward(&dy, &node.value)),
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2_backward(&dy, argmax, &self.value(*x).shape);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let channels: Vec<usize> = parts.iter().map(|p| self.value(*p).shape[0]).collect();
                    for (p, g) in parts.iter().zip(ops::split_channels(&dy, &channels)?) {
                        accumulate(&mut grads, *p, g);
                    }
                }
            }
        }
        Ok(pgrads)
    }
}
