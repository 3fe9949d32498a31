//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! `Graph::apply` validates shapes, runs the forward kernel eagerly and
//! records the node; `Graph::backward` walks the tape in reverse from a
//! scalar loss, summing gradients across fan-out. Nodes that cannot reach a
//! gradient-requiring leaf are skipped, so frozen parameters cost nothing in
//! the backward pass.

use super::kernels as k;
use super::Tensor;
use crate::error::{Error, Result};

/// Zero-padding policy for convolution.
///
/// `Same` pads to a ceil(n/stride) output extent, putting the odd pixel of
/// padding on the high side. `Valid` applies no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Identifier of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Primitive applications recorded on the tape.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf holding externally provided values.
    Input,
    Add,
    Sub,
    ScalarMul { c: f64 },
    MatMul,
    /// Affine map: x·W + b with inputs (x, w, b).
    Dense,
    /// Inputs (x, w, b); x is NHWC, w is (kh, kw, cin, cout).
    Conv2d { stride: (usize, usize), padding: Padding },
    MaxPool2d { window: (usize, usize), stride: (usize, usize) },
    GlobalAvgPool,
    Flatten,
    Relu,
    Sigmoid,
    /// Row-wise softmax over the last axis of a 2-d tensor.
    Softmax,
    /// Train-mode inverted dropout; eval mode simply omits the op.
    Dropout { rate: f64, seed: u64 },
    /// Per-row Euclidean norm of a 2-d tensor.
    EuclideanNorm,
    /// Per-row softmax cross-entropy against integer labels.
    CrossEntropyLogits { labels: Vec<u8> },
    /// Per-row binary cross-entropy of probabilities against 0/1 targets.
    BinaryCrossEntropy { targets: Vec<f64> },
    Sign,
    Clip { lo: f64, hi: f64 },
    /// Mean over all elements, producing a scalar.
    MeanReduce,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    output: Tensor,
    needs_grad: bool,
}

/// Gradient map from node ids to tensors, produced by [`Graph::backward`].
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(|e| e.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.entries.get_mut(id.0).and_then(|e| e.take())
    }

    /// Stored gradient, or zeros for a node the loss never reached.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.output(id).shape()),
        }
    }
}

/// Tape of primitive applications in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].output
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Add a leaf tensor.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            output: value,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value, false)
    }

    /// Validate, run and record one primitive. This is the single entry point
    /// for every non-leaf node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let output = self.forward(&op, inputs)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), output, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn arity(&self, op_name: &'static str, inputs: &[NodeId], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(err(op_name, format!("expected {} inputs, got {}", n, inputs.len())));
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor> {
        let t = |i: usize| &self.nodes[inputs[i].0].output;
        match op {
            Op::Input => Err(Error::InvalidAttribute(
                "Input nodes are created with Graph::input".into(),
            )),
            Op::Add | Op::Sub => {
                self.arity("add/sub", inputs, 2)?;
                let (a, b) = (t(0), t(1));
                if a.shape() != b.shape() {
                    return Err(err("add/sub", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let data = if matches!(op, Op::Add) {
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
                } else {
                    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
                };
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::ScalarMul { c } => {
                self.arity("scalar_mul", inputs, 1)?;
                let a = t(0);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
            }
            Op::MatMul => {
                self.arity("matmul", inputs, 2)?;
                let (a, b) = (t(0), t(1));
                match (a.shape(), b.shape()) {
                    ([m, ka], [kb, n]) if ka == kb => {
                        Tensor::new(vec![*m, *n], k::matmul_forward(*m, *ka, *n, a.data(), b.data()))
                    }
                    _ => Err(err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()))),
                }
            }
            Op::Dense => {
                self.arity("dense", inputs, 3)?;
                let (x, w, b) = (t(0), t(1), t(2));
                match (x.shape(), w.shape(), b.shape()) {
                    ([m, kx], [kw, n], [nb]) if kx == kw && n == nb => Tensor::new(
                        vec![*m, *n],
                        k::dense_forward(*m, *kx, *n, x.data(), w.data(), b.data()),
                    ),
                    _ => Err(err(
                        "dense",
                        format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                    )),
                }
            }
            Op::Conv2d { stride, padding } => {
                self.arity("conv2d", inputs, 3)?;
                if stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::InvalidAttribute("conv2d stride must be positive".into()));
                }
                let (x, w, b) = (t(0), t(1), t(2));
                let (&[batch, h, wd, cin], &[kh, kw, wcin, cout], &[bc]) =
                    (x.shape(), w.shape(), b.shape())
                else {
                    return Err(err(
                        "conv2d",
                        format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                    ));
                };
                if wcin != cin || bc != cout {
                    return Err(err(
                        "conv2d",
                        format!("channels: x cin {}, w cin {}, w cout {}, b {}", cin, wcin, cout, bc),
                    ));
                }
                if *padding == Padding::Valid && (h < kh || wd < kw) {
                    return Err(err("conv2d", format!("valid: input {}x{} < kernel {}x{}", h, wd, kh, kw)));
                }
                let g = k::ConvGeom::new(h, wd, cin, cout, kh, kw, *stride, *padding);
                let out = k::conv2d_forward(batch, x.data(), w.data(), b.data(), &g);
                Tensor::new(vec![batch, g.oh, g.ow, cout], out)
            }
            Op::MaxPool2d { window, stride } => {
                self.arity("maxpool2d", inputs, 1)?;
                if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::InvalidAttribute("maxpool2d window/stride must be positive".into()));
                }
                let x = t(0);
                let &[batch, h, w, c] = x.shape() else {
                    return Err(err("maxpool2d", format!("{:?}", x.shape())));
                };
                if h < window.0 || w < window.1 {
                    return Err(err("maxpool2d", format!("input {}x{} < window {:?}", h, w, window)));
                }
                let (oh, ow, out) = k::maxpool2d_forward(batch, x.data(), h, w, c, *window, *stride);
                Tensor::new(vec![batch, oh, ow, c], out)
            }
            Op::GlobalAvgPool => {
                self.arity("global_avg_pool", inputs, 1)?;
                let x = t(0);
                let &[batch, h, w, c] = x.shape() else {
                    return Err(err("global_avg_pool", format!("{:?}", x.shape())));
                };
                Tensor::new(vec![batch, c], k::global_avg_pool_forward(batch, x.data(), h * w, c))
            }
            Op::Flatten => {
                self.arity("flatten", inputs, 1)?;
                let x = t(0);
                if x.shape().len() < 2 {
                    return Err(err("flatten", format!("{:?}", x.shape())));
                }
                let batch = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.reshaped(vec![batch, rest])
            }
            Op::Relu => {
                self.arity("relu", inputs, 1)?;
                let x = t(0);
                Tensor::new(x.shape().to_vec(), k::relu_forward(x.data()))
            }
            Op::Sigmoid => {
                self.arity("sigmoid", inputs, 1)?;
                let x = t(0);
                Tensor::new(x.shape().to_vec(), k::sigmoid_forward(x.data()))
            }
            Op::Softmax => {
                self.arity("softmax", inputs, 1)?;
                let x = t(0);
                let &[_, row] = x.shape() else {
                    return Err(err("softmax", format!("{:?}", x.shape())));
                };
                Tensor::new(x.shape().to_vec(), k::softmax_forward(x.data(), row))
            }
            Op::Dropout { rate, seed } => {
                self.arity("dropout", inputs, 1)?;
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidAttribute(format!("dropout rate {} not in [0,1)", rate)));
                }
                let x = t(0);
                Tensor::new(x.shape().to_vec(), k::dropout_forward(x.data(), *rate, *seed))
            }
            Op::EuclideanNorm => {
                self.arity("euclidean_norm", inputs, 1)?;
                let x = t(0);
                let &[rows, row_len] = x.shape() else {
                    return Err(err("euclidean_norm", format!("{:?}", x.shape())));
                };
                Tensor::new(vec![rows], k::euclidean_norm_forward(x.data(), row_len))
            }
            Op::CrossEntropyLogits { labels } => {
                self.arity("cross_entropy_logits", inputs, 1)?;
                let z = t(0);
                let &[rows, classes] = z.shape() else {
                    return Err(err("cross_entropy_logits", format!("{:?}", z.shape())));
                };
                if labels.len() != rows {
                    return Err(err(
                        "cross_entropy_logits",
                        format!("{} rows vs {} labels", rows, labels.len()),
                    ));
                }
                if labels.iter().any(|&t| t as usize >= classes) {
                    return Err(Error::InvalidAttribute("label out of range".into()));
                }
                Tensor::new(vec![rows], k::cross_entropy_forward(z.data(), classes, labels))
            }
            Op::BinaryCrossEntropy { targets } => {
                self.arity("binary_cross_entropy", inputs, 1)?;
                let p = t(0);
                let rows = match p.shape() {
                    &[rows] => rows,
                    &[rows, 1] => rows,
                    other => return Err(err("binary_cross_entropy", format!("{:?}", other))),
                };
                if targets.len() != rows {
                    return Err(err(
                        "binary_cross_entropy",
                        format!("{} rows vs {} targets", rows, targets.len()),
                    ));
                }
                if targets.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                    return Err(Error::InvalidAttribute("BCE target outside [0,1]".into()));
                }
                Tensor::new(vec![rows], k::bce_forward(p.data(), targets))
            }
            Op::Sign => {
                self.arity("sign", inputs, 1)?;
                let x = t(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| k::sign_value(v)).collect())
            }
            Op::Clip { lo, hi } => {
                self.arity("clip", inputs, 1)?;
                if lo > hi {
                    return Err(Error::InvalidAttribute(format!("clip lo {} > hi {}", lo, hi)));
                }
                let x = t(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.clamp(*lo, *hi)).collect())
            }
            Op::MeanReduce => {
                self.arity("mean_reduce", inputs, 1)?;
                let x = t(0);
                let mean = x.data().iter().sum::<f64>() / x.numel() as f64;
                Ok(Tensor::scalar(mean))
            }
        }
    }

    /// Reverse pass from a scalar loss, seeded with 1. Gradients sum across
    /// fan-out; nodes that do not reach the loss keep no entry (read them as
    /// zeros through [`Gradients::wrt`]).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lnode = self.nodes.get(loss.0).ok_or(Error::NonScalarLoss { numel: 0 })?;
        if lnode.output.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: lnode.output.numel() });
        }
        let mut entries: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        entries.resize_with(loss.0 + 1, || None);
        entries[loss.0] = Some(Tensor::new(lnode.output.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            if entries[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Input) {
                continue;
            }
            let (lower, upper) = entries.split_at_mut(idx);
            let dy = upper[0].as_ref().unwrap();
            let node = &self.nodes[idx];
            let input_grads = self.backward_op(node, dy);
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                match &mut lower[slot.0] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                    empty => *empty = Some(grad),
                }
            }
        }
        Ok(Gradients { entries })
    }

    /// Per-op vector-Jacobian products. Returns one optional gradient per
    /// input; `None` marks inputs that do not require gradients.
    fn backward_op(&self, node: &Node, dy: &Tensor) -> Vec<Option<Tensor>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].output;
        let needs = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let shaped = |i: usize, data: Vec<f64>| {
            Some(Tensor::new(input(i).shape().to_vec(), data).expect("gradient shape"))
        };
        match &node.op {
            Op::Input => vec![],
            Op::Add => {
                let mk = |i: usize| needs(i).then(|| dy.clone());
                vec![mk(0), mk(1)]
            }
            Op::Sub => {
                let da = needs(0).then(|| dy.clone());
                let db =
                    needs(1).then(|| shaped(1, dy.data().iter().map(|g| -g).collect()).unwrap());
                vec![da, db]
            }
            Op::ScalarMul { c } => {
                vec![needs(0)
                    .then(|| shaped(0, dy.data().iter().map(|g| g * c).collect()).unwrap())]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (&[m, kk], &[_, n]) = (a.shape(), b.shape()) else { unreachable!() };
                let grads = k::dense_backward(
                    m,
                    kk,
                    n,
                    a.data(),
                    b.data(),
                    dy.data(),
                    needs(0),
                    needs(1),
                );
                vec![
                    grads.dx.and_then(|d| shaped(0, d)),
                    grads.dw.and_then(|d| shaped(1, d)),
                ]
            }
            Op::Dense => {
                let (x, w) = (input(0), input(1));
                let (&[m, kk], &[_, n]) = (x.shape(), w.shape()) else { unreachable!() };
                let need_w = needs(1) || needs(2);
                let grads =
                    k::dense_backward(m, kk, n, x.data(), w.data(), dy.data(), needs(0), need_w);
                vec![
                    grads.dx.and_then(|d| shaped(0, d)),
                    grads.dw.and_then(|d| if needs(1) { shaped(1, d) } else { None }),
                    grads.db.and_then(|d| if needs(2) { shaped(2, d) } else { None }),
                ]
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (input(0), input(1));
                let (&[batch, h, wd, cin], &[kh, kw, _, cout]) = (x.shape(), w.shape()) else {
                    unreachable!()
                };
                let g = k::ConvGeom::new(h, wd, cin, cout, kh, kw, *stride, *padding);
                let need_w = needs(1) || needs(2);
                let grads = k::conv2d_backward(
                    batch,
                    x.data(),
                    w.data(),
                    dy.data(),
                    &g,
                    needs(0),
                    need_w,
                );
                vec![
                    grads.dx.and_then(|d| shaped(0, d)),
                    grads.dw.and_then(|d| if needs(1) { shaped(1, d) } else { None }),
                    grads.db.and_then(|d| if needs(2) { shaped(2, d) } else { None }),
                ]
            }
            Op::MaxPool2d { window, stride } => {
                let x = input(0);
                let &[batch, h, w, c] = x.shape() else { unreachable!() };
                vec![needs(0).then(|| {
                    shaped(
                        0,
                        k::maxpool2d_backward(batch, x.data(), h, w, c, *window, *stride, dy.data()),
                    )
                    .unwrap()
                })]
            }
            Op::GlobalAvgPool => {
                let x = input(0);
                let &[batch, h, w, c] = x.shape() else { unreachable!() };
                vec![needs(0)
                    .then(|| shaped(0, k::global_avg_pool_backward(batch, dy.data(), h * w, c)).unwrap())]
            }
            Op::Flatten => {
                vec![needs(0).then(|| shaped(0, dy.data().to_vec()).unwrap())]
            }
            Op::Relu => {
                let x = input(0);
                vec![needs(0).then(|| shaped(0, k::relu_backward(x.data(), dy.data())).unwrap())]
            }
            Op::Sigmoid => {
                vec![needs(0)
                    .then(|| shaped(0, k::sigmoid_backward(node.output.data(), dy.data())).unwrap())]
            }
            Op::Softmax => {
                let row = *node.output.shape().last().unwrap();
                vec![needs(0)
                    .then(|| shaped(0, k::softmax_backward(node.output.data(), dy.data(), row)).unwrap())]
            }
            Op::Dropout { rate, seed } => {
                vec![needs(0).then(|| shaped(0, k::dropout_backward(dy.data(), *rate, *seed)).unwrap())]
            }
            Op::EuclideanNorm => {
                let x = input(0);
                let &[_, row_len] = x.shape() else { unreachable!() };
                vec![needs(0).then(|| {
                    shaped(
                        0,
                        k::euclidean_norm_backward(x.data(), node.output.data(), row_len, dy.data()),
                    )
                    .unwrap()
                })]
            }
            Op::CrossEntropyLogits { labels } => {
                let z = input(0);
                let &[_, classes] = z.shape() else { unreachable!() };
                vec![needs(0).then(|| {
                    shaped(0, k::cross_entropy_backward(z.data(), classes, labels, dy.data())).unwrap()
                })]
            }
            Op::BinaryCrossEntropy { targets } => {
                let p = input(0);
                vec![needs(0)
                    .then(|| shaped(0, k::bce_backward(p.data(), targets, dy.data())).unwrap())]
            }
            Op::Sign => {
                // Derivative is zero almost everywhere; taken as zero.
                vec![needs(0).then(|| Tensor::zeros(input(0).shape()))]
            }
            Op::Clip { lo, hi } => {
                let x = input(0);
                vec![needs(0).then(|| {
                    shaped(
                        0,
                        x.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v > *lo && v < *hi { g } else { 0.0 })
                            .collect(),
                    )
                    .unwrap()
                })]
            }
            Op::MeanReduce => {
                let x = input(0);
                let scale = dy.item() / x.numel() as f64;
                vec![needs(0).then(|| Tensor::filled(x.shape(), scale))]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        // f(x) = x·x via elementwise route: mean_reduce(x ⊙ x) on a 1-element tensor
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
        let prod = g.apply(Op::MatMul, &[x, x]).unwrap();
        let loss = g.apply(Op::MeanReduce, &[prod]).unwrap();
        assert_eq!(g.output(loss).item(), 9.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_blocks_gradient_on_negative_input() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-1.0]), true);
        let r = g.apply(Op::Relu, &[x]).unwrap();
        let loss = g.apply(Op::MeanReduce, &[r]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn fanout_gradients_sum() {
        // d/dx of (g(x) + g(x)) == 2·dg/dx exactly
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap(), true);
        let s = g.apply(Op::ScalarMul { c: 2.5 }, &[x]).unwrap();
        let sum = g.apply(Op::Add, &[s, s]).unwrap();
        let loss = g.apply(Op::MeanReduce, &[sum]).unwrap();
        let grads = g.backward(loss).unwrap();
        let single = {
            let mut g2 = Graph::new();
            let x2 = g2.input(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap(), true);
            let s2 = g2.apply(Op::ScalarMul { c: 2.5 }, &[x2]).unwrap();
            let loss2 = g2.apply(Op::MeanReduce, &[s2]).unwrap();
            g2.backward(loss2).unwrap().get(x2).unwrap().clone()
        };
        for (double, single) in grads.get(x).unwrap().data().iter().zip(single.data()) {
            assert_eq!(*double, 2.0 * single);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap(), true);
        let y = g.apply(Op::Relu, &[x]).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { numel: 4 })));
    }

    #[test]
    fn unreachable_node_reads_as_zeros() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
        let dead = g.apply(Op::Relu, &[x]).unwrap();
        let live = g.apply(Op::ScalarMul { c: 1.0 }, &[x]).unwrap();
        let loss = g.apply(Op::MeanReduce, &[live]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(dead).is_none());
        assert_eq!(grads.wrt(&g, dead).data(), &[0.0, 0.0]);
    }
}
