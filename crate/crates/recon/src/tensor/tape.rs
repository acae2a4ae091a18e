//! Define-by-run tape over the fixed op set.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and one reverse sweep computes every gradient. Gradients
//! accumulate by summation across fan-out, so a leaf used N times (shared
//! weights across unrolled iterations) receives the sum of all N paths.

use std::sync::Arc;

use super::conv::{conv_forward, conv_input_grad, conv_weight_grad};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// A self-adjoint real-linear operator (e.g. the SENSE normal operator
/// A^H A on a 2-channel view). Backward applies the operator itself.
pub trait SelfAdjointMap<T: Scalar>: Send + Sync {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T>;
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    /// value * compile-time constant
    ScaleConst(T),
    /// inputs [s(1), t]: broadcast scalar times tensor
    MulScalar,
    Relu,
    /// inputs [x, w, b]
    Conv2d { stride: usize, pad: usize },
    /// inputs [x, w]; weight layout [Cin, Cout, k, k]
    ConvTranspose2d { stride: usize, pad: usize },
    /// channel concat along axis 1 of [B,C,H,W]
    ConcatChannels,
    /// inputs [pred, target]: sqrt(sum((p-t)^2))
    L2Loss,
    Mean,
    /// inputs [a, b]: sum(a*b), the real-view inner product
    Dot,
    /// inputs [a(1), b(1)]: a / b
    DivScalar,
    Sqrt,
    Exp,
    SelfAdjoint(Arc<dyn SelfAdjointMap<T>>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recorded computation; owns every intermediate value needed for backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let needs = match op {
            Op::Leaf => value.wants_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, inputs, value, needs_grad: needs });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf if `t.wants_grad()`, else a constant.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], t.requires_grad(false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::ScaleConst(c), vec![a], v)
    }

    /// Broadcast scalar node times tensor node.
    pub fn mul_scalar(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item()?;
        let v = self.value(t).scale(sv);
        Ok(self.push(Op::MulScalar, vec![s, t], v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu, vec![a], v)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = conv_forward(self.value(x), self.value(w), Some(self.value(b)), stride, pad)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], v))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = super::conv::conv_transpose2d_raw(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(Op::ConvTranspose2d { stride, pad }, vec![x, w], v))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!(
                "concat_channels: incompatible shapes {:?} vs {:?}",
                sa, sb
            )));
        }
        let (bn, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let mut out = Tensor::zeros(&[bn, ca + cb, h, w]);
        let plane = h * w;
        for bi in 0..bn {
            let dst = &mut out.data_mut()[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
            dst[..ca * plane]
                .copy_from_slice(&self.value(a).data()[bi * ca * plane..(bi + 1) * ca * plane]);
            dst[ca * plane..]
                .copy_from_slice(&self.value(b).data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        Ok(self.push(Op::ConcatChannels, vec![a, b], out))
    }

    /// ||pred - target||_2 (root of the sum of squared differences).
    pub fn l2_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.value(pred).sub(self.value(target))?;
        let v = Tensor::scalar(d.norm2());
        Ok(self.push(Op::L2Loss, vec![pred, target], v))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean, vec![a], v)
    }

    /// Real-view inner product sum(a .* b).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(Op::Dot, vec![a, b], v))
    }

    pub fn div_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).item()? / self.value(b).item()?);
        Ok(self.push(Op::DivScalar, vec![a, b], v))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).item()?.sqrt());
        Ok(self.push(Op::Sqrt, vec![a], v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).item()?.exp());
        Ok(self.push(Op::Exp, vec![a], v))
    }

    /// Apply a self-adjoint linear operator; backward applies it again.
    pub fn self_adjoint(&mut self, op: Arc<dyn SelfAdjointMap<T>>, x: NodeId) -> NodeId {
        let v = op.apply(self.value(x));
        self.push(Op::SelfAdjoint(op), vec![x], v)
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// nodes not on a differentiable path get `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("backward: loss node not in this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                g.axpy(T::one(), &delta).expect("gradient shape mismatch");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.accumulate(grads, ins[0], g.clone());
                self.accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], g.clone());
                self.accumulate(grads, ins[1], g.scale(-T::one()));
            }
            Op::ScaleConst(c) => {
                self.accumulate(grads, ins[0], g.scale(*c));
            }
            Op::MulScalar => {
                let s = self.value(ins[0]).item()?;
                let t = self.value(ins[1]);
                self.accumulate(grads, ins[0], Tensor::scalar(g.dot(t)?));
                self.accumulate(grads, ins[1], g.scale(s));
            }
            Op::Relu => {
                let x = self.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                self.accumulate(grads, ins[0], gx);
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (self.value(ins[0]), self.value(ins[1]));
                if self.nodes[ins[0].0].needs_grad {
                    let gx = conv_input_grad(g, w, x.shape(), *stride, *pad)?;
                    self.accumulate(grads, ins[0], gx);
                }
                if self.nodes[ins[1].0].needs_grad || self.nodes[ins[2].0].needs_grad {
                    let (gw, gb) = conv_weight_grad(x, g, w.shape(), *stride, *pad)?;
                    self.accumulate(grads, ins[1], gw);
                    self.accumulate(grads, ins[2], gb);
                }
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (x, w) = (self.value(ins[0]), self.value(ins[1]));
                if self.nodes[ins[0].0].needs_grad {
                    // forward conv of the output grad recovers the input grad
                    let gx = conv_forward(g, w, None, *stride, *pad)?;
                    self.accumulate(grads, ins[0], gx);
                }
                if self.nodes[ins[1].0].needs_grad {
                    // the incoming grad plays the virtual conv's input and the
                    // recorded input plays its output grad
                    let (gw, _) = conv_weight_grad(g, x, w.shape(), *stride, *pad)?;
                    self.accumulate(grads, ins[1], gw);
                }
            }
            Op::ConcatChannels => {
                let (sa, sb) = (self.value(ins[0]).shape(), self.value(ins[1]).shape());
                let (bn, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for bi in 0..bn {
                    let src = &g.data()[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
                    ga.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
                        .copy_from_slice(&src[..ca * plane]);
                    gb.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
                        .copy_from_slice(&src[ca * plane..]);
                }
                self.accumulate(grads, ins[0], ga);
                self.accumulate(grads, ins[1], gb);
            }
            Op::L2Loss => {
                let d = self.value(ins[0]).sub(self.value(ins[1]))?;
                let loss = node.value.item()?;
                let gs = g.item()?;
                // d/dp ||p-t|| = (p-t)/||p-t||; subgradient 0 at p == t
                let gp = if loss > T::zero() { d.scale(gs / loss) } else { d.scale(T::zero()) };
                self.accumulate(grads, ins[1], gp.scale(-T::one()));
                self.accumulate(grads, ins[0], gp);
            }
            Op::Mean => {
                let n = self.value(ins[0]).len();
                let gv = g.item()? / T::of_f64(n as f64);
                self.accumulate(grads, ins[0], Tensor::full(self.value(ins[0]).shape(), gv));
            }
            Op::Dot => {
                let gs = g.item()?;
                self.accumulate(grads, ins[0], self.value(ins[1]).scale(gs));
                self.accumulate(grads, ins[1], self.value(ins[0]).scale(gs));
            }
            Op::DivScalar => {
                let a = self.value(ins[0]).item()?;
                let b = self.value(ins[1]).item()?;
                let gs = g.item()?;
                self.accumulate(grads, ins[0], Tensor::scalar(gs / b));
                self.accumulate(grads, ins[1], Tensor::scalar(-gs * a / (b * b)));
            }
            Op::Sqrt => {
                let y = node.value.item()?;
                let gs = g.item()?;
                let two = T::of_f64(2.0);
                let gx = if y > T::zero() { gs / (two * y) } else { T::zero() };
                self.accumulate(grads, ins[0], Tensor::scalar(gx));
            }
            Op::Exp => {
                let y = node.value.item()?;
                self.accumulate(grads, ins[0], Tensor::scalar(g.item()? * y));
            }
            Op::SelfAdjoint(op) => {
                self.accumulate(grads, ins[0], op.apply(g));
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64_slice(&[4], &[1., 2., 3., 4.]).unwrap().requires_grad(true));
        let ones = g.constant(Tensor::full(&[4], 1.0));
        let s = g.dot(w, ones).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_zeroes_negative_branch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[3], &[-2., -1., -0.5]).unwrap().requires_grad(true));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let s = g.dot(y, ones).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_basic_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64_slice(&[3], &[-1., 0., 2.]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_loss_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64_slice(&[2], &[3., 4.]).unwrap());
        let t = g.constant(Tensor::zeros(&[2]));
        let l = g.l2_loss(p, t).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 5.0);

        let same = g.l2_loss(p, p).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn fanout_accumulates() {
        // y = <w, w> has gradient 2w
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64_slice(&[3], &[1., -2., 3.]).unwrap().requires_grad(true));
        let y = g.dot(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[3]).requires_grad(true));
        let y = g.relu(w);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn mul_scalar_grads() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::scalar(3.0).requires_grad(true));
        let t = g.leaf(Tensor::from_f64_slice(&[2], &[1., 4.]).unwrap().requires_grad(true));
        let y = g.mul_scalar(s, t).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 12.0]);
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let l = g.dot(y, ones).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().item().unwrap(), 5.0);
        assert_eq!(grads.get(t).unwrap().data(), &[3.0, 3.0]);
    }
}
