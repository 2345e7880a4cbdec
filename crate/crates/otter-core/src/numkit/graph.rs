//! Reverse-mode tape over the kernels in [`crate::numkit::ops`].
//!
//! The network architecture is static, so a forward pass appends nodes to a
//! tape and `backward` walks it once in reverse. Parameters enter through
//! [`Graph::param`] and are cached, so a weight used at several time steps
//! (ConvLSTM gates, the shared CBAM MLP) accumulates all its contributions
//! into one node.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::ops::{self, Activation, PoolMode};
use crate::numkit::tensor::{ParamId, ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Pool2d {
        mode: PoolMode,
        window: usize,
        stride: usize,
    },
    GlobalPool {
        mode: PoolMode,
    },
    ChannelReduce {
        mode: PoolMode,
    },
    Activation {
        kind: Activation,
    },
    Linear {
        has_bias: bool,
    },
    Upsample2,
    Concat {
        ca: usize,
        cb: usize,
    },
    AddBroadcast,
    MulBroadcast,
    Sub,
    Div,
    Min2,
    Max2,
    /// a*x + b with scalar constants; only the slope matters in reverse.
    Affine {
        a: T,
    },
    Reshape {
        from: Vec<usize>,
    },
    Gather {
        indices: Arc<Vec<usize>>,
    },
    BatchSelect {
        rows: Arc<Vec<usize>>,
    },
    /// Elementwise stable binary cross-entropy on logits against fixed targets.
    BceWithLogits {
        targets: Arc<Tensor<T>>,
    },
    SumAll,
    /// Test-only op with a deliberately wrong backward (doubles the gradient).
    #[cfg(test)]
    CorruptDouble,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<NodeId>, op: Op<T>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => false, // overridden by input()/param()
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (perturbed by grad checks).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(value, vec![], Op::Leaf);
        self.nodes[id.0].needs_grad = true;
        id
    }

    /// Non-differentiable leaf: data batches, assignment targets, grid offsets.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    /// Insert a parameter, reusing the node if it already appears in this tape.
    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(ps.get(id).value.clone(), vec![], Op::Leaf);
        self.nodes[node.0].needs_grad = true;
        self.param_nodes.insert(id, node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            stride,
            padding,
        )?;
        let mut parents = vec![x, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            out,
            parents,
            Op::Conv2d {
                stride,
                padding,
                has_bias: bias.is_some(),
            },
        ))
    }

    pub fn pool2d(
        &mut self,
        x: NodeId,
        mode: PoolMode,
        window: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let out = ops::pool2d_forward(&self.nodes[x.0].value, mode, window, stride)?;
        Ok(self.push(
            out,
            vec![x],
            Op::Pool2d {
                mode,
                window,
                stride,
            },
        ))
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let out = ops::global_pool_forward(&self.nodes[x.0].value, mode)?;
        Ok(self.push(out, vec![x], Op::GlobalPool { mode }))
    }

    pub fn channel_reduce(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let out = ops::channel_reduce_forward(&self.nodes[x.0].value, mode)?;
        Ok(self.push(out, vec![x], Op::ChannelReduce { mode }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let out = ops::activation_forward(&self.nodes[x.0].value, kind);
        self.push(out, vec![x], Op::Activation { kind })
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = ops::linear_forward(
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
        )?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            out,
            parents,
            Op::Linear {
                has_bias: bias.is_some(),
            },
        ))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::upsample_nearest2_forward(&self.nodes[x.0].value)?;
        Ok(self.push(out, vec![x], Op::Upsample2))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ca = self.nodes[a.0].value.shape()[1];
        let cb = self.nodes[b.0].value.shape()[1];
        let out = ops::concat_channels_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, vec![a, b], Op::Concat { ca, cb }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add_broadcast_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, vec![a, b], Op::AddBroadcast))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul_broadcast_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, vec![a, b], Op::MulBroadcast))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= bv;
        }
        Ok(self.push(out, vec![a, b], Op::Sub))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o / bv;
        }
        Ok(self.push(out, vec![a, b], Op::Div))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("min2", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            if bv < *o {
                *o = bv;
            }
        }
        Ok(self.push(out, vec![a, b], Op::Min2))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("max2", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            if bv > *o {
                *o = bv;
            }
        }
        Ok(self.push(out, vec![a, b], Op::Max2))
    }

    /// a*x + b with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let (av, bv) = (T::from_f64(a), T::from_f64(b));
        let out = self.nodes[x.0].value.map(|v| av * v + bv);
        self.push(out, vec![x], Op::Affine { a: av })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from = self.nodes[x.0].value.shape().to_vec();
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(out, vec![x], Op::Reshape { from }))
    }

    /// Select flat elements; output is 1-D.
    pub fn gather(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices.iter() {
            if i >= src.len() {
                return Err(Error::shape(
                    "gather",
                    format!("index {i} out of bounds for {} elements", src.len()),
                ));
            }
            data.push(src.data()[i]);
        }
        let out = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(out, vec![x], Op::Gather { indices }))
    }

    /// Select entries along the leading (batch) axis.
    pub fn batch_select(&mut self, x: NodeId, rows: Arc<Vec<usize>>) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        let b = src.shape()[0];
        let row_len = src.len() / b;
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows.iter() {
            if r >= b {
                return Err(Error::shape(
                    "batch_select",
                    format!("row {r} out of bounds for batch {b}"),
                ));
            }
            data.extend_from_slice(&src.data()[r * row_len..][..row_len]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, vec![x], Op::BatchSelect { rows }))
    }

    /// Stable elementwise BCE on logits: max(x,0) - x*t + ln(1 + e^(-|x|)).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Arc<Tensor<T>>) -> Result<NodeId> {
        let x = &self.nodes[logits.0].value;
        if x.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", x.shape(), targets.shape()),
            ));
        }
        let mut out = Tensor::zeros(x.shape());
        for ((o, &xv), &tv) in out.data_mut().iter_mut().zip(x.data()).zip(targets.data()) {
            let pos = xv.maximum(T::ZERO);
            *o = pos - xv * tv + (T::ONE + (-xv.abs()).exp()).ln();
        }
        Ok(self.push(out, vec![logits], Op::BceWithLogits { targets }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), vec![x], Op::SumAll)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_double(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.clone();
        self.push(out, vec![x], Op::CorruptDouble)
    }

    // ---- reverse pass ----

    /// Run the reverse pass from a scalar output node.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must be scalar, got {:?}",
                    self.nodes[out.0].value.shape()
                ),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..self.nodes.len()).rev() {
            let grad_out = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let parent_grads = self.node_backward(i, &grad_out)?;
            self.grads[i] = Some(grad_out);
            let parents = self.nodes[i].parents.clone();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                match &mut self.grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn parent_value(&self, node: usize, k: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[node].parents[k].0].value
    }

    fn parent_needs_grad(&self, node: usize, k: usize) -> bool {
        self.nodes[self.nodes[node].parents[k].0].needs_grad
    }

    fn node_backward(&self, i: usize, grad_out: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return Ok(vec![None; node.parents.len()]);
        }
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                stride,
                padding,
                has_bias,
            } => {
                let (gx, gk, gb) = ops::conv2d_backward(
                    self.parent_value(i, 0),
                    self.parent_value(i, 1),
                    *has_bias,
                    *stride,
                    *padding,
                    grad_out,
                )?;
                let gx = self.parent_needs_grad(i, 0).then_some(gx);
                let mut grads = vec![gx, Some(gk)];
                if *has_bias {
                    grads.push(gb);
                }
                grads
            }
            Op::Pool2d {
                mode,
                window,
                stride,
            } => vec![Some(ops::pool2d_backward(
                self.parent_value(i, 0),
                *mode,
                *window,
                *stride,
                grad_out,
            )?)],
            Op::GlobalPool { mode } => vec![Some(ops::global_pool_backward(
                self.parent_value(i, 0),
                *mode,
                grad_out,
            )?)],
            Op::ChannelReduce { mode } => vec![Some(ops::channel_reduce_backward(
                self.parent_value(i, 0),
                *mode,
                grad_out,
            )?)],
            Op::Activation { kind } => vec![Some(ops::activation_backward(
                self.parent_value(i, 0),
                *kind,
                grad_out,
            ))],
            Op::Linear { has_bias } => {
                let (gx, gw, gb) = ops::linear_backward(
                    self.parent_value(i, 0),
                    self.parent_value(i, 1),
                    *has_bias,
                    grad_out,
                )?;
                let mut grads = vec![Some(gx), Some(gw)];
                if *has_bias {
                    grads.push(gb);
                }
                grads
            }
            Op::Upsample2 => vec![Some(ops::upsample_nearest2_backward(
                self.parent_value(i, 0),
                grad_out,
            )?)],
            Op::Concat { ca, cb } => {
                let (ga, gb) = ops::concat_channels_backward(*ca, *cb, grad_out)?;
                vec![Some(ga), Some(gb)]
            }
            Op::AddBroadcast => {
                let (ga, gb) = ops::add_broadcast_backward(
                    self.parent_value(i, 0),
                    self.parent_value(i, 1),
                    grad_out,
                )?;
                vec![Some(ga), Some(gb)]
            }
            Op::MulBroadcast => {
                let (ga, gb) = ops::mul_broadcast_backward(
                    self.parent_value(i, 0),
                    self.parent_value(i, 1),
                    grad_out,
                )?;
                vec![Some(ga), Some(gb)]
            }
            Op::Sub => {
                let ga = grad_out.clone();
                let gb = grad_out.map(|v| -v);
                vec![Some(ga), Some(gb)]
            }
            Op::Div => {
                let a = self.parent_value(i, 0);
                let b = self.parent_value(i, 1);
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for k in 0..a.len() {
                    let g = grad_out.data()[k];
                    let bv = b.data()[k];
                    ga.data_mut()[k] = g / bv;
                    gb.data_mut()[k] = -g * a.data()[k] / (bv * bv);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Min2 | Op::Max2 => {
                let a = self.parent_value(i, 0);
                let b = self.parent_value(i, 1);
                let take_b = |av: T, bv: T| match node.op {
                    Op::Min2 => bv < av,
                    _ => bv > av,
                };
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for k in 0..a.len() {
                    if take_b(a.data()[k], b.data()[k]) {
                        gb.data_mut()[k] = grad_out.data()[k];
                    } else {
                        ga.data_mut()[k] = grad_out.data()[k];
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Affine { a } => {
                let a = *a;
                vec![Some(grad_out.map(|v| a * v))]
            }
            Op::Reshape { from } => {
                vec![Some(grad_out.clone().reshape(from)?)]
            }
            Op::Gather { indices } => {
                let src = self.parent_value(i, 0);
                let mut g = Tensor::zeros(src.shape());
                for (k, &idx) in indices.iter().enumerate() {
                    g.data_mut()[idx] += grad_out.data()[k];
                }
                vec![Some(g)]
            }
            Op::BatchSelect { rows } => {
                let src = self.parent_value(i, 0);
                let row_len = src.len() / src.shape()[0];
                let mut g = Tensor::zeros(src.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut g.data_mut()[r * row_len..][..row_len];
                    for (d, &gv) in dst
                        .iter_mut()
                        .zip(&grad_out.data()[k * row_len..][..row_len])
                    {
                        *d += gv;
                    }
                }
                vec![Some(g)]
            }
            Op::BceWithLogits { targets } => {
                let x = self.parent_value(i, 0);
                let mut g = Tensor::zeros(x.shape());
                for k in 0..x.len() {
                    let s = ops::sigmoid_scalar(x.data()[k]);
                    g.data_mut()[k] = grad_out.data()[k] * (s - targets.data()[k]);
                }
                vec![Some(g)]
            }
            Op::SumAll => {
                let src = self.parent_value(i, 0);
                let g = grad_out.data()[0];
                vec![Some(Tensor::full(src.shape(), g))]
            }
            #[cfg(test)]
            Op::CorruptDouble => {
                vec![Some(grad_out.map(|v| v + v))]
            }
        })
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameters touched by this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.param_nodes
            .iter()
            .filter_map(|(&pid, &nid)| self.grad(nid).map(|g| (pid, g)))
    }

    /// Accumulate this tape's parameter gradients into the set.
    pub fn accumulate_into(&self, ps: &mut ParamSet<T>) {
        let mut items: Vec<(ParamId, &Tensor<T>)> = self.param_grads().collect();
        items.sort_by_key(|(pid, _)| *pid);
        for (pid, g) in items {
            ps.accumulate_grad(pid, g);
        }
    }
}
