//! Reverse-mode differentiation on an append-only tape.
//!
//! Values are computed eagerly as nodes are pushed. `backward` does not
//! write raw gradient buffers: it appends *adjoint nodes* to the same tape,
//! so a gradient is itself a differentiable graph value. Running `backward`
//! on an expression built from [`Graph::input_gradient`] therefore yields
//! second-order gradients, which the gradient-norm penalty needs.
//!
//! Every op's adjoint is expressed with ops from this same enum (the set is
//! closed under differentiation). The three convolution kernels are the
//! three partial contractions of one trilinear form, which is exactly the
//! property that closes the set.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{conv_fwd, conv_input_grad, conv_weight_grad};
use crate::error::{Error, Result};
use crate::map::SpatialMap;
use crate::scalar::{num, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    LeakyRelu(NodeId, T),
    Abs(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Conv { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvInputGrad { gy: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvWeightGrad { x: NodeId, gy: NodeId, stride: usize, pad: usize },
    BroadcastChannel(NodeId),
    ChannelSum(NodeId),
    BroadcastScalar(NodeId),
    ReduceSum(NodeId),
    BroadcastSpatial(NodeId),
    SpatialSum(NodeId),
    Concat(Vec<NodeId>),
    SliceChannels { x: NodeId, from: usize },
    InjectChannels { x: NodeId, from: usize },
    PixelShuffle { x: NodeId, r: usize },
    PixelUnshuffle { x: NodeId, r: usize },
    MapApply { x: NodeId, map: Arc<SpatialMap<T>>, transposed: bool },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradient nodes produced by one reverse sweep, indexed by the ids that
/// existed when the sweep started. Nodes the root does not depend on have
/// no entry.
#[derive(Debug)]
pub struct GradMap {
    of: Vec<Option<NodeId>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.of.get(id.0).copied().flatten()
    }
}

pub struct Graph<T> {
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

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    fn push_node(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(Op::Leaf, value)
    }

    pub fn zeros_like(&mut self, id: NodeId) -> NodeId {
        let s = self.shape(id);
        self.leaf(Tensor::zeros(s))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_node(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_node(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_node(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push_node(Op::Scale(a, s), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a).expect("same node, same shape")
    }

    /// x - c elementwise, c constant.
    pub fn sub_const(&mut self, a: NodeId, c: T) -> NodeId {
        let k = self.leaf(Tensor::filled(self.shape(a), c));
        self.sub(a, k).expect("same shape by construction")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> Result<NodeId> {
        if slope < T::zero() || slope >= T::one() {
            return Err(Error::invalid("leaky_relu", format!("slope {slope} outside [0,1)")));
        }
        let v = self.value(a).map(|x| if x > T::zero() { x } else { slope * x });
        Ok(self.push_node(Op::LeakyRelu(a, slope), v))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        self.push_node(Op::Abs(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push_node(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| T::one() / x);
        self.push_node(Op::Recip(a), v)
    }

    // ---- convolution ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = conv_fwd(self.value(x), self.value(w), stride, pad)?;
        let y = self.push_node(Op::Conv { x, w, stride, pad }, v);
        match bias {
            None => Ok(y),
            Some(b) => {
                let bb = self.broadcast_channel(b, self.shape(y))?;
                self.add(y, bb)
            }
        }
    }

    // ---- broadcasts and reductions ----

    /// (1,1,1,c) -> (n,c,h,w).
    pub fn broadcast_channel(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(x);
        if s.n != 1 || s.c != 1 || s.h != 1 || s.w != shape.c {
            return Err(Error::shape("broadcast_channel", s, shape));
        }
        let src = self.value(x).clone();
        let plane = shape.h * shape.w;
        let mut data = vec![T::zero(); shape.numel()];
        for n in 0..shape.n {
            for c in 0..shape.c {
                let v = src.data()[c];
                data[(n * shape.c + c) * plane..(n * shape.c + c + 1) * plane].fill(v);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(Op::BroadcastChannel(x), value))
    }

    /// (n,c,h,w) -> (1,1,1,c), summing over batch and space.
    pub fn channel_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let plane = s.h * s.w;
        let src = self.value(x).clone();
        let mut data = vec![T::zero(); s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for i in 0..plane {
                    data[c] += src.data()[base + i];
                }
            }
        }
        let value = Tensor::new(Shape::new(1, 1, 1, s.c), data).expect("c >= 1");
        self.push_node(Op::ChannelSum(x), value)
    }

    pub fn broadcast_scalar(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(x);
        if !s.is_scalar() {
            return Err(Error::shape("broadcast_scalar", s, shape));
        }
        let v = Tensor::filled(shape, self.scalar_value(x));
        Ok(self.push_node(Op::BroadcastScalar(x), v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push_node(Op::ReduceSum(x), Tensor::scalar(acc))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / num::<T>(n as f64))
    }

    /// (n,1,1,1) -> (n,c,h,w).
    pub fn broadcast_spatial(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(x);
        if s.n != shape.n || s.c != 1 || s.h != 1 || s.w != 1 {
            return Err(Error::shape("broadcast_spatial", s, shape));
        }
        let src = self.value(x).clone();
        let per = shape.c * shape.h * shape.w;
        let mut data = vec![T::zero(); shape.numel()];
        for n in 0..shape.n {
            data[n * per..(n + 1) * per].fill(src.data()[n]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(Op::BroadcastSpatial(x), value))
    }

    /// (n,c,h,w) -> (n,1,1,1), summing each sample.
    pub fn spatial_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let per = s.c * s.h * s.w;
        let src = self.value(x).clone();
        let mut data = vec![T::zero(); s.n];
        for n in 0..s.n {
            for i in 0..per {
                data[n] += src.data()[n * per + i];
            }
        }
        let value = Tensor::new(Shape::new(s.n, 1, 1, 1), data).expect("n >= 1");
        self.push_node(Op::SpatialSum(x), value)
    }

    /// Per-sample mean over (c,h,w): (n,c,h,w) -> (n,1,1,1).
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let per = (s.c * s.h * s.w) as f64;
        let t = self.spatial_sum(x);
        self.scale(t, T::one() / num::<T>(per))
    }

    // ---- channel layout ----

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no parts"));
        }
        let first = self.shape(parts[0]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape("concat_channels", first, s));
            }
            total_c += s.c;
        }
        let out_shape = Shape::new(first.n, total_c, first.h, first.w);
        let plane = first.h * first.w;
        let mut data = vec![T::zero(); out_shape.numel()];
        let mut base_c = 0;
        for &p in parts {
            let s = self.shape(p);
            let src = self.value(p).data();
            for n in 0..s.n {
                let dst_off = (n * total_c + base_c) * plane;
                let src_off = n * s.c * plane;
                data[dst_off..dst_off + s.c * plane]
                    .copy_from_slice(&src[src_off..src_off + s.c * plane]);
            }
            base_c += s.c;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_node(Op::Concat(parts.to_vec()), value))
    }

    /// Channels [from, to) of x.
    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if from >= to || to > s.c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {from}..{to} outside 0..{}", s.c),
            ));
        }
        let plane = s.h * s.w;
        let c = to - from;
        let mut data = vec![T::zero(); s.n * c * plane];
        let src = self.value(x).data();
        for n in 0..s.n {
            let src_off = (n * s.c + from) * plane;
            data[n * c * plane..(n + 1) * c * plane]
                .copy_from_slice(&src[src_off..src_off + c * plane]);
        }
        let value = Tensor::new(Shape::new(s.n, c, s.h, s.w), data)?;
        Ok(self.push_node(Op::SliceChannels { x, from }, value))
    }

    /// Place x's channels at offset `from` inside `total` channels of zeros.
    pub fn inject_channels(&mut self, x: NodeId, from: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if from + s.c > total {
            return Err(Error::invalid(
                "inject_channels",
                format!("{} channels at offset {from} exceed {total}", s.c),
            ));
        }
        let plane = s.h * s.w;
        let mut data = vec![T::zero(); s.n * total * plane];
        let src = self.value(x).data();
        for n in 0..s.n {
            let dst_off = (n * total + from) * plane;
            data[dst_off..dst_off + s.c * plane]
                .copy_from_slice(&src[n * s.c * plane..(n + 1) * s.c * plane]);
        }
        let value = Tensor::new(Shape::new(s.n, total, s.h, s.w), data)?;
        Ok(self.push_node(Op::InjectChannels { x, from }, value))
    }

    // ---- pixel shuffle ----

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let value = crate::image::pixel_shuffle(self.value(x), r)?;
        Ok(self.push_node(Op::PixelShuffle { x, r }, value))
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let value = crate::image::pixel_unshuffle(self.value(x), r)?;
        Ok(self.push_node(Op::PixelUnshuffle { x, r }, value))
    }

    // ---- sparse spatial maps ----

    pub fn apply_map(&mut self, x: NodeId, map: Arc<SpatialMap<T>>) -> Result<NodeId> {
        let value = map.apply(self.value(x))?;
        Ok(self.push_node(Op::MapApply { x, map, transposed: false }, value))
    }

    pub fn apply_map_transposed(&mut self, x: NodeId, map: Arc<SpatialMap<T>>) -> Result<NodeId> {
        let value = map.apply_transposed(self.value(x))?;
        Ok(self.push_node(Op::MapApply { x, map, transposed: true }, value))
    }

    // ---- reverse sweep ----

    fn accumulate(
        &mut self,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        grads[target.0] = Some(match grads[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    /// Append adjoint nodes for every ancestor of `root` and return the map
    /// from original node ids to their gradient nodes. `root` must be scalar.
    pub fn backward(&mut self, root: NodeId) -> Result<GradMap> {
        if root.0 >= self.nodes.len() {
            return Err(Error::NotInGraph { id: root.0 });
        }
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::NonScalarRoot { shape: root_shape.to_string() });
        }
        let frontier = self.nodes.len();
        let mut grads: Vec<Option<NodeId>> = vec![None; frontier];
        grads[root.0] = Some(self.leaf(Tensor::scalar(T::one())));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = NodeId(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    let neg = self.scale(g, -T::one());
                    self.accumulate(&mut grads, b, neg)?;
                }
                Op::Mul(a, b) => {
                    if a == b {
                        // d(x^2) = 2 x dx, emitted once so the sweep stays single-visit.
                        let gx = self.mul(g, a)?;
                        let gx2 = self.scale(gx, num::<T>(2.0));
                        self.accumulate(&mut grads, a, gx2)?;
                    } else {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut grads, a, ga)?;
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.scale(g, s);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = self.value(a).map(|x| if x > T::zero() { T::one() } else { slope });
                    let m = self.leaf(mask);
                    let ga = self.mul(g, m)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Abs(a) => {
                    let sign = self.value(a).map(|x| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    let m = self.leaf(sign);
                    let ga = self.mul(g, m)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Sqrt(a) => {
                    // d sqrt = g / (2 sqrt(a)) = 0.5 * g * recip(out)
                    let r = self.recip(out);
                    let gr = self.mul(g, r)?;
                    let ga = self.scale(gr, num::<T>(0.5));
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Recip(a) => {
                    // d(1/a) = -g / a^2 = -g * out^2
                    let o2 = self.mul(out, out)?;
                    let go = self.mul(g, o2)?;
                    let ga = self.scale(go, -T::one());
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Conv { x, w, stride, pad } => {
                    let in_shape = self.shape(x);
                    let w_shape = self.shape(w);
                    let gx_val = conv_input_grad(self.value(g), self.value(w), stride, pad, in_shape)?;
                    let gx = self.push_node(Op::ConvInputGrad { gy: g, w, stride, pad }, gx_val);
                    self.accumulate(&mut grads, x, gx)?;
                    let gw_val = conv_weight_grad(self.value(x), self.value(g), stride, pad, w_shape)?;
                    let gw = self.push_node(Op::ConvWeightGrad { x, gy: g, stride, pad }, gw_val);
                    self.accumulate(&mut grads, w, gw)?;
                }
                Op::ConvInputGrad { gy, w, stride, pad } => {
                    // out = gy (*)^T w; cotangent u plays the conv input role.
                    let g_gy_val = conv_fwd(self.value(g), self.value(w), stride, pad)?;
                    let g_gy = self.push_node(Op::Conv { x: g, w, stride, pad }, g_gy_val);
                    self.accumulate(&mut grads, gy, g_gy)?;
                    let w_shape = self.shape(w);
                    let g_w_val = conv_weight_grad(self.value(g), self.value(gy), stride, pad, w_shape)?;
                    let g_w = self.push_node(Op::ConvWeightGrad { x: g, gy, stride, pad }, g_w_val);
                    self.accumulate(&mut grads, w, g_w)?;
                }
                Op::ConvWeightGrad { x, gy, stride, pad } => {
                    // out = x (*)_w gy; cotangent u plays the weight role.
                    let in_shape = self.shape(x);
                    let g_x_val = conv_input_grad(self.value(gy), self.value(g), stride, pad, in_shape)?;
                    let g_x = self.push_node(Op::ConvInputGrad { gy, w: g, stride, pad }, g_x_val);
                    self.accumulate(&mut grads, x, g_x)?;
                    let g_gy_val = conv_fwd(self.value(x), self.value(g), stride, pad)?;
                    let g_gy = self.push_node(Op::Conv { x, w: g, stride, pad }, g_gy_val);
                    self.accumulate(&mut grads, gy, g_gy)?;
                }
                Op::BroadcastChannel(x) => {
                    let ga = self.channel_sum(g);
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::ChannelSum(x) => {
                    let shape = self.shape(x);
                    let ga = self.broadcast_channel(g, shape)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::BroadcastScalar(x) => {
                    let ga = self.sum(g);
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::ReduceSum(x) => {
                    let shape = self.shape(x);
                    let ga = self.broadcast_scalar(g, shape)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::BroadcastSpatial(x) => {
                    let ga = self.spatial_sum(g);
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::SpatialSum(x) => {
                    let shape = self.shape(x);
                    let ga = self.broadcast_spatial(g, shape)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::Concat(parts) => {
                    let mut from = 0;
                    for p in parts {
                        let c = self.shape(p).c;
                        let gp = self.slice_channels(g, from, from + c)?;
                        self.accumulate(&mut grads, p, gp)?;
                        from += c;
                    }
                }
                Op::SliceChannels { x, from } => {
                    let total = self.shape(x).c;
                    let ga = self.inject_channels(g, from, total)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::InjectChannels { x, from } => {
                    let c = self.shape(x).c;
                    let ga = self.slice_channels(g, from, from + c)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::PixelShuffle { x, r } => {
                    let ga = self.pixel_unshuffle(g, r)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::PixelUnshuffle { x, r } => {
                    let ga = self.pixel_shuffle(g, r)?;
                    self.accumulate(&mut grads, x, ga)?;
                }
                Op::MapApply { x, map, transposed } => {
                    let ga = if transposed {
                        self.apply_map(g, map)?
                    } else {
                        self.apply_map_transposed(g, map)?
                    };
                    self.accumulate(&mut grads, x, ga)?;
                }
            }
        }
        Ok(GradMap { of: grads })
    }

    /// Gradient of `root` w.r.t. one node, as a graph value whose own
    /// construction is differentiable. Unreached inputs get a zero leaf.
    pub fn input_gradient(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId> {
        if wrt.0 >= self.nodes.len() {
            return Err(Error::NotInGraph { id: wrt.0 });
        }
        let grads = self.backward(root)?;
        Ok(match grads.get(wrt) {
            Some(id) => id,
            None => self.zeros_like(wrt),
        })
    }
}

// ---- parameters ----

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameters with gradient slots, in a stable insertion order that
/// fixes checkpoint layout and update order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param_set", format!("duplicate name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::invalid("param_set", format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::shape("param_set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Overwrite the accumulated gradient, for callers that compute
    /// gradients outside a graph.
    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::shape("param_set", p.value.shape(), grad.shape()));
        }
        p.grad = grad;
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Leaf every parameter value into the graph; index i of the result is
    /// the node for ParamId(i).
    pub fn mount(&self, graph: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| graph.leaf(p.value.clone())).collect()
    }

    /// Read gradients of the mounted leaves out of the graph and add them
    /// into the grad slots.
    pub fn accumulate_grads(
        &mut self,
        graph: &Graph<T>,
        grads: &GradMap,
        mounts: &[NodeId],
    ) -> Result<()> {
        for (p, &node) in self.params.iter_mut().zip(mounts) {
            if let Some(gid) = grads.get(node) {
                p.grad = p.grad.zip_map(graph.value(gid), "accumulate_grads", |a, b| a + b)?;
            }
        }
        Ok(())
    }

    /// Snapshot as named tensors, in insertion order.
    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Load values for every parameter present in `entries`; names must
    /// cover the set exactly and shapes must match.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = 0;
        for (name, tensor) in entries {
            if let Some(&i) = self.index.get(name) {
                if tensor.shape() != self.params[i].value.shape() {
                    return Err(Error::shape(
                        "load_entries",
                        self.params[i].value.shape(),
                        tensor.shape(),
                    ));
                }
                self.params[i].value = tensor.clone();
                seen += 1;
            }
        }
        if seen != self.params.len() {
            return Err(Error::invalid(
                "load_entries",
                format!("entries cover {seen} of {} parameters", self.params.len()),
            ));
        }
        Ok(())
    }
}

/// A parameter set mounted into a graph: resolves names to leaf nodes.
pub struct Mounted<'a, T: Scalar> {
    entries: Vec<(&'a str, NodeId)>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Mounted<'a, T> {
    pub fn new(params: &'a ParamSet<T>, nodes: &'a [NodeId]) -> Self {
        debug_assert_eq!(params.len(), nodes.len());
        let entries = params.iter().map(|p| p.name.as_str()).zip(nodes.iter().copied()).collect();
        Mounted { entries, _scalar: std::marker::PhantomData }
    }

    /// Same lookup over caller-supplied names, for graphs whose parameter
    /// leaves come from somewhere other than `ParamSet::mount` (finite
    /// differencing perturbs them as plain inputs).
    pub fn new_by_names(names: &'a [String], nodes: &[NodeId]) -> Self {
        debug_assert_eq!(names.len(), nodes.len());
        let entries = names.iter().map(|n| n.as_str()).zip(nodes.iter().copied()).collect();
        Mounted { entries, _scalar: std::marker::PhantomData }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::invalid("mounted", format!("no parameter named {name}")))
    }
}

// ---- finite differences ----

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub checked: usize,
}

fn eval_forward<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    if !g.shape(root).is_scalar() {
        return Err(Error::NonScalarRoot { shape: g.shape(root).to_string() });
    }
    Ok(g.scalar_value(root))
}

/// Compare reverse-mode gradients of `build` against central differences.
/// `limit` > 0 checks a seeded sample of that many coordinates; 0 checks all.
pub fn grad_check<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    limit: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| match grads.get(id) {
            Some(gid) => g.value(gid).clone(),
            None => Tensor::zeros(g.shape(id)),
        })
        .collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            coords.push((k, j));
        }
    }
    if limit > 0 && limit < coords.len() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(limit);
        coords.sort_unstable();
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_coord: 0, checked: 0 };
    for (k, j) in coords {
        let base = inputs[k].data()[j];
        let mut perturbed = inputs.to_vec();
        let bump = |v: f64, inputs: &mut Vec<Tensor<f64>>| {
            let mut data = inputs[k].data().to_vec();
            data[j] = v;
            inputs[k] = Tensor::new(inputs[k].shape(), data).expect("same length");
        };
        bump(base + eps, &mut perturbed);
        let f_plus = eval_forward(build, &perturbed)?;
        bump(base - eps, &mut perturbed);
        let f_minus = eval_forward(build, &perturbed)?;
        let fd = (f_plus - f_minus) / (2.0 * eps);
        let ad = analytic[k].data()[j];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_input = k;
            report.worst_coord = j;
        }
        report.checked += 1;
    }
    Ok(report)
}
