//! Tensor primitives with hand-written backward passes.
//!
//! Activations are `(C, H, W)` arrays of `f64`; one [`Graph`] records the
//! forward pass of a single sample and replays it in reverse for gradients.
//! Parameters live in a [`ParamStore`] shared across samples; per-sample
//! gradients are accumulated into [`GradBuffer`]s and summed in sample order
//! so results do not depend on worker count.

mod adam;
mod ops;

pub use adam::Adam;
pub use ops::*;

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand::Rng;

/// Activation tensor layout: channels x rows x cols.
pub type Tensor = Array3<f64>;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Which subnetwork a parameter belongs to.
///
/// Decoder and connection parameters are tagged with the branch index that
/// owns them; connection parameters are the 1x1 projections on imported
/// features and are deliberately kept out of the decoder groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder(usize),
    Connection(usize),
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
}

/// Flat registry of all trainable tensors of a network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<ArrayD<f64>>,
    metas: Vec<ParamMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            metas: Vec::new(),
        }
    }

    /// Registers a conv weight `(c_out, c_in, kh, kw)` with fan-in scaled
    /// uniform initialization.
    pub fn add_conv_weight<R: Rng>(
        &mut self,
        name: &str,
        group: ParamGroup,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        rng: &mut R,
    ) -> ParamId {
        let fan_in = (c_in * kh * kw) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((c_out, c_in, kh, kw), |_| rng.gen_range(-limit..limit));
        self.push(name, group, w.into_dyn())
    }

    /// Registers a zero-initialized bias of length `c_out`.
    pub fn add_bias(&mut self, name: &str, group: ParamGroup, c_out: usize) -> ParamId {
        self.push(name, group, Array1::<f64>::zeros(c_out).into_dyn())
    }

    fn push(&mut self, name: &str, group: ParamGroup, value: ArrayD<f64>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(value);
        self.metas.push(ParamMeta {
            name: name.to_string(),
            group,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.metas[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamMeta, &ArrayD<f64>)> {
        self.params
            .iter()
            .zip(self.metas.iter())
            .enumerate()
            .map(|(i, (p, m))| (ParamId(i), m, p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Ids belonging to a group.
    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.metas
            .iter()
            .enumerate()
            .filter(|(_, m)| m.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zeros_like(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator with the same layout as a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub grads: Vec<ArrayD<f64>>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    /// Adds another buffer elementwise.
    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            *a += b;
        }
    }

    /// Scales all gradients (batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut() {
            *g *= factor;
        }
    }

    /// L2 norm over the given parameter ids.
    pub fn group_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|id| self.grads[id.0].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        pad: usize,
    },
    UpConv2x2 {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    SoftmaxCh {
        x: NodeId,
    },
    MaxPool2x2 {
        x: NodeId,
        idx: Array3<u8>,
    },
    NearestUp2 {
        x: NodeId,
    },
    ConcatCh {
        xs: Vec<NodeId>,
    },
    Detach {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape for one sample: records each op during the forward pass, then replays
/// it in reverse for gradients. Node ids are topologically ordered by
/// construction, so a single reverse sweep is sufficient.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn add(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.add(value, Op::Input)
    }

    /// Same-padded convolution with odd square kernels (3x3 or 1x1 here).
    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let weight = conv_weight(self.store, w);
        let pad = weight.shape()[2] / 2;
        let bias = bias_view(self.store, b);
        let out = ops::conv2d_forward(&self.nodes[x.0].value, &weight, &bias, pad);
        self.add(out, Op::Conv2d { x, w, b, pad })
    }

    /// Transposed 2x2 stride-2 convolution (doubles spatial size).
    pub fn upconv2x2(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let weight = conv_weight(self.store, w);
        let bias = bias_view(self.store, b);
        let out = ops::upconv2x2_forward(&self.nodes[x.0].value, &weight, &bias);
        self.add(out, Op::UpConv2x2 { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.add(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(ops::sigmoid_scalar);
        self.add(out, Op::Sigmoid { x })
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let out = ops::softmax_channels_forward(&self.nodes[x.0].value);
        self.add(out, Op::SoftmaxCh { x })
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> NodeId {
        let (out, idx) = ops::maxpool2x2_forward(&self.nodes[x.0].value);
        self.add(out, Op::MaxPool2x2 { x, idx })
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> NodeId {
        let out = ops::nearest_up2_forward(&self.nodes[x.0].value);
        self.add(out, Op::NearestUp2 { x })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<&Tensor> = xs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = ops::concat_channels(&views);
        self.add(out, Op::ConcatCh { xs: xs.to_vec() })
    }

    /// Treats `x` as a constant during backpropagation.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.clone();
        self.add(out, Op::Detach { x })
    }

    /// Backpropagates from `(node, d_loss/d_node)` seeds, accumulating
    /// parameter gradients into `grads`.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, grads: &mut GradBuffer) {
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            accumulate(&mut node_grads[id.0], seed);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = node_grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Conv2d { x, w, b, pad } => {
                    let weight = conv_weight(self.store, *w);
                    let (gx, gw, gb) =
                        ops::conv2d_backward(&self.nodes[x.0].value, &weight, &gout, *pad);
                    grads.grads[w.0] += &gw.into_dyn();
                    grads.grads[b.0] += &gb.into_dyn();
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::UpConv2x2 { x, w, b } => {
                    let weight = conv_weight(self.store, *w);
                    let (gx, gw, gb) =
                        ops::upconv2x2_backward(&self.nodes[x.0].value, &weight, &gout);
                    grads.grads[w.0] += &gw.into_dyn();
                    grads.grads[b.0] += &gb.into_dyn();
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Relu { x } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.nodes[id].value, |g, &y| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.nodes[id].value, |g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::SoftmaxCh { x } => {
                    let gx = ops::softmax_channels_backward(&self.nodes[id].value, &gout);
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::MaxPool2x2 { x, idx } => {
                    let gx = ops::maxpool2x2_backward(self.nodes[x.0].value.dim(), idx, &gout);
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::NearestUp2 { x } => {
                    let gx = ops::nearest_up2_backward(&gout);
                    accumulate(&mut node_grads[x.0], gx);
                }
                Op::ConcatCh { xs } => {
                    let mut offset = 0;
                    for xid in xs {
                        let c = self.nodes[xid.0].value.dim().0;
                        let part = gout
                            .slice(ndarray::s![offset..offset + c, .., ..])
                            .to_owned();
                        accumulate(&mut node_grads[xid.0], part);
                        offset += c;
                    }
                }
                Op::Detach { .. } => {}
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

fn conv_weight(store: &ParamStore, id: ParamId) -> ndarray::ArrayView4<'_, f64> {
    store
        .get(id)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv weight must be 4-d")
}

fn bias_view(store: &ParamStore, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
    store
        .get(id)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("bias must be 1-d")
}
