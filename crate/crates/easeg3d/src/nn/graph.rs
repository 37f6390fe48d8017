//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each forward call records a node; `backward` walks the tape in reverse
//! insertion order (inputs always precede consumers) and accumulates
//! gradients into upstream nodes and the parameter store.

use super::ops::{self, Conv3dCfg, NormSaved, PoolCfg};
use super::params::{ParamId, ParamStore};
use ndarray::{ArrayD, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv3d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        cfg: Conv3dCfg,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        saved: Option<NormSaved>,
        eval_scale_shift: Option<(Vec<f32>, Vec<f32>)>,
    },
    InstanceNorm {
        x: NodeId,
        saved: NormSaved,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f32,
    },
    Sigmoid {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
        x_dims: Vec<usize>,
    },
    Resize3 {
        x: NodeId,
        in_spatial: [usize; 3],
    },
    ConcatChannels {
        xs: Vec<NodeId>,
        widths: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MulSpatialGate {
        feat: NodeId,
        gate: NodeId,
    },
    MulChannelGate {
        feat: NodeId,
        gate: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    DiceLoss {
        p: NodeId,
        grad: Vec<f32>,
    },
    MseToConst {
        x: NodeId,
        c: f32,
    },
    WeightedSum {
        terms: Vec<(f32, NodeId)>,
    },
}

struct Node {
    value: ArrayD<f32>,
    grad: Option<ArrayD<f32>>,
    needs_grad: bool,
    op: Op,
}

pub struct Graph<'s> {
    pub store: &'s mut ParamStore,
    train: bool,
    grad_enabled: bool,
    retain_values: bool,
    nodes: Vec<Node>,
}

/// Momentum of the running-statistics update: the previous estimate keeps
/// this fraction. Slow by design for stability at small batch sizes.
pub const BN_MOMENTUM: f64 = 0.9;

impl<'s> Graph<'s> {
    /// Training-mode graph: batch statistics, gradients recorded.
    pub fn train(store: &'s mut ParamStore) -> Self {
        Graph {
            store,
            train: true,
            grad_enabled: true,
            retain_values: false,
            nodes: Vec::new(),
        }
    }

    /// Evaluation-mode graph: running statistics, no gradients; node values
    /// may be freed early with [`Graph::free`].
    pub fn eval(store: &'s mut ParamStore) -> Self {
        Graph {
            store,
            train: false,
            grad_enabled: false,
            retain_values: false,
            nodes: Vec::new(),
        }
    }

    /// Evaluation-mode graph that keeps every intermediate value alive
    /// (for feature inspection); [`Graph::free`] becomes a no-op.
    pub fn eval_retaining(store: &'s mut ParamStore) -> Self {
        Graph {
            store,
            train: false,
            grad_enabled: false,
            retain_values: true,
            nodes: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f32> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> ArrayD<f32> {
        std::mem::replace(&mut self.nodes[id.0].value, ArrayD::zeros(IxDyn(&[0])))
    }

    /// Gradient of an input node after `backward` (zeros if it never
    /// received a contribution).
    pub fn grad(&self, id: NodeId) -> ArrayD<f32> {
        self.nodes[id.0]
            .grad
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(self.nodes[id.0].value.raw_dim()))
    }

    /// Drop a node's value buffer. Only meaningful on no-grad graphs where
    /// the caller knows the node has no further consumers; ignored when
    /// gradients are enabled.
    pub fn free(&mut self, id: NodeId) {
        if !self.grad_enabled && !self.retain_values {
            self.nodes[id.0].value = ArrayD::zeros(IxDyn(&[0]));
        }
    }

    fn push(&mut self, value: ArrayD<f32>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// An external tensor that wants gradients (when grads are enabled).
    pub fn input(&mut self, value: ArrayD<f32>) -> NodeId {
        self.push(value, true, Op::Input)
    }

    /// An external tensor that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<f32>) -> NodeId {
        self.push(value, false, Op::Input)
    }

    pub fn conv3d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, cfg: Conv3dCfg) -> NodeId {
        let value = ops::conv3d_forward(
            &self.nodes[x.0].value,
            self.store.value(w),
            b.map(|b| self.store.value(b)),
            &cfg,
        );
        let needs = self.needs(x) || self.store.trainable(w);
        self.push(value, needs, Op::Conv3d { x, w, b, cfg })
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> NodeId {
        if self.train {
            // split borrows: take running stats out, update, put back
            let mut rm = std::mem::replace(self.store.value_mut(running_mean), ArrayD::zeros(IxDyn(&[0])));
            let mut rv = std::mem::replace(self.store.value_mut(running_var), ArrayD::zeros(IxDyn(&[0])));
            let (value, saved) = ops::batchnorm_forward_train(
                &self.nodes[x.0].value,
                self.store.value(gamma),
                self.store.value(beta),
                &mut rm,
                &mut rv,
                BN_MOMENTUM,
            );
            *self.store.value_mut(running_mean) = rm;
            *self.store.value_mut(running_var) = rv;
            let needs = self.needs(x) || self.store.trainable(gamma);
            self.push(
                value,
                needs,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved: Some(saved),
                    eval_scale_shift: None,
                },
            )
        } else {
            let value = ops::batchnorm_forward_eval(
                &self.nodes[x.0].value,
                self.store.value(gamma),
                self.store.value(beta),
                self.store.value(running_mean),
                self.store.value(running_var),
            );
            // linear backward in eval mode: cache effective scale
            let g = self.store.value(gamma).as_slice().unwrap();
            let rv = self.store.value(running_var).as_slice().unwrap();
            let scale: Vec<f32> = g
                .iter()
                .zip(rv.iter())
                .map(|(&g, &v)| g * (1.0 / ((v as f64 + ops::NORM_EPS).sqrt())) as f32)
                .collect();
            let needs = self.needs(x) || self.store.trainable(gamma);
            self.push(
                value,
                needs,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved: None,
                    eval_scale_shift: Some((scale, Vec::new())),
                },
            )
        }
    }

    pub fn instancenorm(&mut self, x: NodeId) -> NodeId {
        let (value, saved) = ops::instancenorm_forward(&self.nodes[x.0].value);
        let needs = self.needs(x);
        self.push(value, needs, Op::InstanceNorm { x, saved })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(value, needs, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid { x })
    }

    pub fn maxpool(&mut self, x: NodeId, cfg: PoolCfg) -> NodeId {
        let (value, argmax) = ops::maxpool3d_forward(&self.nodes[x.0].value, &cfg);
        let x_dims = self.nodes[x.0].value.shape().to_vec();
        let needs = self.needs(x);
        self.push(value, needs, Op::MaxPool { x, argmax, x_dims })
    }

    pub fn resize3(&mut self, x: NodeId, out_spatial: [usize; 3]) -> NodeId {
        let shape = self.nodes[x.0].value.shape();
        let in_spatial = [shape[2], shape[3], shape[4]];
        if in_spatial == out_spatial {
            // identity resize: still record a pass-through so wiring stays uniform
            let value = self.nodes[x.0].value.clone();
            let needs = self.needs(x);
            return self.push(value, needs, Op::Resize3 { x, in_spatial });
        }
        let value = ops::resize3_forward(&self.nodes[x.0].value, out_spatial);
        let needs = self.needs(x);
        self.push(value, needs, Op::Resize3 { x, in_spatial })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        let rank = first.len();
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0usize;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            assert_eq!(s.len(), rank, "concat rank mismatch");
            assert_eq!(s[0], first[0], "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat spatial mismatch");
            widths.push(s[1]);
            total += s[1];
        }
        let mut dims = first.clone();
        dims[1] = total;
        let batch = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut value = ArrayD::zeros(IxDyn(&dims));
        {
            let dst = value.as_slice_mut().expect("standard layout");
            for b in 0..batch {
                let mut at = b * total * spatial;
                for &x in xs {
                    let s = self.nodes[x.0].value.shape();
                    let c = s[1];
                    let src = self.nodes[x.0].value.as_slice().expect("standard layout");
                    dst[at..at + c * spatial]
                        .copy_from_slice(&src[b * c * spatial..(b + 1) * c * spatial]);
                    at += c * spatial;
                }
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(
            value,
            needs,
            Op::ConcatChannels {
                xs: xs.to_vec(),
                widths,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "add shape mismatch"
        );
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Add { a, b })
    }

    /// Broadcast multiply of features (B,C,D,H,W) by a single-channel gate
    /// (B,1,D,H,W).
    pub fn mul_spatial_gate(&mut self, feat: NodeId, gate: NodeId) -> NodeId {
        let fs = self.nodes[feat.0].value.shape().to_vec();
        let gs = self.nodes[gate.0].value.shape();
        assert_eq!(gs[1], 1, "spatial gate must have one channel");
        assert_eq!(&fs[2..], &gs[2..], "gate spatial mismatch");
        let spatial: usize = fs[2..].iter().product();
        let (b, c) = (fs[0], fs[1]);
        let mut value = ArrayD::zeros(IxDyn(&fs));
        {
            let dst = value.as_slice_mut().unwrap();
            let f = self.nodes[feat.0].value.as_slice().unwrap();
            let g = self.nodes[gate.0].value.as_slice().unwrap();
            for bi in 0..b {
                let gseg = &g[bi * spatial..(bi + 1) * spatial];
                for ci in 0..c {
                    let at = (bi * c + ci) * spatial;
                    for i in 0..spatial {
                        dst[at + i] = f[at + i] * gseg[i];
                    }
                }
            }
        }
        let needs = self.needs(feat) || self.needs(gate);
        self.push(value, needs, Op::MulSpatialGate { feat, gate })
    }

    /// Broadcast multiply of features (B,C,D,H,W) by per-channel scores (B,C).
    pub fn mul_channel_gate(&mut self, feat: NodeId, gate: NodeId) -> NodeId {
        let fs = self.nodes[feat.0].value.shape().to_vec();
        let gs = self.nodes[gate.0].value.shape();
        assert_eq!(&gs[..], &[fs[0], fs[1]], "channel gate must be (B,C)");
        let spatial: usize = fs[2..].iter().product();
        let (b, c) = (fs[0], fs[1]);
        let mut value = ArrayD::zeros(IxDyn(&fs));
        {
            let dst = value.as_slice_mut().unwrap();
            let f = self.nodes[feat.0].value.as_slice().unwrap();
            let g = self.nodes[gate.0].value.as_slice().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let at = (bi * c + ci) * spatial;
                    let gv = g[bi * c + ci];
                    for i in 0..spatial {
                        dst[at + i] = f[at + i] * gv;
                    }
                }
            }
        }
        let needs = self.needs(feat) || self.needs(gate);
        self.push(value, needs, Op::MulChannelGate { feat, gate })
    }

    /// Global average pool over all spatial positions: (B,C,D,H,W) -> (B,C).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let src = self.nodes[x.0].value.as_slice().unwrap();
        let mut value = ArrayD::zeros(IxDyn(&[b, c]));
        {
            let dst = value.as_slice_mut().unwrap();
            for (bc, o) in dst.iter_mut().enumerate() {
                let mut sum = 0.0f64;
                for &v in &src[bc * spatial..(bc + 1) * spatial] {
                    sum += v as f64;
                }
                *o = (sum / spatial as f64) as f32;
            }
        }
        let needs = self.needs(x);
        self.push(value, needs, Op::GlobalAvgPool { x })
    }

    /// Global max pool over all spatial positions: (B,C,D,H,W) -> (B,C).
    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let src = self.nodes[x.0].value.as_slice().unwrap();
        let mut argmax = vec![0u32; b * c];
        let mut value = ArrayD::zeros(IxDyn(&[b, c]));
        {
            let dst = value.as_slice_mut().unwrap();
            for bc in 0..b * c {
                let seg = &src[bc * spatial..(bc + 1) * spatial];
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for (i, &v) in seg.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                dst[bc] = best;
                argmax[bc] = best_i as u32;
            }
        }
        let needs = self.needs(x);
        self.push(value, needs, Op::GlobalMaxPool { x, argmax })
    }

    /// Affine map on (B,Cin): y = x W^T + b with W (Cout, Cin).
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.store.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let wv = self.store.value(w).as_slice().unwrap();
        let bv = self.store.value(b).as_slice().unwrap();
        let mut value = ArrayD::zeros(IxDyn(&[batch, cout]));
        {
            let dst = value.as_slice_mut().unwrap();
            for bi in 0..batch {
                for co in 0..cout {
                    let mut acc = bv[co] as f64;
                    let wrow = &wv[co * cin..(co + 1) * cin];
                    let xrow = &xv[bi * cin..(bi + 1) * cin];
                    for (wi, xi) in wrow.iter().zip(xrow.iter()) {
                        acc += (*wi as f64) * (*xi as f64);
                    }
                    dst[bi * cout + co] = acc as f32;
                }
            }
        }
        let needs = self.needs(x) || self.store.trainable(w);
        self.push(value, needs, Op::Linear { x, w, b })
    }

    /// Soft Dice loss of a probability map against a constant target.
    pub fn dice_loss(&mut self, p: NodeId, target: &ArrayD<f32>, eps: f64) -> NodeId {
        assert_eq!(
            self.nodes[p.0].value.shape(),
            target.shape(),
            "dice target shape mismatch"
        );
        let pv: Vec<f64> = self.nodes[p.0].value.iter().map(|&v| v as f64).collect();
        let tv: Vec<f64> = target.iter().map(|&v| v as f64).collect();
        let (loss, grad) = ops::soft_dice_f64(&pv, &tv, eps);
        let grad: Vec<f32> = grad.into_iter().map(|g| g as f32).collect();
        let needs = self.needs(p);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss as f32),
            needs,
            Op::DiceLoss { p, grad },
        )
    }

    /// Mean squared deviation from a constant: mean((x - c)^2).
    pub fn mse_to_const(&mut self, x: NodeId, c: f32) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let mut sum = 0.0f64;
        for &v in self.nodes[x.0].value.iter() {
            sum += ((v - c) as f64) * ((v - c) as f64);
        }
        let needs = self.needs(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), (sum / n) as f32),
            needs,
            Op::MseToConst { x, c },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f32, NodeId)]) -> NodeId {
        let mut acc = 0.0f64;
        for &(w, id) in terms {
            debug_assert_eq!(self.nodes[id.0].value.len(), 1, "weighted_sum needs scalars");
            acc += w as f64 * self.nodes[id.0].value.iter().next().copied().unwrap() as f64;
        }
        let needs = terms.iter().any(|&(_, id)| self.needs(id));
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), acc as f32),
            needs,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.iter().next().copied().unwrap()
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1. Parameter gradients
    /// accumulate into the store; input-node gradients are retained on the
    /// nodes.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0f32));
        for id in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &tail[0];
            match &node.op {
                Op::Input => {
                    // keep the gradient available to the caller
                    tail[0].grad = Some(grad);
                }
                Op::Conv3d { x, w, b, cfg } => {
                    let xnode = &head[x.0];
                    if self.store.trainable(*w) {
                        let mut gw = std::mem::replace(
                            self.store.grad_mut(*w),
                            ArrayD::zeros(IxDyn(&[0])),
                        );
                        let mut gb = b.map(|b| {
                            std::mem::replace(self.store.grad_mut(b), ArrayD::zeros(IxDyn(&[0])))
                        });
                        ops::conv3d_backward_params(&grad, &xnode.value, cfg, &mut gw, gb.as_mut());
                        *self.store.grad_mut(*w) = gw;
                        if let (Some(b), Some(gb)) = (b, gb) {
                            *self.store.grad_mut(*b) = gb;
                        }
                    }
                    if xnode.needs_grad {
                        let gx = ops::conv3d_backward_input(
                            &grad,
                            self.store.value(*w),
                            xnode.value.shape(),
                            cfg,
                        );
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                    eval_scale_shift,
                } => {
                    let xnode = &head[x.0];
                    if let Some(saved) = saved {
                        let mut gg = std::mem::replace(
                            self.store.grad_mut(*gamma),
                            ArrayD::zeros(IxDyn(&[0])),
                        );
                        let mut gb = std::mem::replace(
                            self.store.grad_mut(*beta),
                            ArrayD::zeros(IxDyn(&[0])),
                        );
                        let gx = ops::batchnorm_backward(
                            &grad,
                            &xnode.value,
                            self.store.value(*gamma),
                            saved,
                            &mut gg,
                            &mut gb,
                        );
                        *self.store.grad_mut(*gamma) = gg;
                        *self.store.grad_mut(*beta) = gb;
                        if xnode.needs_grad {
                            accumulate(&mut head[x.0].grad, gx);
                        }
                    } else if xnode.needs_grad {
                        // eval mode: y = scale * x + shift, dx = scale * dy
                        let (scale, _) = eval_scale_shift.as_ref().expect("eval bn cache");
                        let xs = xnode.value.shape();
                        let (b, c) = (xs[0], xs[1]);
                        let spatial: usize = xs[2..].iter().product();
                        let mut gx = ArrayD::zeros(xnode.value.raw_dim());
                        {
                            let dst = gx.as_slice_mut().unwrap();
                            let g = grad.as_slice().unwrap();
                            for bi in 0..b {
                                for ci in 0..c {
                                    let at = (bi * c + ci) * spatial;
                                    for i in 0..spatial {
                                        dst[at + i] = g[at + i] * scale[ci];
                                    }
                                }
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::InstanceNorm { x, saved } => {
                    if head[x.0].needs_grad {
                        let gx = ops::instancenorm_backward(&grad, &head[x.0].value, saved);
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::Relu { x } => {
                    if head[x.0].needs_grad {
                        let mut gx = grad;
                        for (g, &y) in gx.iter_mut().zip(node.value.iter()) {
                            if y <= 0.0 {
                                *g = 0.0;
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if head[x.0].needs_grad {
                        let slope = *slope;
                        let mut gx = grad;
                        for (g, &y) in gx.iter_mut().zip(node.value.iter()) {
                            if y <= 0.0 {
                                *g *= slope;
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::Sigmoid { x } => {
                    if head[x.0].needs_grad {
                        let mut gx = grad;
                        for (g, &y) in gx.iter_mut().zip(node.value.iter()) {
                            *g *= y * (1.0 - y);
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::MaxPool { x, argmax, x_dims } => {
                    if head[x.0].needs_grad {
                        let gx = ops::maxpool3d_backward(&grad, argmax, x_dims);
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::Resize3 { x, in_spatial } => {
                    if head[x.0].needs_grad {
                        let out_spatial = [node.value.shape()[2], node.value.shape()[3], node.value.shape()[4]];
                        let gx = if *in_spatial == out_spatial {
                            grad
                        } else {
                            ops::resize3_backward(&grad, *in_spatial)
                        };
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::ConcatChannels { xs, widths } => {
                    let shape = node.value.shape();
                    let batch = shape[0];
                    let total = shape[1];
                    let spatial: usize = shape[2..].iter().product();
                    let g = grad.as_slice().unwrap();
                    let mut offset = 0usize;
                    for (&x, &c) in xs.iter().zip(widths.iter()) {
                        if head[x.0].needs_grad {
                            let mut dims = shape.to_vec();
                            dims[1] = c;
                            let mut gx = ArrayD::zeros(IxDyn(&dims));
                            {
                                let dst = gx.as_slice_mut().unwrap();
                                for b in 0..batch {
                                    let src_at = (b * total + offset) * spatial;
                                    dst[b * c * spatial..(b + 1) * c * spatial]
                                        .copy_from_slice(&g[src_at..src_at + c * spatial]);
                                }
                            }
                            accumulate(&mut head[x.0].grad, gx);
                        }
                        offset += c;
                    }
                }
                Op::Add { a, b } => {
                    if head[a.0].needs_grad {
                        accumulate(&mut head[a.0].grad, grad.clone());
                    }
                    if head[b.0].needs_grad {
                        accumulate(&mut head[b.0].grad, grad);
                    }
                }
                Op::MulSpatialGate { feat, gate } => {
                    let fs = head[feat.0].value.shape().to_vec();
                    let (b, c) = (fs[0], fs[1]);
                    let spatial: usize = fs[2..].iter().product();
                    let g = grad.as_slice().unwrap();
                    if head[feat.0].needs_grad {
                        let mut gf = ArrayD::zeros(IxDyn(&fs));
                        {
                            let dst = gf.as_slice_mut().unwrap();
                            let gatev = head[gate.0].value.as_slice().unwrap();
                            for bi in 0..b {
                                let gseg = &gatev[bi * spatial..(bi + 1) * spatial];
                                for ci in 0..c {
                                    let at = (bi * c + ci) * spatial;
                                    for i in 0..spatial {
                                        dst[at + i] = g[at + i] * gseg[i];
                                    }
                                }
                            }
                        }
                        accumulate(&mut head[feat.0].grad, gf);
                    }
                    if head[gate.0].needs_grad {
                        let mut gg = ArrayD::zeros(head[gate.0].value.raw_dim());
                        {
                            let dst = gg.as_slice_mut().unwrap();
                            let featv = head[feat.0].value.as_slice().unwrap();
                            for bi in 0..b {
                                for ci in 0..c {
                                    let at = (bi * c + ci) * spatial;
                                    let gseg = &mut dst[bi * spatial..(bi + 1) * spatial];
                                    for i in 0..spatial {
                                        gseg[i] += g[at + i] * featv[at + i];
                                    }
                                }
                            }
                        }
                        accumulate(&mut head[gate.0].grad, gg);
                    }
                }
                Op::MulChannelGate { feat, gate } => {
                    let fs = head[feat.0].value.shape().to_vec();
                    let (b, c) = (fs[0], fs[1]);
                    let spatial: usize = fs[2..].iter().product();
                    let g = grad.as_slice().unwrap();
                    if head[feat.0].needs_grad {
                        let mut gf = ArrayD::zeros(IxDyn(&fs));
                        {
                            let dst = gf.as_slice_mut().unwrap();
                            let gatev = head[gate.0].value.as_slice().unwrap();
                            for bi in 0..b {
                                for ci in 0..c {
                                    let at = (bi * c + ci) * spatial;
                                    let gv = gatev[bi * c + ci];
                                    for i in 0..spatial {
                                        dst[at + i] = g[at + i] * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut head[feat.0].grad, gf);
                    }
                    if head[gate.0].needs_grad {
                        let mut gg = ArrayD::zeros(head[gate.0].value.raw_dim());
                        {
                            let dst = gg.as_slice_mut().unwrap();
                            let featv = head[feat.0].value.as_slice().unwrap();
                            for bi in 0..b {
                                for ci in 0..c {
                                    let at = (bi * c + ci) * spatial;
                                    let mut sum = 0.0f64;
                                    for i in 0..spatial {
                                        sum += (g[at + i] * featv[at + i]) as f64;
                                    }
                                    dst[bi * c + ci] = sum as f32;
                                }
                            }
                        }
                        accumulate(&mut head[gate.0].grad, gg);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if head[x.0].needs_grad {
                        let xs = head[x.0].value.shape().to_vec();
                        let spatial: usize = xs[2..].iter().product();
                        let inv = 1.0 / spatial as f32;
                        let g = grad.as_slice().unwrap();
                        let mut gx = ArrayD::zeros(IxDyn(&xs));
                        {
                            let dst = gx.as_slice_mut().unwrap();
                            for (bc, &gv) in g.iter().enumerate() {
                                for v in &mut dst[bc * spatial..(bc + 1) * spatial] {
                                    *v = gv * inv;
                                }
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::GlobalMaxPool { x, argmax } => {
                    if head[x.0].needs_grad {
                        let xs = head[x.0].value.shape().to_vec();
                        let spatial: usize = xs[2..].iter().product();
                        let g = grad.as_slice().unwrap();
                        let mut gx = ArrayD::zeros(IxDyn(&xs));
                        {
                            let dst = gx.as_slice_mut().unwrap();
                            for (bc, &gv) in g.iter().enumerate() {
                                dst[bc * spatial + argmax[bc] as usize] += gv;
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = head[x.0].value.shape().to_vec();
                    let ws = self.store.value(*w).shape().to_vec();
                    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
                    let g = grad.as_slice().unwrap();
                    if self.store.trainable(*w) {
                        let xv = head[x.0].value.as_slice().unwrap();
                        {
                            let gw = self.store.grad_mut(*w).as_slice_mut().unwrap();
                            for bi in 0..batch {
                                for co in 0..cout {
                                    let gv = g[bi * cout + co];
                                    let row = &mut gw[co * cin..(co + 1) * cin];
                                    let xrow = &xv[bi * cin..(bi + 1) * cin];
                                    for (wi, &xi) in row.iter_mut().zip(xrow.iter()) {
                                        *wi += gv * xi;
                                    }
                                }
                            }
                        }
                        let gb = self.store.grad_mut(*b).as_slice_mut().unwrap();
                        for bi in 0..batch {
                            for co in 0..cout {
                                gb[co] += g[bi * cout + co];
                            }
                        }
                    }
                    if head[x.0].needs_grad {
                        let wv = self.store.value(*w).as_slice().unwrap();
                        let mut gx = ArrayD::zeros(IxDyn(&xs));
                        {
                            let dst = gx.as_slice_mut().unwrap();
                            for bi in 0..batch {
                                for co in 0..cout {
                                    let gv = g[bi * cout + co];
                                    let wrow = &wv[co * cin..(co + 1) * cin];
                                    let xrow = &mut dst[bi * cin..(bi + 1) * cin];
                                    for (o, &wi) in xrow.iter_mut().zip(wrow.iter()) {
                                        *o += gv * wi;
                                    }
                                }
                            }
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::DiceLoss { p, grad: dgrad } => {
                    if head[p.0].needs_grad {
                        let upstream = grad.iter().next().copied().unwrap();
                        let mut gx = ArrayD::zeros(head[p.0].value.raw_dim());
                        for (o, &g) in gx.iter_mut().zip(dgrad.iter()) {
                            *o = g * upstream;
                        }
                        accumulate(&mut head[p.0].grad, gx);
                    }
                }
                Op::MseToConst { x, c } => {
                    if head[x.0].needs_grad {
                        let upstream = grad.iter().next().copied().unwrap();
                        let n = head[x.0].value.len() as f32;
                        let c = *c;
                        let mut gx = head[x.0].value.clone();
                        for v in gx.iter_mut() {
                            *v = 2.0 * (*v - c) / n * upstream;
                        }
                        accumulate(&mut head[x.0].grad, gx);
                    }
                }
                Op::WeightedSum { terms } => {
                    let upstream = grad.iter().next().copied().unwrap();
                    for &(w, t) in terms {
                        if head[t.0].needs_grad {
                            let contrib = ArrayD::from_elem(IxDyn(&[1]), w * upstream);
                            accumulate(&mut head[t.0].grad, contrib);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f32>>, contribution: ArrayD<f32>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            *acc += &contribution;
        }
    }
}
