//! Global fusion head and the assembled segmentation network.
//!
//! The fusion head concatenates the three decoder stages at full resolution,
//! reduces channels with a 1x1x1 convolution, grows features through four
//! densely connected 7x7x7 blocks, mixes in the edge features, applies a
//! spatial attention gate, and maps to a single-channel probability volume.

use crate::backbone::{check_divisible_by_8, Decoder, Encoder};
use crate::dcm::{DcmConfig, DetailBranch};
use crate::eem::EdgeHead;
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm3dLayer, Conv3dCfg, Conv3dLayer, Graph, ModuleCtx, NodeId, ParamStore,
};
use crate::scam::ScamModule;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder stage widths, strictly increasing.
    pub channels: [usize; 4],
    pub dcm: bool,
    pub scam: bool,
    pub eem: bool,
    pub dcm_frozen: bool,
    pub pretrained_dcm: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128],
            dcm: true,
            scam: true,
            eem: true,
            dcm_frozen: false,
            pretrained_dcm: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.channels[0] < self.channels[1]
            && self.channels[1] < self.channels[2]
            && self.channels[2] < self.channels[3])
        {
            return Err(Error::Config(format!(
                "channel widths must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.channels[0] == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

struct ConvBnRelu {
    conv: Conv3dLayer,
    bn: BatchNorm3dLayer,
}

impl ConvBnRelu {
    fn new(ctx: &mut ModuleCtx, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvBnRelu {
            conv: Conv3dLayer::new(&mut ctx.child("conv"), in_ch, out_ch, Conv3dCfg::same(kernel)),
            bn: BatchNorm3dLayer::new(&mut ctx.child("bn"), out_ch),
        }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let c = self.conv.apply(g, x);
        let n = self.bn.apply(g, c);
        g.free(c);
        let r = g.relu(n);
        g.free(n);
        r
    }
}

pub struct GlobalFusion {
    reduce: Conv3dLayer,
    dense: Vec<ConvBnRelu>,
    gate: Conv3dLayer,
    head1: ConvBnRelu,
    head2: ConvBnRelu,
    head_out: Conv3dLayer,
    fusion_ch: usize,
    growth: usize,
    with_edge: bool,
}

impl GlobalFusion {
    /// `decoder_ch` are the widths of (F0, F1, F2); the fused width after
    /// reduction equals `decoder_ch[0]` (the shallowest stage width).
    pub fn new(ctx: &mut ModuleCtx, decoder_ch: [usize; 3], with_edge: bool) -> Self {
        let fusion_ch = decoder_ch[0];
        let growth = (fusion_ch / 4).max(1);
        let reduce = Conv3dLayer::new(
            &mut ctx.child("reduce"),
            decoder_ch.iter().sum(),
            fusion_ch,
            Conv3dCfg {
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        );
        let dense = (0..4)
            .map(|i| {
                ConvBnRelu::new(
                    &mut ctx.child(&format!("dense{i}")),
                    fusion_ch + i * growth,
                    growth,
                    7,
                )
            })
            .collect();
        let stack_ch = fusion_ch + 4 * growth + if with_edge { fusion_ch } else { 0 };
        let gate = Conv3dLayer::new(&mut ctx.child("gate"), stack_ch, 1, Conv3dCfg::same(3));
        let head1 = ConvBnRelu::new(&mut ctx.child("head1"), stack_ch, fusion_ch, 3);
        let head2 = ConvBnRelu::new(&mut ctx.child("head2"), fusion_ch, fusion_ch, 3);
        // zero-initialized output projection: segmentation starts at an
        // unbiased 0.5 probability field
        let head_out = Conv3dLayer::new_zeroed(
            &mut ctx.child("head_out"),
            fusion_ch,
            1,
            Conv3dCfg {
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        );
        GlobalFusion {
            reduce,
            dense,
            gate,
            head1,
            head2,
            head_out,
            fusion_ch,
            growth,
            with_edge,
        }
    }

    /// Fuse decoder stages (F0 at stride 1, F1 at 2, F2 at 4) and optional
    /// edge features into a (B,1,D,H,W) probability map.
    pub fn apply(
        &self,
        g: &mut Graph,
        f0: NodeId,
        f1: NodeId,
        f2: NodeId,
        edge_features: Option<NodeId>,
    ) -> Result<NodeId> {
        let d0 = g.value(f0).shape().to_vec();
        let d1 = g.value(f1).shape().to_vec();
        let d2 = g.value(f2).shape().to_vec();
        let target = [d0[2], d0[3], d0[4]];
        for (name, dims, stride) in [("F1", &d1, 2usize), ("F2", &d2, 4usize)] {
            let expected = [target[0] / stride, target[1] / stride, target[2] / stride];
            if dims[2..5] != expected {
                return Err(Error::shape(
                    format!("fusion input {name} stride"),
                    &expected,
                    &dims[2..5],
                ));
            }
        }
        if self.with_edge != edge_features.is_some() {
            return Err(Error::Config(
                "fusion head built with a different edge-features setting".into(),
            ));
        }
        let f1u = g.resize3(f1, target);
        let f2u = g.resize3(f2, target);
        let fused = g.concat_channels(&[f0, f1u, f2u]);
        g.free(f1u);
        g.free(f2u);
        let mut stack = self.reduce.apply(g, fused);
        g.free(fused);
        for block in &self.dense {
            let grown = block.apply(g, stack);
            let next = g.concat_channels(&[stack, grown]);
            g.free(stack);
            g.free(grown);
            stack = next;
        }
        if let Some(edge) = edge_features {
            let with_edge = g.concat_channels(&[stack, edge]);
            g.free(stack);
            stack = with_edge;
        }
        let gate = self.gate.apply(g, stack);
        let gate = g.sigmoid(gate);
        let selected = g.mul_spatial_gate(stack, gate);
        g.free(stack);
        g.free(gate);
        let h = self.head1.apply(g, selected);
        g.free(selected);
        let h = self.head2.apply(g, h);
        let logits = self.head_out.apply(g, h);
        g.free(h);
        Ok(g.sigmoid(logits))
    }

    pub fn fusion_channels(&self) -> usize {
        self.fusion_ch
    }

    pub fn growth(&self) -> usize {
        self.growth
    }
}

/// The full generator: encoder/decoder backbone, detail branch with
/// attention-refined skip fusion, edge head, and the global fusion head.
pub struct EdgeAwareSegNet {
    pub config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    detail: Option<DetailBranch>,
    attention: Option<Vec<ScamModule>>,
    edge: Option<EdgeHead>,
    fusion: GlobalFusion,
}

/// Dotted-name prefix of every generator parameter.
pub const GENERATOR_PREFIX: &str = "gen";

impl EdgeAwareSegNet {
    pub fn new(store: &mut ParamStore, seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ctx = ModuleCtx::new(store, &mut rng, GENERATOR_PREFIX);
        let ch = config.channels;
        let encoder = Encoder::new(&mut ctx.child("encoder"), 1, ch);
        // skip widths double when detail features are concatenated in
        let skip_mult = if config.dcm { 2 } else { 1 };
        let decoder = Decoder::new(
            &mut ctx.child("decoder"),
            ch[3] * skip_mult,
            [ch[0] * skip_mult, ch[1] * skip_mult, ch[2] * skip_mult],
            [ch[2], ch[1], ch[0]],
        );
        let detail = if config.dcm {
            Some(DetailBranch::new(
                &mut ctx.child("detail"),
                &DcmConfig {
                    squeeze_to: ch,
                    frozen: config.dcm_frozen,
                },
            ))
        } else {
            None
        };
        let attention = if config.dcm && config.scam {
            Some(
                ch.iter()
                    .enumerate()
                    .map(|(i, &c)| ScamModule::new(&mut ctx.child(&format!("scam{}", i + 1)), c))
                    .collect(),
            )
        } else {
            None
        };
        let edge = if config.eem {
            Some(EdgeHead::new(&mut ctx.child("edge"), ch[0]))
        } else {
            None
        };
        let fusion = GlobalFusion::new(
            &mut ctx.child("fusion"),
            [ch[0], ch[1], ch[2]],
            config.eem,
        );
        drop(ctx);
        if let Some(detail) = &detail {
            if let Some(path) = &config.pretrained_dcm {
                detail.load_pretrained(store, path)?;
            }
            if config.dcm_frozen {
                detail.set_frozen(store, true);
            }
        }
        Ok(EdgeAwareSegNet {
            config,
            encoder,
            decoder,
            detail,
            attention,
            edge,
            fusion,
        })
    }

    /// Full forward pass. Input is (B,1,D,H,W) with D,H,W divisible by 8.
    /// Returns the segmentation probability map and, when the edge head is
    /// enabled, the edge probability map.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let taps = self.forward_with_taps(g, x)?;
        Ok((taps.seg, taps.edge_prob))
    }

    fn forward_with_taps(&self, g: &mut Graph, x: NodeId) -> Result<ForwardTaps> {
        let dims = g.value(x).shape().to_vec();
        if dims.len() != 5 || dims[1] != 1 {
            return Err(Error::shape("generator input", &[1], &dims[1..2.min(dims.len())]));
        }
        check_divisible_by_8(&dims)?;
        let spatial = [dims[2], dims[3], dims[4]];
        let stage_dims = [
            spatial,
            [spatial[0] / 2, spatial[1] / 2, spatial[2] / 2],
            [spatial[0] / 4, spatial[1] / 4, spatial[2] / 4],
            [spatial[0] / 8, spatial[1] / 8, spatial[2] / 8],
        ];

        let [e1, e2, e3, e4] = self.encoder.apply(g, x)?;

        let (skips, bottleneck) = match &self.detail {
            Some(detail) => {
                let mut refined = detail.apply(g, x, &stage_dims)?;
                if let Some(scams) = &self.attention {
                    for (i, scam) in scams.iter().enumerate() {
                        let out = scam.apply(g, refined[i]);
                        g.free(refined[i]);
                        refined[i] = out;
                    }
                }
                let s1 = g.concat_channels(&[e1, refined[0]]);
                let s2 = g.concat_channels(&[e2, refined[1]]);
                let s3 = g.concat_channels(&[e3, refined[2]]);
                let bottleneck = g.concat_channels(&[e4, refined[3]]);
                for n in refined {
                    g.free(n);
                }
                g.free(e2);
                g.free(e3);
                g.free(e4);
                ([s1, s2, s3], bottleneck)
            }
            None => ([e1, e2, e3], e4),
        };

        let [f2, f1, f0] = self.decoder.apply(g, bottleneck, skips)?;

        let (edge_features, edge_prob) = match &self.edge {
            Some(edge) => {
                let (features, prob) = edge.apply(g, e1, spatial)?;
                (Some(features), Some(prob))
            }
            None => (None, None),
        };

        let seg = self.fusion.apply(g, f0, f1, f2, edge_features)?;
        Ok(ForwardTaps {
            encoder: [e1, e2, e3, e4],
            decoder: [f0, f1, f2],
            edge_features,
            edge_prob,
            seg,
        })
    }

    /// Forward pass on a value-retaining graph, exposing the named
    /// intermediate feature maps for inspection.
    pub fn forward_traced(&self, g: &mut Graph, x: NodeId) -> Result<ForwardTaps> {
        self.forward_with_taps(g, x)
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.parameter_count(GENERATOR_PREFIX)
    }
}

/// Intermediate feature handles of one forward pass. On graphs that free
/// values early, only `seg` and `edge_prob` are guaranteed alive; use
/// [`Graph::eval_retaining`] to inspect the rest.
pub struct ForwardTaps {
    /// E1..E4 at strides 1, 2, 4, 8.
    pub encoder: [NodeId; 4],
    /// F0, F1, F2 at strides 1, 2, 4.
    pub decoder: [NodeId; 3],
    pub edge_features: Option<NodeId>,
    pub edge_prob: Option<NodeId>,
    pub seg: NodeId,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn forward_shapes(config: ModelConfig, dims: [usize; 3]) -> (Vec<usize>, Option<Vec<usize>>) {
        let mut store = ParamStore::new();
        let net = EdgeAwareSegNet::new(&mut store, 7, config).unwrap();
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, dims[0], dims[1], dims[2]])));
        let (seg, edge) = net.forward(&mut g, x).unwrap();
        (
            g.value(seg).shape().to_vec(),
            edge.map(|e| g.value(e).shape().to_vec()),
        )
    }

    #[test]
    fn full_model_shape_contract() {
        let (seg, edge) = forward_shapes(ModelConfig::default(), [16, 24, 24]);
        assert_eq!(seg, vec![1, 1, 16, 24, 24]);
        assert_eq!(edge.unwrap(), vec![1, 1, 16, 24, 24]);
    }

    #[test]
    fn every_toggle_combination_runs() {
        for bits in 0..8u8 {
            let config = ModelConfig {
                dcm: bits & 1 != 0,
                scam: bits & 2 != 0,
                eem: bits & 4 != 0,
                ..Default::default()
            };
            let (seg, edge) = forward_shapes(config.clone(), [16, 16, 16]);
            assert_eq!(seg, vec![1, 1, 16, 16, 16], "toggles {config:?}");
            assert_eq!(edge.is_some(), config.eem);
        }
    }

    #[test]
    fn zeroed_head_outputs_half_everywhere() {
        let mut store = ParamStore::new();
        let net = EdgeAwareSegNet::new(
            &mut store,
            3,
            ModelConfig {
                dcm: false,
                scam: false,
                eem: false,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let x_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0f32));
        let mut g = Graph::eval(&mut store);
        let x = g.input(x_val);
        let (seg, _) = net.forward(&mut g, x).unwrap();
        assert!(g.value(seg).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_strictly_inside_unit_interval_after_noise() {
        // randomize the output head so logits vary, then check the range
        let mut store = ParamStore::new();
        let net = EdgeAwareSegNet::new(
            &mut store,
            4,
            ModelConfig {
                dcm: false,
                scam: false,
                eem: true,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let head_w = store.find("gen.fusion.head_out.weight").unwrap();
        for v in store.value_mut(head_w).iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0f32));
        let mut g = Graph::eval(&mut store);
        let x = g.input(x_val);
        let (seg, edge) = net.forward(&mut g, x).unwrap();
        for &v in g.value(seg).iter() {
            assert!(v > 0.0 && v < 1.0);
        }
        for &v in g.value(edge.unwrap()).iter() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn eval_forward_is_bit_exact_across_runs() {
        let mut store = ParamStore::new();
        let net = EdgeAwareSegNet::new(&mut store, 9, ModelConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(10);
        let x_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 24, 24]), |_| rng.random_range(-1.0..1.0f32));
        let run = |store: &mut ParamStore| {
            let mut g = Graph::eval(store);
            let x = g.input(x_val.clone());
            let (seg, _) = net.forward(&mut g, x).unwrap();
            g.take_value(seg)
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
    }

    use rand_chacha::rand_core::SeedableRng;
}
