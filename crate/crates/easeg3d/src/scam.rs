//! Spatial and channel attention: two sigmoid-gated branches applied to a
//! feature map and summed element-wise.
//!
//! Spatial branch: a 7x7x7 convolution to a single-channel score map,
//! sigmoid, broadcast multiply. Channel branch: global max + average pooled
//! descriptors concatenated to length 2C, one fully connected map to C
//! scores, sigmoid, per-channel multiply.

use crate::nn::{Conv3dCfg, Conv3dLayer, Graph, LinearLayer, ModuleCtx, NodeId};

#[derive(Debug, Clone)]
pub struct ScamModule {
    spatial_conv: Conv3dLayer,
    channel_fc: LinearLayer,
}

impl ScamModule {
    pub fn new(ctx: &mut ModuleCtx, channels: usize) -> Self {
        ScamModule {
            spatial_conv: Conv3dLayer::new(
                &mut ctx.child("spatial"),
                channels,
                1,
                Conv3dCfg::same(7),
            ),
            channel_fc: LinearLayer::new(&mut ctx.child("channel_fc"), 2 * channels, channels),
        }
    }

    /// sigmoid(conv7(N)) broadcast onto N.
    pub fn spatial_attention(&self, g: &mut Graph, n: NodeId) -> NodeId {
        let scores = self.spatial_conv.apply(g, n);
        let scores = g.sigmoid(scores);
        g.mul_spatial_gate(n, scores)
    }

    /// sigmoid(FC([GMP(N); GAP(N)])) broadcast onto N.
    pub fn channel_attention(&self, g: &mut Graph, n: NodeId) -> NodeId {
        let gmp = g.global_max_pool(n);
        let gap = g.global_avg_pool(n);
        let desc = g.concat_channels(&[gmp, gap]);
        let scores = self.channel_fc.apply(g, desc);
        let scores = g.sigmoid(scores);
        g.mul_channel_gate(n, scores)
    }

    /// Element-wise sum of the two branches; same shape as the input.
    pub fn apply(&self, g: &mut Graph, n: NodeId) -> NodeId {
        let spatial = self.spatial_attention(g, n);
        let channel = self.channel_attention(g, n);
        let out = g.add(spatial, channel);
        g.free(spatial);
        g.free(channel);
        out
    }
}
