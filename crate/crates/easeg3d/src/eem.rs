//! Edge head: a training-time supervision branch on the shallowest encoder
//! features. A 3x3x3 convolution produces edge features that always feed
//! the fusion head; a 1x1x1 projection plus sigmoid produces the edge
//! probability map that is only needed when the edge loss is computed.

use crate::error::{Error, Result};
use crate::nn::{Conv3dCfg, Conv3dLayer, Graph, ModuleCtx, NodeId};

#[derive(Debug, Clone)]
pub struct EdgeHead {
    feature_conv: Conv3dLayer,
    projection: Conv3dLayer,
}

impl EdgeHead {
    pub fn new(ctx: &mut ModuleCtx, channels: usize) -> Self {
        EdgeHead {
            feature_conv: Conv3dLayer::new(
                &mut ctx.child("feature"),
                channels,
                channels,
                Conv3dCfg::same(3),
            ),
            // zero-initialized projection: the edge map starts at an
            // unbiased 0.5 everywhere
            projection: Conv3dLayer::new_zeroed(
                &mut ctx.child("projection"),
                channels,
                1,
                Conv3dCfg {
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
            ),
        }
    }

    /// Edge features at the input resolution.
    pub fn features(&self, g: &mut Graph, e1: NodeId) -> NodeId {
        self.feature_conv.apply(g, e1)
    }

    /// Edge probability map from edge features: single channel in (0, 1).
    pub fn probability(&self, g: &mut Graph, edge_features: NodeId) -> NodeId {
        let logits = self.projection.apply(g, edge_features);
        g.sigmoid(logits)
    }

    /// Both outputs; `e1` must be a stride-1 feature map of the configured
    /// width.
    pub fn apply(&self, g: &mut Graph, e1: NodeId, expected_spatial: [usize; 3]) -> Result<(NodeId, NodeId)> {
        let dims = g.value(e1).shape().to_vec();
        if dims[2..5] != expected_spatial {
            return Err(Error::shape("edge head input must be at stride 1", &expected_spatial, &dims[2..5]));
        }
        let features = self.features(g, e1);
        let prob = self.probability(g, features);
        Ok((features, prob))
    }
}
