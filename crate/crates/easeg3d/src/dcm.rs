//! Detail compensation branch: a 3D ResNet-34 feature extractor whose four
//! stage outputs are trilinearly aligned to the encoder stages and squeezed
//! to the backbone channel widths by 1x1x1 convolutions.
//!
//! The trunk uses the standard medical-volume layout (7^3 stride-2 stem,
//! 3^3 stride-2 max pool, stages at strides 4/8/16/32) so externally
//! pretrained weights drop in unchanged; per-stage trilinear resampling
//! provides the exact dimension agreement the skip fusion needs.

use crate::error::{Error, Result};
use crate::nn::{
    archive, BatchNorm3dLayer, Conv3dCfg, Conv3dLayer, Graph, ModuleCtx, NodeId, ParamStore,
    PoolCfg,
};
use std::path::Path;

/// Stage output widths of the residual trunk, fixed by the ResNet-34 layout.
pub const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Residual blocks per stage for ResNet-34.
const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];

#[derive(Debug, Clone)]
pub struct DcmConfig {
    /// Squeeze target widths; must equal the backbone channel widths.
    pub squeeze_to: [usize; 4],
    /// Freeze the transferred trunk (squeeze convolutions stay trainable).
    pub frozen: bool,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv3dLayer,
    bn1: BatchNorm3dLayer,
    conv2: Conv3dLayer,
    bn2: BatchNorm3dLayer,
    down: Option<(Conv3dLayer, BatchNorm3dLayer)>,
}

impl BasicBlock {
    fn new(ctx: &mut ModuleCtx, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let down = if stride != 1 || in_ch != out_ch {
            let mut d = ctx.child("down");
            Some((
                Conv3dLayer::new(
                    &mut d.child("conv"),
                    in_ch,
                    out_ch,
                    Conv3dCfg {
                        kernel: 1,
                        stride,
                        pad: 0,
                    },
                ),
                BatchNorm3dLayer::new(&mut d.child("bn"), out_ch),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv3dLayer::new(
                &mut ctx.child("conv1"),
                in_ch,
                out_ch,
                Conv3dCfg {
                    kernel: 3,
                    stride,
                    pad: 1,
                },
            ),
            bn1: BatchNorm3dLayer::new(&mut ctx.child("bn1"), out_ch),
            conv2: Conv3dLayer::new(&mut ctx.child("conv2"), out_ch, out_ch, Conv3dCfg::same(3)),
            bn2: BatchNorm3dLayer::new(&mut ctx.child("bn2"), out_ch),
            down,
        }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let identity = match &self.down {
            Some((conv, bn)) => {
                let d = conv.apply(g, x);
                let d2 = bn.apply(g, d);
                g.free(d);
                d2
            }
            None => x,
        };
        let c = self.conv1.apply(g, x);
        let n = self.bn1.apply(g, c);
        g.free(c);
        let r = g.relu(n);
        g.free(n);
        let c = self.conv2.apply(g, r);
        g.free(r);
        let n = self.bn2.apply(g, c);
        g.free(c);
        let sum = g.add(n, identity);
        g.free(n);
        if identity != x {
            g.free(identity);
        }
        let out = g.relu(sum);
        g.free(sum);
        out
    }
}

pub struct DetailBranch {
    stem_conv: Conv3dLayer,
    stem_bn: BatchNorm3dLayer,
    stages: Vec<Vec<BasicBlock>>,
    squeezes: Vec<Conv3dLayer>,
    trunk_prefix: String,
}

impl DetailBranch {
    pub fn new(ctx: &mut ModuleCtx, cfg: &DcmConfig) -> Self {
        let trunk_prefix = format!("{}.trunk", ctx.prefix);
        let mut trunk = ctx.child("trunk");
        let stem_conv = Conv3dLayer::new(
            &mut trunk.child("stem.conv"),
            1,
            64,
            Conv3dCfg {
                kernel: 7,
                stride: 2,
                pad: 3,
            },
        );
        let stem_bn = BatchNorm3dLayer::new(&mut trunk.child("stem.bn"), 64);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 64;
        for (si, (&out_ch, &blocks)) in STAGE_CHANNELS.iter().zip(STAGE_BLOCKS.iter()).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(
                    &mut trunk.child(&format!("stage{}.block{}", si + 1, bi)),
                    in_ch,
                    out_ch,
                    stride,
                ));
                in_ch = out_ch;
            }
            stages.push(stage);
        }
        drop(trunk);
        let squeezes = STAGE_CHANNELS
            .iter()
            .zip(cfg.squeeze_to.iter())
            .enumerate()
            .map(|(i, (&from, &to))| {
                Conv3dLayer::new(
                    &mut ctx.child(&format!("squeeze{}", i + 1)),
                    from,
                    to,
                    Conv3dCfg {
                        kernel: 1,
                        stride: 1,
                        pad: 0,
                    },
                )
            })
            .collect();
        DetailBranch {
            stem_conv,
            stem_bn,
            stages,
            squeezes,
            trunk_prefix,
        }
    }

    /// Raw stage features N1..N4, trilinearly resampled to `stage_dims`
    /// (the encoder stage resolutions), channels (64, 128, 256, 512).
    pub fn stage_features(
        &self,
        g: &mut Graph,
        x: NodeId,
        stage_dims: &[[usize; 3]; 4],
    ) -> Result<[NodeId; 4]> {
        let dims = g.value(x).shape();
        if dims.len() != 5 || dims[1] != 1 {
            return Err(Error::shape("detail branch input", &[1], &dims[1..2]));
        }
        let c = self.stem_conv.apply(g, x);
        let n = self.stem_bn.apply(g, c);
        g.free(c);
        let r = g.relu(n);
        g.free(n);
        let mut cur = g.maxpool(
            r,
            PoolCfg {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
        );
        g.free(r);
        let mut outs = Vec::with_capacity(4);
        for (stage, target) in self.stages.iter().zip(stage_dims.iter()) {
            for block in stage {
                let next = block.apply(g, cur);
                g.free(cur);
                cur = next;
            }
            outs.push(g.resize3(cur, *target));
        }
        g.free(cur);
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }

    /// Squeeze stage `i` (0-based) to the backbone width; spatial dims
    /// unchanged.
    pub fn squeeze(&self, g: &mut Graph, n_i: NodeId, i: usize) -> NodeId {
        self.squeezes[i].apply(g, n_i)
    }

    /// Aligned and squeezed stage outputs in one call.
    pub fn apply(
        &self,
        g: &mut Graph,
        x: NodeId,
        stage_dims: &[[usize; 3]; 4],
    ) -> Result<[NodeId; 4]> {
        let raw = self.stage_features(g, x, stage_dims)?;
        let mut out = Vec::with_capacity(4);
        for (i, &n) in raw.iter().enumerate() {
            out.push(self.squeeze(g, n, i));
            g.free(n);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Freeze/unfreeze the transferred trunk. Squeeze convolutions are new
    /// layers and always stay trainable.
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for id in store.ids_with_prefix(&self.trunk_prefix) {
            if store.entry(id).kind == crate::nn::ParamKind::Weight {
                store.set_trainable(id, !frozen);
            }
        }
    }

    /// Load externally pretrained trunk weights from a tensor archive.
    ///
    /// Archive names are relative to the trunk root (`stem.conv.weight`,
    /// `stage1.block0.conv1.weight`, ...). Every archive tensor must match a
    /// known layer; shapes must agree exactly, except that a 3-channel stem
    /// (`[64,3,7,7,7]`) is adapted to the 1-channel stem by channel
    /// averaging. Validation completes before any assignment.
    pub fn load_pretrained(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let tensors = archive::read_tensors(path)?;
        let mut staged = Vec::with_capacity(tensors.len());
        for (name, tensor) in tensors {
            let full = format!("{}.{}", self.trunk_prefix, name);
            let id = store.find(&full).ok_or_else(|| Error::WeightArchive {
                path: path.into(),
                reason: format!("unknown layer {name:?}"),
            })?;
            let expected = store.value(id).shape().to_vec();
            let got = tensor.shape().to_vec();
            let tensor = if expected != got {
                let stem_3ch = name == "stem.conv.weight"
                    && got.len() == 5
                    && got[1] == 3
                    && expected[1] == 1
                    && got[0] == expected[0]
                    && got[2..] == expected[2..];
                if stem_3ch {
                    // channel-average a 3-channel stem down to 1 channel
                    let mut avg = ndarray::ArrayD::zeros(ndarray::IxDyn(&expected));
                    let (co, k) = (got[0], got[2]);
                    for c in 0..co {
                        for z in 0..k {
                            for y in 0..k {
                                for x in 0..k {
                                    let mut s = 0.0f32;
                                    for ci in 0..3 {
                                        s += tensor[[c, ci, z, y, x]];
                                    }
                                    avg[[c, 0, z, y, x]] = s / 3.0;
                                }
                            }
                        }
                    }
                    avg
                } else {
                    return Err(Error::WeightArchive {
                        path: path.into(),
                        reason: format!(
                            "shape mismatch for layer {name:?}: expected {expected:?}, got {got:?}"
                        ),
                    });
                }
            } else {
                tensor
            };
            staged.push((id, tensor));
        }
        for (id, tensor) in staged {
            *store.value_mut(id) = tensor;
        }
        Ok(())
    }
}
