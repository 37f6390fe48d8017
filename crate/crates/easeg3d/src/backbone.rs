//! Encoder-decoder U-Net backbone: CBR blocks, max-pool downsampling,
//! trilinear upsampling, and skip fusion by concatenation. The decoder is
//! headless; segmentation probabilities come from the fusion head.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm3dLayer, Conv3dCfg, Conv3dLayer, Graph, ModuleCtx, NodeId, PoolCfg};

/// Two groups of 3x3x3 convolution + batch norm + ReLU; preserves spatial
/// dims (padding 1).
#[derive(Debug, Clone)]
pub struct CbrBlock {
    conv1: Conv3dLayer,
    bn1: BatchNorm3dLayer,
    conv2: Conv3dLayer,
    bn2: BatchNorm3dLayer,
}

impl CbrBlock {
    pub fn new(ctx: &mut ModuleCtx, in_ch: usize, out_ch: usize) -> Self {
        CbrBlock {
            conv1: Conv3dLayer::new(&mut ctx.child("conv1"), in_ch, out_ch, Conv3dCfg::same(3)),
            bn1: BatchNorm3dLayer::new(&mut ctx.child("bn1"), out_ch),
            conv2: Conv3dLayer::new(&mut ctx.child("conv2"), out_ch, out_ch, Conv3dCfg::same(3)),
            bn2: BatchNorm3dLayer::new(&mut ctx.child("bn2"), out_ch),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let c = self.conv1.apply(g, x);
        let n = self.bn1.apply(g, c);
        g.free(c);
        let r = g.relu(n);
        g.free(n);
        let c = self.conv2.apply(g, r);
        g.free(r);
        let n = self.bn2.apply(g, c);
        g.free(c);
        let out = g.relu(n);
        g.free(n);
        out
    }
}

/// Validate that the (D,H,W) of a rank-5 input divide by 8 (three pooling
/// stages), naming the failing axis.
pub fn check_divisible_by_8(dims: &[usize]) -> Result<()> {
    const AXES: [&str; 3] = ["depth", "height", "width"];
    for (axis, &len) in AXES.iter().zip(&dims[2..5]) {
        if len % 8 != 0 {
            return Err(Error::NotDivisible {
                axis,
                len,
                denom: 8,
            });
        }
    }
    Ok(())
}

/// Four CBR stages with 2x2x2 max pooling between them; stage strides
/// are 1, 2, 4, 8.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<CbrBlock>,
}

impl Encoder {
    pub fn new(ctx: &mut ModuleCtx, in_ch: usize, channels: [usize; 4]) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut prev = in_ch;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(CbrBlock::new(&mut ctx.child(&format!("stage{}", i + 1)), prev, c));
            prev = c;
        }
        Encoder { stages }
    }

    /// Returns (E1, E2, E3, E4).
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<[NodeId; 4]> {
        check_divisible_by_8(g.value(x).shape())?;
        let pool = PoolCfg {
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let e1 = self.stages[0].apply(g, x);
        let p1 = g.maxpool(e1, pool);
        let e2 = self.stages[1].apply(g, p1);
        g.free(p1);
        let p2 = g.maxpool(e2, pool);
        let e3 = self.stages[2].apply(g, p2);
        g.free(p2);
        let p3 = g.maxpool(e3, pool);
        let e4 = self.stages[3].apply(g, p3);
        g.free(p3);
        Ok([e1, e2, e3, e4])
    }
}

/// Three up-sample/concat/CBR stages restoring stride 1.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<CbrBlock>,
}

impl Decoder {
    /// `bottleneck_ch` feeds the deepest stage; `skip_ch[i]` is the channel
    /// width of the stage-(i+1) skip; `out_ch` are the widths of (F2,F1,F0).
    pub fn new(
        ctx: &mut ModuleCtx,
        bottleneck_ch: usize,
        skip_ch: [usize; 3],
        out_ch: [usize; 3],
    ) -> Self {
        let stages = vec![
            CbrBlock::new(&mut ctx.child("stage3"), bottleneck_ch + skip_ch[2], out_ch[0]),
            CbrBlock::new(&mut ctx.child("stage2"), out_ch[0] + skip_ch[1], out_ch[1]),
            CbrBlock::new(&mut ctx.child("stage1"), out_ch[1] + skip_ch[0], out_ch[2]),
        ];
        Decoder { stages }
    }

    /// Returns (F2, F1, F0) at strides 4, 2, 1. `skips` are ordered
    /// shallowest first (S1, S2, S3).
    pub fn apply(&self, g: &mut Graph, bottleneck: NodeId, skips: [NodeId; 3]) -> Result<[NodeId; 3]> {
        let mut current = bottleneck;
        let mut outputs = Vec::with_capacity(3);
        for (stage, &skip) in self.stages.iter().zip([skips[2], skips[1], skips[0]].iter()) {
            let skip_dims = g.value(skip).shape().to_vec();
            let cur_dims = g.value(current).shape();
            let expected = [cur_dims[2] * 2, cur_dims[3] * 2, cur_dims[4] * 2];
            if skip_dims[2..5] != expected {
                return Err(Error::shape(
                    "decoder skip",
                    &expected,
                    &skip_dims[2..5],
                ));
            }
            let up = g.resize3(current, expected);
            let cat = g.concat_channels(&[up, skip]);
            g.free(up);
            current = stage.apply(g, cat);
            g.free(cat);
            outputs.push(current);
        }
        Ok([outputs[0], outputs[1], outputs[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ModuleCtx, ParamStore};
    use ndarray::{ArrayD, IxDyn};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn build(channels: [usize; 4]) -> (ParamStore, Encoder, Decoder) {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut ctx = ModuleCtx::new(&mut store, &mut rng, "gen");
        let enc = Encoder::new(&mut ctx.child("encoder"), 1, channels);
        let dec = Decoder::new(
            &mut ctx.child("decoder"),
            channels[3],
            [channels[0], channels[1], channels[2]],
            [channels[2], channels[1], channels[0]],
        );
        (store, enc, dec)
    }

    #[test]
    fn cbr_shape_and_nonnegativity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut ctx = ModuleCtx::new(&mut store, &mut rng, "t");
        let cbr = CbrBlock::new(&mut ctx.child("cbr"), 1, 16);
        for trial in 0..3 {
            let mut rng2 = ChaCha12Rng::seed_from_u64(100 + trial);
            let x_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8, 8]), |_| {
                use rand::Rng;
                rng2.random_range(-2.0..2.0f32)
            });
            let mut g = Graph::train(&mut store);
            let x = g.input(x_val);
            let y = cbr.apply(&mut g, x);
            assert_eq!(g.value(y).shape(), &[1, 16, 8, 8, 8]);
            let min = g.value(y).iter().fold(f32::INFINITY, |m, &v| m.min(v));
            assert!(min >= 0.0, "ReLU output must be nonnegative, got {min}");
        }
    }

    #[test]
    fn encoder_stage_shapes() {
        let (mut store, enc, _) = build([16, 32, 64, 128]);
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, 32, 48, 48])));
        let [e1, e2, e3, e4] = enc.apply(&mut g, x).unwrap();
        assert_eq!(g.value(e1).shape(), &[1, 16, 32, 48, 48]);
        assert_eq!(g.value(e2).shape(), &[1, 32, 16, 24, 24]);
        assert_eq!(g.value(e3).shape(), &[1, 64, 8, 12, 12]);
        assert_eq!(g.value(e4).shape(), &[1, 128, 4, 6, 6]);
    }

    #[test]
    fn encoder_rejects_indivisible_depth() {
        let (mut store, enc, _) = build([16, 32, 64, 128]);
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, 30, 48, 48])));
        match enc.apply(&mut g, x) {
            Err(Error::NotDivisible { axis, len, denom }) => {
                assert_eq!(axis, "depth");
                assert_eq!(len, 30);
                assert_eq!(denom, 8);
            }
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn decoder_restores_stride_one() {
        let (mut store, enc, dec) = build([16, 32, 64, 128]);
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, 32, 48, 48])));
        let [e1, e2, e3, e4] = enc.apply(&mut g, x).unwrap();
        let [f2, f1, f0] = dec.apply(&mut g, e4, [e1, e2, e3]).unwrap();
        assert_eq!(g.value(f2).shape(), &[1, 64, 8, 12, 12]);
        assert_eq!(g.value(f1).shape(), &[1, 32, 16, 24, 24]);
        assert_eq!(g.value(f0).shape(), &[1, 16, 32, 48, 48]);
    }

    #[test]
    fn decoder_rejects_mismatched_skip() {
        let (mut store, _, dec) = build([16, 32, 64, 128]);
        let mut g = Graph::eval(&mut store);
        let e4 = g.input(ArrayD::zeros(IxDyn(&[1, 128, 4, 6, 6])));
        let s1 = g.input(ArrayD::zeros(IxDyn(&[1, 16, 32, 48, 48])));
        let s2 = g.input(ArrayD::zeros(IxDyn(&[1, 32, 16, 24, 24])));
        let bad_s3 = g.input(ArrayD::zeros(IxDyn(&[1, 64, 8, 10, 12])));
        match dec.apply(&mut g, e4, [s1, s2, bad_s3]) {
            Err(Error::ShapeMismatch { expected, actual, .. }) => {
                assert_eq!(expected, vec![8, 12, 12]);
                assert_eq!(actual, vec![8, 10, 12]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn parameter_count_monotone_in_width() {
        let count = |ch: [usize; 4]| {
            let (store, _, _) = build(ch);
            store.parameter_count("gen")
        };
        let narrow = count([8, 16, 32, 64]);
        let default = count([16, 32, 64, 128]);
        let wide = count([32, 64, 128, 256]);
        assert!(narrow < default && default < wide, "{narrow} {default} {wide}");
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let (mut store, enc, dec) = build([8, 16, 24, 32]);
        let x_val = {
            use rand::Rng;
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0f32))
        };
        let run = |store: &mut ParamStore| {
            let mut g = Graph::eval(store);
            let x = g.input(x_val.clone());
            let [e1, e2, e3, e4] = enc.apply(&mut g, x).unwrap();
            let [_, _, f0] = dec.apply(&mut g, e4, [e1, e2, e3]).unwrap();
            g.take_value(f0)
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
    }
}
