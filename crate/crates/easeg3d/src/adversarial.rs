//! Conditional patch discriminator and the training losses: least-squares
//! adversarial terms, soft Dice, and the combined generator objective.
//!
//! The discriminator scores (image, mask) pairs patch-wise: four stride-2
//! 4x4x4 convolution blocks (leaky ReLU 0.2, instance normalization on
//! blocks 2-4) and a 1x1x1 projection to raw scores. No terminal sigmoid;
//! the least-squares objective works on raw scores.

use crate::error::{Error, Result};
use crate::nn::{ops, Conv3dCfg, Conv3dLayer, Graph, ModuleCtx, NodeId, ParamStore};
use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Real/fake/target labels of the least-squares objectives.
pub const REAL_LABEL: f32 = 1.0;
pub const FAKE_LABEL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the segmentation Dice term.
    pub alpha: f32,
    /// Weight of the edge Dice term.
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
        }
    }
}

/// Channel widths of the four strided blocks.
const BLOCK_CHANNELS: [usize; 4] = [64, 128, 256, 512];

pub struct PatchDiscriminator {
    blocks: Vec<Conv3dLayer>,
    projection: Conv3dLayer,
}

/// Dotted-name prefix of every discriminator parameter.
pub const DISCRIMINATOR_PREFIX: &str = "disc";

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ctx = ModuleCtx::new(store, &mut rng, DISCRIMINATOR_PREFIX);
        let cfg = Conv3dCfg {
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = 2; // image and mask, channel-concatenated
        for (i, &out_ch) in BLOCK_CHANNELS.iter().enumerate() {
            blocks.push(Conv3dLayer::new(
                &mut ctx.child(&format!("block{}", i + 1)),
                in_ch,
                out_ch,
                cfg,
            ));
            in_ch = out_ch;
        }
        let projection = Conv3dLayer::new(
            &mut ctx.child("projection"),
            in_ch,
            1,
            Conv3dCfg {
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        );
        PatchDiscriminator { blocks, projection }
    }

    /// Patch realism scores for an (image, mask-probability) pair. Inputs
    /// must be spatially aligned (B,1,D,H,W).
    pub fn score(&self, g: &mut Graph, image: NodeId, mask: NodeId) -> Result<NodeId> {
        let xi = g.value(image).shape().to_vec();
        let xm = g.value(mask).shape().to_vec();
        if xi != xm {
            return Err(Error::shape("discriminator inputs", &xi, &xm));
        }
        let mut cur = g.concat_channels(&[image, mask]);
        for (i, block) in self.blocks.iter().enumerate() {
            let c = block.apply(g, cur);
            g.free(cur);
            cur = if i == 0 {
                c
            } else {
                let n = g.instancenorm(c);
                g.free(c);
                n
            };
            let l = g.leaky_relu(cur, 0.2);
            g.free(cur);
            cur = l;
        }
        let scores = self.projection.apply(g, cur);
        g.free(cur);
        Ok(scores)
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.parameter_count(DISCRIMINATOR_PREFIX)
    }
}

/// Soft Dice loss node: `1 - (2*sum(pt)+eps)/(sum(p)+sum(t)+eps)`.
pub fn dice_loss(g: &mut Graph, p: NodeId, target: &ArrayD<f32>) -> NodeId {
    g.dice_loss(p, target, DICE_EPS)
}

/// Soft Dice loss of plain arrays (no graph); shape-checked.
pub fn dice_loss_value(p: &ArrayD<f32>, t: &ArrayD<f32>) -> Result<f64> {
    if p.shape() != t.shape() {
        return Err(Error::shape("dice operands", t.shape(), p.shape()));
    }
    let pv: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let tv: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    Ok(ops::soft_dice_f64(&pv, &tv, DICE_EPS).0)
}

/// Discriminator objective: mean (D(x,y) - 1)^2 + mean (D(x,G(x)) - 0)^2,
/// with the generator output treated as constant.
pub fn discriminator_loss(g: &mut Graph, real_scores: NodeId, fake_scores: NodeId) -> NodeId {
    let real_term = g.mse_to_const(real_scores, REAL_LABEL);
    let fake_term = g.mse_to_const(fake_scores, FAKE_LABEL);
    g.weighted_sum(&[(1.0, real_term), (1.0, fake_term)])
}

/// Generator objective: mean (D(x,G(x)) - 1)^2 + alpha * dice(G(x), y)
/// + beta * dice(edge_prob, y_e). The edge term is skipped when the edge
/// head is disabled.
pub fn generator_loss(
    g: &mut Graph,
    fake_scores: NodeId,
    seg_prob: NodeId,
    seg_target: &ArrayD<f32>,
    edge: Option<(NodeId, &ArrayD<f32>)>,
    weights: LossWeights,
) -> NodeId {
    let adv = g.mse_to_const(fake_scores, REAL_LABEL);
    let seg = dice_loss(g, seg_prob, seg_target);
    let mut terms = vec![(1.0, adv), (weights.alpha, seg)];
    if let Some((edge_prob, edge_target)) = edge {
        if weights.beta != 0.0 {
            let edge_term = dice_loss(g, edge_prob, edge_target);
            terms.push((weights.beta, edge_term));
        }
    }
    g.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn patch_score_shape_contract() {
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, 1);
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, 32, 48, 48])));
        let m = g.input(ArrayD::zeros(IxDyn(&[1, 1, 32, 48, 48])));
        let s = d.score(&mut g, x, m).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 1, 2, 3, 3]);
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, 2);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0f32));
        let mut g = Graph::eval(&mut store);
        let x = g.input(x_val);
        let m = g.input(ArrayD::from_elem(IxDyn(&[1, 1, 16, 16, 16]), 0.5f32));
        let s = d.score(&mut g, x, m).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, 4);
        let mut g = Graph::eval(&mut store);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 1, 16, 16, 16])));
        let m = g.input(ArrayD::zeros(IxDyn(&[1, 1, 16, 16, 8])));
        assert!(d.score(&mut g, x, m).is_err());
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let mut store = ParamStore::new();
        let mut g = Graph::eval(&mut store);
        let real = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2, 2]), 1.0f32));
        let fake = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2, 2])));
        let loss = discriminator_loss(&mut g, real, fake);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn indifferent_discriminator_loss_is_half() {
        let mut store = ParamStore::new();
        let mut g = Graph::eval(&mut store);
        let half = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2, 2]), 0.5f32);
        let real = g.constant(half.clone());
        let fake = g.constant(half);
        let loss = discriminator_loss(&mut g, real, fake);
        assert!((g.scalar(loss) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn hand_built_two_patch_scores() {
        // real scores (0.2, 0.8), fake scores (0.1, 0.3):
        // ((0.2-1)^2 + (0.8-1)^2)/2 + (0.1^2 + 0.3^2)/2 = 0.34 + 0.05 = 0.39
        let mut store = ParamStore::new();
        let mut g = Graph::eval(&mut store);
        let real = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1, 2]), vec![0.2, 0.8]).unwrap());
        let fake = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1, 2]), vec![0.1, 0.3]).unwrap());
        let loss = discriminator_loss(&mut g, real, fake);
        assert!((g.scalar(loss) - 0.39).abs() < 1e-6);
    }

    #[test]
    fn perfect_generator_has_zero_loss() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4, 4]), |_| f32::from(rng.random::<bool>()));
        let edge_target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4, 4]), |_| f32::from(rng.random::<bool>()));
        let mut g = Graph::eval(&mut store);
        let scores = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2, 2]), 1.0f32));
        let seg = g.constant(target.clone());
        let edge = g.constant(edge_target.clone());
        let loss = generator_loss(
            &mut g,
            scores,
            seg,
            &target,
            Some((edge, &edge_target)),
            LossWeights::default(),
        );
        assert!(g.scalar(loss).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_reduce_to_adversarial_term() {
        let mut store = ParamStore::new();
        let target = ArrayD::zeros(IxDyn(&[1, 1, 2, 2, 2]));
        let mut g = Graph::eval(&mut store);
        let scores = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1, 1]), 0.7f32));
        let seg = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2, 2]), 0.9f32));
        let loss = generator_loss(
            &mut g,
            scores,
            seg,
            &target,
            None,
            LossWeights { alpha: 0.0, beta: 0.0 },
        );
        let expect = (0.7f64 - 1.0).powi(2);
        assert!((g.scalar(loss) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn weighted_arithmetic_composes() {
        // adversarial 0.09 + alpha*0.2 + beta*0.4 with alpha=1, beta=0.5
        let mut store = ParamStore::new();
        let mut g = Graph::eval(&mut store);
        // score 0.7 -> (0.7-1)^2 = 0.09
        let scores = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1, 1]), 0.7f32));
        // dice terms engineered through plain constants:
        // p=0.25 everywhere, t=1: dice = 1 - 2*0.25n/(0.25n+n) = 0.6 ... use
        // direct probe instead: craft p,t giving dice losses 0.2 and 0.4
        // p uniform a, t all ones: loss = 1 - 2a/(a+1)  => a = (1-L)/(1+L)
        let a_seg = (1.0 - 0.2f64) / (1.0 + 0.2); // dice loss 0.2
        let a_edge = (1.0 - 0.4f64) / (1.0 + 0.4); // dice loss 0.4
        let n = 1000usize;
        let ones = ArrayD::from_elem(IxDyn(&[n]), 1.0f32);
        let seg = g.constant(ArrayD::from_elem(IxDyn(&[n]), a_seg as f32));
        let edge = g.constant(ArrayD::from_elem(IxDyn(&[n]), a_edge as f32));
        let loss = generator_loss(&mut g, scores, seg, &ones, Some((edge, &ones)), LossWeights::default());
        // 0.09 + 1.0*0.2 + 0.5*0.4 = 0.49
        assert!((g.scalar(loss) - 0.49).abs() < 1e-4, "{}", g.scalar(loss));
    }

    #[test]
    fn losses_nonnegative_on_random_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..100 {
            let dims = [1usize, 1, 2, 2, 2];
            let mk = |rng: &mut ChaCha12Rng, lo: f32, hi: f32| {
                ArrayD::from_shape_fn(IxDyn(&dims), |_| rng.random_range(lo..hi))
            };
            let target = ArrayD::from_shape_fn(IxDyn(&dims), |_| f32::from(rng.random::<bool>()));
            let mut g = Graph::eval(&mut store);
            let real = g.constant(mk(&mut rng, -2.0, 2.0));
            let fake = g.constant(mk(&mut rng, -2.0, 2.0));
            let seg = g.constant(mk(&mut rng, 0.0, 1.0));
            let dl = discriminator_loss(&mut g, real, fake);
            let gl = generator_loss(&mut g, fake, seg, &target, None, LossWeights::default());
            assert!(g.scalar(dl) >= 0.0);
            assert!(g.scalar(gl) >= 0.0);
        }
    }

    #[test]
    fn dice_loss_value_checks_shapes() {
        let p = ArrayD::zeros(IxDyn(&[2, 2]));
        let t = ArrayD::zeros(IxDyn(&[2, 3]));
        assert!(dice_loss_value(&p, &t).is_err());
    }
}
