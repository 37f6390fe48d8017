//! Small reusable layer structs: a convolution with bias, a batch-norm
//! parameter bundle, and a fully connected map. Modules compose these and
//! record ops on a [`Graph`].

use super::graph::{Graph, NodeId};
use super::ops::Conv3dCfg;
use super::params::{Init, ParamId, ParamKind, ParamStore};
use rand_chacha::ChaCha12Rng;

/// Construction context: the shared store, the init stream, and the dotted
/// name prefix for this subtree.
pub struct ModuleCtx<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha12Rng,
    pub prefix: String,
}

impl<'a> ModuleCtx<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha12Rng, prefix: impl Into<String>) -> Self {
        ModuleCtx {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn child(&mut self, name: &str) -> ModuleCtx<'_> {
        ModuleCtx {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    fn register(&mut self, leaf: &str, dims: &[usize], init: Init, kind: ParamKind) -> ParamId {
        let name = format!("{}.{}", self.prefix, leaf);
        self.store.register(name, dims, init, kind, self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub cfg: Conv3dCfg,
}

impl Conv3dLayer {
    /// He-initialized convolution with zero bias.
    pub fn new(ctx: &mut ModuleCtx, in_ch: usize, out_ch: usize, cfg: Conv3dCfg) -> Self {
        let k3 = cfg.kernel * cfg.kernel * cfg.kernel;
        let w = ctx.register(
            "weight",
            &[out_ch, in_ch, cfg.kernel, cfg.kernel, cfg.kernel],
            Init::HeNormal { fan_in: in_ch * k3 },
            ParamKind::Weight,
        );
        let b = ctx.register("bias", &[out_ch], Init::Zeros, ParamKind::Weight);
        Conv3dLayer { w, b, cfg }
    }

    /// Zero-initialized convolution (weights and bias). Used for projection
    /// heads so the network starts from an unbiased probability field.
    pub fn new_zeroed(ctx: &mut ModuleCtx, in_ch: usize, out_ch: usize, cfg: Conv3dCfg) -> Self {
        let w = ctx.register(
            "weight",
            &[out_ch, in_ch, cfg.kernel, cfg.kernel, cfg.kernel],
            Init::Zeros,
            ParamKind::Weight,
        );
        let b = ctx.register("bias", &[out_ch], Init::Zeros, ParamKind::Weight);
        Conv3dLayer { w, b, cfg }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv3d(x, self.w, Some(self.b), self.cfg)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm3dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm3dLayer {
    pub fn new(ctx: &mut ModuleCtx, channels: usize) -> Self {
        BatchNorm3dLayer {
            gamma: ctx.register("gamma", &[channels], Init::Ones, ParamKind::Weight),
            beta: ctx.register("beta", &[channels], Init::Zeros, ParamKind::Weight),
            running_mean: ctx.register("running_mean", &[channels], Init::Zeros, ParamKind::Buffer),
            running_var: ctx.register("running_var", &[channels], Init::Ones, ParamKind::Buffer),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(ctx: &mut ModuleCtx, in_features: usize, out_features: usize) -> Self {
        LinearLayer {
            w: ctx.register(
                "weight",
                &[out_features, in_features],
                Init::HeNormal { fan_in: in_features },
                ParamKind::Weight,
            ),
            b: ctx.register("bias", &[out_features], Init::Zeros, ParamKind::Weight),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}
