//! Minimal single-threaded neural-network engine: named parameter store,
//! define-by-run graph with reverse-mode differentiation, 3D kernels, and
//! an Adam optimizer. Deterministic by construction (fixed accumulation
//! order, no threading, seeded initialization).

pub mod adam;
pub mod archive;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use layers::{BatchNorm3dLayer, Conv3dLayer, LinearLayer, ModuleCtx};
pub use ops::{Conv3dCfg, PoolCfg};
pub use params::{Init, ParamId, ParamKind, ParamStore};
