//! Named parameter/buffer storage shared by all network modules.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight or bias.
    Weight,
    /// Non-trainable state (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He/Kaiming normal with the given fan-in: std = sqrt(2 / fan_in).
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub kind: ParamKind,
    pub trainable: bool,
    /// Adam first/second moment estimates, allocated on first optimizer step.
    pub adam_m: Option<ArrayD<f32>>,
    pub adam_v: Option<ArrayD<f32>>,
}

/// Flat store of every parameter and buffer in a model pair, addressed by
/// [`ParamId`] and by hierarchical dotted name (used by checkpoints and the
/// pretrained-weight loader).
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        init: Init,
        kind: ParamKind,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(dims), |_| (standard_normal(rng) * std) as f32)
            }
            Init::Zeros => ArrayD::zeros(IxDyn(dims)),
            Init::Ones => ArrayD::from_elem(IxDyn(dims), 1.0),
        };
        let grad = ArrayD::zeros(IxDyn(dims));
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            kind,
            trainable: kind == ParamKind::Weight,
            adam_m: None,
            adam_v: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids whose dotted name starts with `prefix.` (or equals `prefix`).
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name == prefix || e.name.starts_with(&format!("{prefix}.")))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Total number of scalar values across trainable weights with the given
    /// name prefix (normalization buffers excluded).
    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .filter(|e| e.name == prefix || e.name.starts_with(&format!("{prefix}.")))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Box-Muller standard normal draw (two uniforms per sample so the stream
/// consumption pattern is fixed).
pub(crate) fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn registration_and_lookup() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.register("net.conv.weight", &[4, 2, 3, 3, 3], Init::HeNormal { fan_in: 54 }, ParamKind::Weight, &mut rng);
        let b = store.register("net.conv.bias", &[4], Init::Zeros, ParamKind::Weight, &mut rng);
        let rm = store.register("net.bn.running_mean", &[4], Init::Zeros, ParamKind::Buffer, &mut rng);
        assert_eq!(store.value(w).shape(), &[4, 2, 3, 3, 3]);
        assert!(store.value(b).iter().all(|&x| x == 0.0));
        assert!(!store.trainable(rm));
        assert_eq!(store.find("net.conv.bias"), Some(b));
        assert_eq!(store.ids_with_prefix("net.conv").len(), 2);
        assert_eq!(store.parameter_count("net"), 4 * 2 * 27 + 4);
    }

    #[test]
    fn he_init_scale_is_reasonable() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.register("w", &[64, 16, 3, 3, 3], Init::HeNormal { fan_in: 16 * 27 }, ParamKind::Weight, &mut rng);
        let vals = store.value(w);
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = vals.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (16.0 * 27.0);
        assert!(mean.abs() < 0.01);
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs expected {expected}");
    }
}
