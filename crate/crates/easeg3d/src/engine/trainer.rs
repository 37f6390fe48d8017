//! Adversarial training loop: alternating discriminator/generator updates,
//! per-epoch validation, best-checkpoint persistence, and history output.

use super::checkpoint::{load_checkpoint, restore_store, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use super::config::TrainConfig;
use crate::adversarial::{
    discriminator_loss, generator_loss, LossWeights, PatchDiscriminator, DISCRIMINATOR_PREFIX,
};
use crate::data::{extract_edge_map, EdgeMode, SegMask, Volume};
use crate::error::{Error, Result};
use crate::gfe::{EdgeAwareSegNet, GENERATOR_PREFIX};
use crate::metrics::{evaluate_case, MetricReport};
use crate::nn::{Adam, Graph, ParamStore};
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One training example: a normalized volume, its mask, and the mask's
/// boundary edge map.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub id: String,
    pub volume: Volume,
    pub mask: SegMask,
    pub edge: Array3<u8>,
}

impl TrainCase {
    pub fn new(id: impl Into<String>, volume: Volume, mask: SegMask) -> Result<Self> {
        if volume.dims() != mask.dims() {
            return Err(Error::shape("volume/mask pair", &volume.dims(), &mask.dims()));
        }
        let edge = extract_edge_map(&mask, EdgeMode::Boundary).values;
        Ok(TrainCase {
            id: id.into(),
            volume,
            mask,
            edge,
        })
    }
}

/// Scan a directory for `<case>.hdr` + `<case>_mask.hdr` pairs, normalize
/// the volumes, and derive edge maps. Cases come back sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainCase>> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(base) = name.strip_suffix("_mask.hdr") {
            ids.push(base.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `<case>.hdr` + `<case>_mask.hdr` pairs found in {}",
            dir.display()
        )));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let volume = crate::data::load_volume(dir.join(format!("{id}.hdr")))?.normalize()?;
        let mask = crate::data::load_mask(dir.join(format!("{id}_mask.hdr")))?;
        cases.push(TrainCase::new(id, volume, mask)?);
    }
    Ok(cases)
}

/// Split a dataset into train/validation parts: the trailing
/// `val_fraction` of the sorted cases (at least one) validates.
pub fn split_dataset(cases: &[TrainCase], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = cases.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let n_train = n - n_val;
    ((0..n_train).collect(), (n_train..n).collect())
}

pub struct TrainState {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub generator: EdgeAwareSegNet,
    pub discriminator: PatchDiscriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: usize,
    pub best_dice: f64,
}

/// Per-epoch record written to the history CSV.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub val: MetricReport,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_dice: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub latest_checkpoint: PathBuf,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let generator = EdgeAwareSegNet::new(&mut store, config.seed, config.model_config())?;
        let discriminator = PatchDiscriminator::new(&mut store, config.seed.wrapping_add(1));
        let opt_g = Adam::new(
            store.ids_with_prefix(GENERATOR_PREFIX),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
        );
        let opt_d = Adam::new(
            store.ids_with_prefix(DISCRIMINATOR_PREFIX),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
        );
        Ok(TrainState {
            config,
            store,
            generator,
            discriminator,
            opt_g,
            opt_d,
            epoch: 0,
            best_dice: f64::NEG_INFINITY,
        })
    }

    /// Rebuild a state from a checkpoint: reconstructs the architecture
    /// from the config snapshot, then restores every tensor exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let mut state = TrainState::new(ckpt.meta.config.clone())?;
        restore_store(path, &ckpt, &mut state.store)?;
        state.epoch = ckpt.meta.epoch;
        state.best_dice = ckpt.meta.best_dice;
        state.opt_g.set_step_count(ckpt.meta.adam_g_step);
        state.opt_d.set_step_count(ckpt.meta.adam_d_step);
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            adam_g_step: self.opt_g.step_count(),
            adam_d_step: self.opt_d.step_count(),
            best_dice: self.best_dice,
            config: self.config.clone(),
        };
        save_checkpoint(path, &meta, &self.store)
    }

    /// One alternating update on a batch: the discriminator first (with the
    /// generator output detached), then the generator against the updated
    /// discriminator. Returns (loss_d, loss_g).
    pub fn train_step(&mut self, batch: &[&TrainCase]) -> Result<(f64, f64)> {
        assert!(!batch.is_empty());
        let x_val = stack_volumes(batch);
        let y_val = stack_masks(batch);
        let ye_val = stack_edges(batch);

        let weights = LossWeights {
            alpha: self.config.alpha as f32,
            beta: if self.config.eem { self.config.beta as f32 } else { 0.0 },
        };

        let mut g = Graph::train(&mut self.store);
        let x = g.constant(x_val);
        let (seg, edge_prob) = self.generator.forward(&mut g, x)?;

        // discriminator phase: generator output enters as a constant
        let seg_detached = g.value(seg).clone();
        let y = g.constant(y_val.clone());
        let fake_const = g.constant(seg_detached);
        let real_scores = self.discriminator.score(&mut g, x, y)?;
        let fake_scores = self.discriminator.score(&mut g, x, fake_const)?;
        let loss_d_node = discriminator_loss(&mut g, real_scores, fake_scores);
        let loss_d = g.scalar(loss_d_node) as f64;
        g.backward(loss_d_node);
        self.opt_d.step(g.store);
        g.store.zero_grads();

        // generator phase: scores come from the just-updated discriminator
        let gen_scores = self.discriminator.score(&mut g, x, seg)?;
        let edge_term = match edge_prob {
            Some(p) if weights.beta != 0.0 => Some((p, &ye_val)),
            _ => None,
        };
        let loss_g_node = generator_loss(&mut g, gen_scores, seg, &y_val, edge_term, weights);
        let loss_g = g.scalar(loss_g_node) as f64;
        g.backward(loss_g_node);
        self.opt_g.step(g.store);
        g.store.zero_grads();

        if !(loss_d.is_finite() && loss_g.is_finite()) {
            return Err(Error::TrainingAborted {
                epoch: self.epoch,
                step: 0,
                reason: format!("non-finite losses: loss_d={loss_d}, loss_g={loss_g}"),
            });
        }
        Ok((loss_d, loss_g))
    }

    /// Segmentation probabilities for one volume in evaluation mode.
    pub fn predict(&mut self, volume: &Volume) -> Result<Array3<f32>> {
        let [d, h, w] = volume.dims();
        let x_val = volume_to_tensor(volume);
        let mut g = Graph::eval(&mut self.store);
        let x = g.constant(x_val);
        let (seg, _) = self.generator.forward(&mut g, x)?;
        let probs = g.take_value(seg);
        let flat = probs.as_slice().expect("standard layout").to_vec();
        Ok(Array3::from_shape_vec((d, h, w), flat).expect("shape matches"))
    }

    /// Mean validation metrics plus the per-case reports.
    pub fn evaluate(&mut self, cases: &[&TrainCase]) -> Result<(MetricReport, Vec<MetricReport>)> {
        assert!(!cases.is_empty());
        let mut reports = Vec::with_capacity(cases.len());
        for case in cases {
            let probs = self.predict(&case.volume)?;
            let pred = binarize_probabilities(&probs, case.volume.spacing);
            let report = evaluate_case(&pred, &case.mask, case.mask.spacing, &case.id)?;
            reports.push(report);
        }
        let n = reports.len() as f64;
        let mean = MetricReport {
            case_id: "mean".into(),
            dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
            jaccard: reports.iter().map(|r| r.jaccard).sum::<f64>() / n,
            hd_mm: reports.iter().map(|r| r.hd_mm).sum::<f64>() / n,
            precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
            recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
        };
        Ok((mean, reports))
    }
}

/// Threshold a probability grid at 0.5 into a mask.
pub fn binarize_probabilities(probs: &Array3<f32>, spacing: [f64; 3]) -> SegMask {
    SegMask {
        values: probs.mapv(|p| u8::from(p >= 0.5)),
        spacing,
    }
}

pub fn volume_to_tensor(v: &Volume) -> ArrayD<f32> {
    let [d, h, w] = v.dims();
    let flat = v.values.as_slice().expect("standard layout").to_vec();
    ArrayD::from_shape_vec(IxDyn(&[1, 1, d, h, w]), flat).expect("shape matches")
}

fn stack_volumes(batch: &[&TrainCase]) -> ArrayD<f32> {
    let [d, h, w] = batch[0].volume.dims();
    let mut out = ArrayD::zeros(IxDyn(&[batch.len(), 1, d, h, w]));
    let dst = out.as_slice_mut().unwrap();
    for (i, case) in batch.iter().enumerate() {
        let src = case.volume.values.as_slice().unwrap();
        dst[i * d * h * w..(i + 1) * d * h * w].copy_from_slice(src);
    }
    out
}

fn stack_masks(batch: &[&TrainCase]) -> ArrayD<f32> {
    let [d, h, w] = batch[0].mask.dims();
    let mut out = ArrayD::zeros(IxDyn(&[batch.len(), 1, d, h, w]));
    let dst = out.as_slice_mut().unwrap();
    for (i, case) in batch.iter().enumerate() {
        for (o, &v) in dst[i * d * h * w..(i + 1) * d * h * w]
            .iter_mut()
            .zip(case.mask.values.iter())
        {
            *o = v as f32;
        }
    }
    out
}

fn stack_edges(batch: &[&TrainCase]) -> ArrayD<f32> {
    let (d, h, w) = batch[0].edge.dim();
    let mut out = ArrayD::zeros(IxDyn(&[batch.len(), 1, d, h, w]));
    let dst = out.as_slice_mut().unwrap();
    for (i, case) in batch.iter().enumerate() {
        for (o, &v) in dst[i * d * h * w..(i + 1) * d * h * w]
            .iter_mut()
            .zip(case.edge.iter())
        {
            *o = v as f32;
        }
    }
    out
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch,loss_d,loss_g,val_dice,val_jaccard,val_hd,val_precision,val_recall\n");
    for r in history {
        writeln!(
            &mut out,
            "{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.epoch, r.loss_d, r.loss_g, r.val.dice, r.val.jaccard, r.val.hd_mm, r.val.precision,
            r.val.recall
        )
        .expect("in-memory write");
    }
    out
}

/// Full training run. `out_dir` receives `history.csv`, `best.ckpt` (best
/// validation Dice) and `latest.ckpt` (final state). Returns the history
/// and checkpoint paths. With `resume`, training continues from the given
/// checkpoint's epoch counter.
pub fn train(
    config: &TrainConfig,
    cases: &[TrainCase],
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    for case in cases {
        let dims = case.volume.dims();
        if dims != config.input_shape {
            return Err(Error::shape(
                format!("case {} does not match input_shape", case.id),
                &config.input_shape,
                &dims,
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.config != *config {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            state
        }
        None => TrainState::new(config.clone())?,
    };

    let (train_idx, val_idx) = split_dataset(cases, config.val_fraction);
    let val_cases: Vec<&TrainCase> = val_idx.iter().map(|&i| &cases[i]).collect();

    let best_path = out_dir.join("best.ckpt");
    let latest_path = out_dir.join("latest.ckpt");
    let mut history = Vec::new();
    let mut best_saved = state.best_dice > f64::NEG_INFINITY;

    let start_epoch = state.epoch;
    for epoch in start_epoch + 1..=config.epochs {
        state.epoch = epoch;
        // deterministic per-epoch shuffle
        let mut order = train_idx.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        shuffle(&mut order, &mut rng);

        let mut loss_d_sum = 0.0;
        let mut loss_g_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainCase> = chunk.iter().map(|&i| &cases[i]).collect();
            let (ld, lg) = state.train_step(&batch).map_err(|e| match e {
                Error::TrainingAborted { reason, .. } => Error::TrainingAborted {
                    epoch,
                    step: steps,
                    reason,
                },
                other => other,
            })?;
            loss_d_sum += ld;
            loss_g_sum += lg;
            steps += 1;
        }

        let (val_mean, _) = state.evaluate(&val_cases)?;
        let record = EpochRecord {
            epoch,
            loss_d: loss_d_sum / steps.max(1) as f64,
            loss_g: loss_g_sum / steps.max(1) as f64,
            val: val_mean,
        };
        progress(&record);

        if record.val.dice > state.best_dice {
            state.best_dice = record.val.dice;
            state.save(&best_path)?;
            best_saved = true;
        }
        let stop = match (config.stop_dice, config.stop_hd_vox) {
            (Some(dice), Some(hd)) => record.val.dice >= dice && record.val.hd_mm <= hd,
            (Some(dice), None) => record.val.dice >= dice,
            _ => false,
        };
        history.push(record);
        if stop {
            break;
        }
    }

    state.save(&latest_path)?;
    let csv = history_to_csv(&history);
    std::fs::write(out_dir.join("history.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("history.csv"), e))?;
    Ok(TrainOutcome {
        best_dice: state.best_dice,
        history,
        best_checkpoint: best_saved.then_some(best_path),
        latest_checkpoint: latest_path,
    })
}

/// Fisher-Yates with draws from the given stream.
fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
