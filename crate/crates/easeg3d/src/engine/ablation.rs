//! Ablation harness: trains and evaluates one model per toggle/channel
//! configuration under a shared seed and emits a metric/parameter table.

use super::config::TrainConfig;
use super::trainer::{train, TrainState};
use crate::error::{Error, Result};
use crate::gfe::GENERATOR_PREFIX;
use crate::engine::trainer::TrainCase;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd_mm: f64,
    pub precision: f64,
    pub recall: f64,
    /// Trainable generator parameter count.
    pub generator_params: usize,
    /// Parameter count in f32 megabytes, the usual reporting unit.
    pub params_mb: f64,
}

/// A named configuration variant.
#[derive(Debug, Clone)]
pub struct ToggleSet {
    pub label: String,
    pub config: TrainConfig,
}

/// The standard component study: full model plus one row with each
/// component removed. The edge-loss weight is forced to zero when the edge
/// head is removed.
pub fn component_toggle_sets(base: &TrainConfig) -> Vec<ToggleSet> {
    let mut sets = Vec::new();
    sets.push(ToggleSet {
        label: "full".into(),
        config: base.clone(),
    });
    let mut no_dcm = base.clone();
    no_dcm.dcm = false;
    sets.push(ToggleSet {
        label: "no_dcm".into(),
        config: no_dcm,
    });
    let mut no_scam = base.clone();
    no_scam.scam = false;
    sets.push(ToggleSet {
        label: "no_scam".into(),
        config: no_scam,
    });
    let mut no_eem = base.clone();
    no_eem.eem = false;
    no_eem.beta = 0.0;
    sets.push(ToggleSet {
        label: "no_eem".into(),
        config: no_eem,
    });
    sets
}

/// The channel-width study over the three stage-width families.
pub fn channel_toggle_sets(base: &TrainConfig) -> Vec<ToggleSet> {
    [[8usize, 16, 32, 64], [16, 32, 64, 128], [32, 64, 128, 256]]
        .into_iter()
        .map(|channels| {
            let mut config = base.clone();
            config.channels = channels;
            ToggleSet {
                label: format!(
                    "ch_{}_{}_{}_{}",
                    channels[0], channels[1], channels[2], channels[3]
                ),
                config,
            }
        })
        .collect()
}

/// Train/evaluate each variant and collect one row per set.
pub fn run_ablation(
    sets: &[ToggleSet],
    cases: &[TrainCase],
    out_dir: &Path,
    mut progress: impl FnMut(&str, &AblationRow),
) -> Result<Vec<AblationRow>> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no toggle sets given".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        set.config.validate()?;
        let run_dir = out_dir.join(&set.label);
        let outcome = train(&set.config, cases, &run_dir, None, |_| {})?;
        // parameter count comes from a fresh state (architecture only)
        let state = TrainState::new(set.config.clone())?;
        let generator_params = state.store.parameter_count(GENERATOR_PREFIX);
        let last = outcome.history.last().ok_or_else(|| {
            Error::InvalidArgument("ablation needs at least one training epoch".into())
        })?;
        let row = AblationRow {
            label: set.label.clone(),
            dice: last.val.dice,
            jaccard: last.val.jaccard,
            hd_mm: last.val.hd_mm,
            precision: last.val.precision,
            recall: last.val.recall,
            generator_params,
            params_mb: generator_params as f64 * 4.0 / 1e6,
        };
        progress(&set.label, &row);
        rows.push(row);
    }
    let csv = ablation_to_csv(&rows);
    std::fs::write(out_dir.join("ablation.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("ablation.csv"), e))?;
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("label,dice,jaccard,hd_mm,precision,recall,generator_params,params_mb\n");
    for r in rows {
        writeln!(
            &mut out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{:.2}",
            r.label, r.dice, r.jaccard, r.hd_mm, r.precision, r.recall, r.generator_params,
            r.params_mb
        )
        .expect("in-memory write");
    }
    out
}
