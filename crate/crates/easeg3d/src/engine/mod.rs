//! Training engine: configuration, adversarial training loop,
//! checkpointing, and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod trainer;

pub use ablation::{channel_toggle_sets, component_toggle_sets, run_ablation, AblationRow, ToggleSet};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use trainer::{
    binarize_probabilities, history_to_csv, load_dataset, split_dataset, train, volume_to_tensor,
    EpochRecord, TrainCase, TrainOutcome, TrainState,
};
