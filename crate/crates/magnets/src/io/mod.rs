//! Persistence and run configuration: binary checkpoints, the text run
//! configuration format with its named presets, and report writers for
//! decode traces and density maps.

mod checkpoint;
mod reports;
mod runconfig;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, TrainMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use reports::{grids_csv, nll_table, trace_text};
pub use runconfig::{RunConfig, PRESET_NAMES};
