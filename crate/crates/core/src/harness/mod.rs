//! Progressive training: one module at a time, children frozen unless
//! flagged, gradients flowing through them into the new module.

mod checkpoint;
mod experiments;
mod gradcheck;
mod metrics;
mod presets;
mod train;

pub use checkpoint::{load_module, load_modules, save_module, LoadReport};
pub use experiments::{
    run_ablation, run_low_data, AblationCell, AblationRow, AblationTable, LowDataCurve,
    LowDataPoint, Stack, StackConfig, TaskBudget,
};
pub use gradcheck::grad_check_task;
pub use metrics::{evaluate, Metrics, TemplateScore};
pub use presets::{desk_stack, preset, tiny_stack, Preset, PRESETS};
pub use train::{build_module, prerequisites, subsample, train_task, TrainConfig};
