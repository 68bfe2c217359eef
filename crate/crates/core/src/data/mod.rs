//! Synthetic multi-label scenes with patch-level ground truth, and the
//! seed-quality metrics used to score localization maps against it.

mod archive;
mod eval;
mod synth;

pub use archive::{Dataset, DatasetHeader, DATASET_MAGIC};
pub use eval::{
    confusion_matrix, default_thresholds, evaluate_seeds, evaluation_csv, evaluation_summary, forward_all,
    ground_truth, k_sweep, k_sweep_csv, k_sweep_records, localize_all, maps_to_mask, threshold_sweep, KSweepRow,
    SeedEvaluation,
};
pub use synth::{class_color, generate_dataset, generate_sample, SceneGeometry, SyntheticSample};
