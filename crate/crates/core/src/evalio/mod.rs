//! Evaluation metrics, sequence file IO and synthetic distractor scenes.

pub mod io;
pub mod metrics;
pub mod synth;

pub use io::{load_masks, load_sequence, save_masks, save_sequence};
pub use metrics::{
    contour_accuracy, default_tolerance, evaluate_sequence, overall_accuracy, region_accuracy,
    MetricsReport,
};
pub use synth::{synth_sequence, SynthSceneConfig};
