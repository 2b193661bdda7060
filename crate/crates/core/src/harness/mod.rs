//! Synthetic scenes with exact ground truth, CLEAR MOT evaluation and the
//! pipeline plumbing used by the CLI.

pub mod mot;
pub mod pipeline;
pub mod render;
pub mod scenario;

use thiserror::Error;

pub use pipeline::{FrameResult, Pipeline, PipelineConfig};
pub use mot::{evaluate_mot, load_mot_csv, read_mot_csv, MatchEntry, MotBox, MotReport};
pub use scenario::{simulate_to_dir, RenderedFrame, ScenarioConfig, Simulator, VehicleGt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}
