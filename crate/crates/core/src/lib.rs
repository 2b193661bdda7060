//! Unsupervised 3D-model-based multi-vehicle tracking.
//!
//! The crate covers camera self-calibration from pedestrian head/foot
//! observations, a deformable wireframe vehicle model with gradient-based
//! fitness scoring, constrained multiple-kernel tracking with a Kalman
//! filter, adaptive segmentation feedback, detection fusion, and a
//! synthetic scene renderer plus CLEAR MOT evaluation for verification.

pub mod assignment;
pub mod calibration;
pub mod detection_fusion;
pub mod emna;
pub mod geometry;
pub mod image;
pub mod segmentation;
pub mod harness;
pub mod tracking;
pub mod vehicle_model;
