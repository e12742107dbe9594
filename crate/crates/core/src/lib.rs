//! Wearable hypoglycemia detection: signal conditioning, EDA decomposition,
//! windowing, handcrafted features, classical learners, late fusion,
//! evaluation and a synthetic cohort generator.

pub mod classical;
pub mod dataset;
pub mod eda;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod grid;
pub mod ingest;
pub mod preprocess;
pub mod rng;
pub mod signal;
pub mod synthgen;

pub use grid::{Channel, GridSeries, Label, SampleSeries, TimeInstant, GRID_STEP_S};
