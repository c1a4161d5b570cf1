//! Single-image food nutrition estimation with monocular depth adaptation,
//! frequency-domain RGB-depth fusion and a masked prediction head, plus a
//! procedural scene generator and the training harness.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod depth;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod nutrition;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use nutrition::{NutritionVector, NUM_TASKS, TASK_NAMES, TASK_UNITS};
