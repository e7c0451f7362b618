pub mod attention;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod pose;
pub mod structured;
pub mod synthetic;
pub mod viz;

pub use error::{Result, SemError};
