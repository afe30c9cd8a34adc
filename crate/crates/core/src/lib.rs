pub mod checkpoint;
pub mod generate;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod score;
pub mod synthetic;
pub mod train;
