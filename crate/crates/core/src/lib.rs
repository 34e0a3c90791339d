pub mod metrics;
pub mod midi;
pub mod model;
pub mod positional;
pub mod remi;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod views;
