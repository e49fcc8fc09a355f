pub mod cli;
pub mod codec;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod imager;
pub mod model;
pub mod pixel;
pub mod synth;
