pub mod dsp;
pub mod f0codec;
pub mod par;
pub mod nn;
pub mod model;
pub mod training;
pub mod synth;
pub mod eval;
pub mod config;
