//! Teachable preference dialogue engine.

pub mod domain;
pub mod encoder;
pub mod eval;
pub mod kb;
pub mod manager;
pub mod nlu;
pub mod nn;
pub mod simulator;
