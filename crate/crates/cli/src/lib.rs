//! Command line and HTTP front ends for the preference teaching engine.

pub mod chat;
pub mod cli;
pub mod config;
pub mod service;

pub use config::{Engine, ServiceConfig, CONFIG_ENV};
