//! Black-box distribution inference on synthetic tabular data: victim/shadow
//! model training, distinguishing attacks, leakage metrics, resampling and
//! poisoning defenses, and a deterministic experiment runner.

pub mod adaptive;
pub mod attacks;
pub mod datagen;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod seed;
