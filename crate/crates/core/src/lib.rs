//! Early-exit inference for small convolutional classifiers by per-layer class
//! exclusion.
//!
//! Every convolutional layer of the backbone carries an exit point: the layer's
//! feature maps are compressed by global average pooling and fed to one
//! independent sigmoid unit per class. At inference time each exit removes the
//! classes whose probability falls below `beta * max`, a class that becomes
//! the most probable one again at a later exit is put back, and inference stops
//! as soon as a single class remains.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f32` tensors, kernels, and a reverse-mode tape.
//! - [`model`]: backbone plus exit points, staged forward passes.
//! - [`training`]: the composite cross-entropy + per-head BCE objective.
//! - [`inference`]: exclusion engine, confidence baseline, traces.
//! - [`calibration`]: greedy per-exit `beta` search.
//! - [`costmodel`]: closed-form MAC/FLOP accounting.
//! - [`comparison`]: matched-accuracy comparison with the confidence baseline.
//! - [`data`], [`checkpoint`], [`report`], [`config`]: I/O around the above.

pub mod calibration;
pub mod checkpoint;
pub mod comparison;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod parallel;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
