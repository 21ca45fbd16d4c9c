//! Desk-scale few-shot object detector built around fine-grained prototype
//! distillation. A siamese two-branch backbone extracts mid-level features
//! for query images and support crops; per-class feature queries distill the
//! support features into fine-grained prototypes, which are assigned back
//! into the query map before the region proposal network runs. High-level
//! RoI features are fused with class prototypes through balanced
//! positive/negative sampling and a non-linear fusion head.
//!
//! Everything is double precision and single threaded: runs are
//! bit-reproducible under a fixed seed, and analytic gradients are verified
//! against finite differences in the test suite.

pub mod autodiff;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod ffa;
pub mod fusion;
pub mod harness;
pub mod heatmap;
pub mod optim;
pub mod profiler;
pub mod transfer;
pub mod types;

pub use error::{FpdError, Result};
