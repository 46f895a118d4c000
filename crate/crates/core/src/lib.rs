//! Closed-loop adaptive learning engine.
//!
//! A synthetic EEG source feeds a streaming pipeline
//! (filtering, spatial referencing, epoching, feature extraction) whose
//! output is scored by a linear discriminant into a confusion index. The
//! [`session`] state machine reacts to sustained confusion by pausing the
//! lesson, showing advisories, or switching presentation.

pub mod detect;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod preprocess;
pub mod session;
pub mod sigcore;
pub mod synthgen;

pub use error::{Error, Result};
