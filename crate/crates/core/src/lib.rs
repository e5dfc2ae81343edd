//! End-of-Session modelling for online-learning action logs: parse logs,
//! cut them into sessions, encode actions, train a recurrent model that
//! scores each action's chance of ending its session, and evaluate it.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod kv;
pub mod neural;
pub mod par;
pub mod sessionize;
pub mod synthgen;
pub mod training;

pub use error::{EosError, Result};
