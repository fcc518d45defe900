//! Closed-loop auditory Yes/No EEG brain-computer interface engine.
//!
//! The crate covers the whole pipeline: band-power features ([`signal`]),
//! recordings and epoching ([`dataset`]), a synthetic subject ([`synth`]),
//! decoder training ([`training`]), streaming decoding with evidence
//! accumulation ([`online`]), the timed trial protocol ([`protocol`]),
//! session execution and replay ([`session`]) and the evaluation statistics
//! ([`metrics`]).

pub mod class;
pub mod clock;
pub mod dataset;
pub mod metrics;
pub mod online;
pub mod protocol;
pub mod session;
pub mod signal;
pub mod synth;
pub mod training;

pub use class::{Class, TrueClass};

/// Version written into every JSON document and recording header.
pub const SCHEMA_VERSION: u32 = 1;
