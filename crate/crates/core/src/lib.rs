//! Core of the study-orchestration service: study configuration, the
//! participant flow, in-situ triggers, the interaction log, storage,
//! provider adapters and CSV export.

pub mod clock;
pub mod export;
pub mod flow;
pub mod ids;
pub mod log;
pub mod model;
pub mod provider;
pub mod store;
pub mod trigger;
