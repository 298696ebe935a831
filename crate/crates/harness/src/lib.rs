//! Scripted participants for the study service.
//!
//! A [`BehaviorScript`] is replayed against a running service by
//! [`run_script`], which returns a [`SessionTranscript`] of every response
//! and every popup that fired, and can check the transcript against the
//! study export.

pub mod client;
pub mod export;
pub mod runner;
pub mod script;

pub use client::{Client, ServiceError};
pub use export::{compare_export, diff_files, ExportDiff};
pub use runner::{run_many, run_script, Outcome, RunOptions, SessionTranscript, TranscriptCounts, TranscriptEntry};
pub use script::{Action, BehaviorScript, RateTarget, ScriptError, ScriptStep};
