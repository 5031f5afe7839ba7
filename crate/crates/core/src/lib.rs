//! Executability triage and error-driven restoration for computational notebooks.

pub mod analyzer;
pub mod classify;
pub mod config;
pub mod harness;
pub mod llm;
pub mod miner;
pub mod notebook;
pub mod report;
pub mod restore;
