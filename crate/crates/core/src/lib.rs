//! Embeddable engine for AI-assisted data analysis at desk scale.
//!
//! The crate is organized around three groups of modules:
//!
//! - data: [`catalog`] (datasets, schemas, online statistics), [`index`]
//!   (the constraint-fused navigable graph), [`search`] (constraint-aware
//!   traversal and ranking plus the brute-force oracle), [`select`]
//!   (task-aligned working sets) and [`feature`] (CMI feature selection,
//!   interaction mining, two-view embeddings);
//! - model: [`store`] (content-addressed versioned artifacts with deltas,
//!   branches and merges), [`train`] (baseline learners and calibration)
//!   and [`drift`] (sliding-window drift detection with hysteresis);
//! - task: [`task`] (declarative requests, operator binding, DAG planning,
//!   optimization, execution and LLM batch grouping) and [`gateway`]
//!   (budgeted, cached LLM access with a deterministic mock backend).
//!
//! [`engine::Engine`] wires everything over a file-backed data directory;
//! the `aixel` binary is a thin shell around it.
//!
//! Batch-style inner loops (query batches, oracle scans, utility scoring,
//! embedding) run on rayon when the `parallel` feature is enabled
//! (default) and fall back to equivalent sequential code otherwise; both
//! paths produce identical results.

pub mod catalog;
pub mod config;
pub mod drift;
pub mod engine;
pub mod feature;
pub mod gateway;
pub mod index;
pub mod par;
pub mod search;
pub mod select;
pub mod store;
pub mod task;
pub mod train;

pub(crate) mod util;
