//! Few-shot regional indicator regression with LLM-assigned sign constraints
//! and LLM-proposed feature interactions.

pub mod categorizer;
pub mod data;
pub mod ensemble;
pub mod features;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod prompts;
pub mod solver;
pub mod synth;

pub use categorizer::{Category, CategoryAssignment};
pub use data::{FeatureModuleMeta, RegionTable, Registry, Standardizer};
pub use gateway::{Gateway, LlmProvider, LlmRequest, LlmTranscript};
pub use solver::{ConstrainedFit, SignConstraint};
