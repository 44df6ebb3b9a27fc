pub mod env;
pub mod execution;
pub mod explore;
pub mod harness;
pub mod knowledge;
pub mod llm_bridge;
pub mod model;
pub mod perception;
pub mod rng;
pub mod scheduling;
pub mod search;
