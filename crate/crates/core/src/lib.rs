//! Mapper graphs over token-embedding spaces, with LLM-backed agents that
//! explain mapper elements and check those explanations under perturbation.

pub mod agents;
pub mod dataset;
pub mod lens;
pub mod mapper;
pub mod projection;
pub mod synth;
pub mod trajectory;
mod par;

pub use par::is_parallel;
