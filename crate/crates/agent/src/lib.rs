//! The skill-discovery loop on top of the numeric core.

pub mod assessor;
pub mod evolution;
pub mod fsutil;
pub mod gateway;
pub mod library;
pub mod orchestrator;
pub mod quest;
