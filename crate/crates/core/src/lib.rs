//! Multi-turn diagnostic consultation engine.

pub mod config;
pub mod consultation;
pub mod evaluation;
pub mod gateway;
pub mod guideline;
pub mod knowledge;
pub mod sensor;
pub mod text;
pub mod vector_store;
