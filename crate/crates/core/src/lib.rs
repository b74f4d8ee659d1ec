//! Simulated enclave-based collaborative training.
//!
//! Data owners and a model owner train a shared model inside (simulated)
//! enclaves. Training enclaves see raw data; the aggregator enclave, running
//! the model owner's private update code, only ever sees aggregated updates.
//! Two mechanisms keep individual updates away from it: zero-sum masking
//! ([`masking`]) and hierarchical tree aggregation ([`aggregation`]).

pub mod aggregation;
pub mod cas;
pub mod config;
pub mod costmodel;
pub mod crypto;
pub mod enclaves;
pub mod masking;
pub mod models;
pub mod simnet;
pub mod storage;
pub mod tensors;
pub mod verify;
