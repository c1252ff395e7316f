//! Multi-modal knowledge graph representation learning.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gmnm;
pub mod graphdata;
pub mod kgc;
pub mod mmea;
pub mod modality;
pub mod numkit;
pub mod rng;
pub mod run;

pub use error::{Error, Result};
pub use modality::Modality;
