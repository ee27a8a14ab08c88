pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
