pub mod attention;
pub mod cli;
pub mod convmodel;
pub mod error;
pub mod features;
pub mod numcore;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
