//! Sampling-based sphere separators and r-way divisions of k-ply
//! neighborhood systems, an I/O-counted external-memory substrate, and flow
//! accumulation over triangulated terrains.

pub mod error;
pub mod extmem;
pub mod centerpoint;
pub mod divider;
pub mod geom;
pub mod terrain;
pub mod flow;
pub mod cli;

pub use error::{Error, Result};
