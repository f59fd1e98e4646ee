//! Command-line plumbing for the AFT fitting library: CSV ingestion and
//! emission, flat-file configuration, and the versioned fit artifact shared
//! by `aft fit` and `aft predict`.

pub mod commands;
pub mod config;
pub mod io;
pub mod schema;
