pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod config;
pub mod eval;
pub mod geomodel;
pub mod ingest;
pub mod losses;
pub mod models;
pub mod stats;
pub mod train;
