pub mod field;
pub mod geometry;
pub mod ingest;
pub mod neighborhood;
pub mod pipelines;
pub mod proposals;
pub mod simworld;
pub mod solver;
