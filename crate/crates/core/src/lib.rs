//! Digital multicellularity simulator.
//!
//! Cells occupy a toroidal grid and are driven by event-driven linear
//! genetic programs running on four per-neighbor virtual CPUs. On top of
//! the simulation sits a measurement toolbox: stint-based evolution,
//! competition fitness assays, nopout/perturbation complexity screens,
//! and tag-based phylogenetic reconstruction.

pub mod assay;
pub mod complexity;
pub mod config;
pub mod draw;
pub mod evolve;
pub mod genome;
pub mod ops;
pub mod parallel;
pub mod phylo;
pub mod tag;
pub mod vm;
pub mod world;

pub use config::RunConfig;
pub use genome::Genome;
pub use tag::{MatchThresholds, Tag};
