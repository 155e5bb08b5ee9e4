//! Monte Carlo harness: a clustered weak/many-instrument data-generating
//! process, reproducible random streams, and size/power experiment drivers.

pub mod dgp;
pub mod rng;
pub mod runner;

pub use dgp::{
    cluster_sizes, cluster_sizes_pre_adjust, simulate_dataset, simulate_dataset_split, McConfig,
    Truth,
};
pub use runner::{power_experiment, size_experiment, McMethod, RejectionRow, RejectionTable};
