//! Max-min margin Markov networks: a consistent surrogate for structured prediction,
//! trained in the kernelized dual with block-coordinate Frank-Wolfe and a saddle-point
//! max-min oracle.

pub mod bench;
pub mod calibration;
pub mod data;
pub mod error;
pub mod kernel;
pub mod loss;
pub mod oracle;
pub mod projection;
pub mod synth;
pub mod trainer;

pub use bench::{run_benchmark, BenchConfig, BenchOutput, ExperimentResult, KernelGamma};
pub use calibration::{constant_c, ranking_d_bound, zeta_bruteforce, BirkhoffDecomposition, CalibrationEstimate, SearchBudget, Witness};
pub use data::{DataFormat, Dataset};
pub use error::{M4nError, Result};
pub use kernel::{median_heuristic, KernelSpec};
pub use loss::{Label, Layout, LossDecomposition, LossMatrix, PolytopeState, TaskKind, TaskSpec};
pub use oracle::{certified_gap, spmp_solve, OracleResult, SpmpOptions, WarmStartCache};
pub use projection::{spmp_constants, MirrorMap, SinkhornOptions};
pub use synth::{synth_generate, SynthKind, SynthOutput};
pub use trainer::{gbcfw_train, m3n_train, train, DualModel, Method, OracleBudget, PassRecord, TrainConfig, TrainReport};
