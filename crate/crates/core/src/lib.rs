//! Sparse-representation face recognition with explicit occlusion modelling.
//!
//! Images are coded over a compound dictionary `[D, B]` of face atoms and
//! occlusion atoms. Residuals per face class and per occlusion category drive
//! the labels, and a residual-ratio index rejects inputs that no block
//! explains well.

pub mod classifier;
pub mod error;
pub mod eval;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod mask;
pub mod maxflow;
pub mod model;
pub mod solvers;
pub mod synth;

pub use classifier::{
    build_compound, classify, classify_src_baseline, rdi, ClassifierConfig, SparsityMode,
};
pub use error::{Result, SocError};
pub use model::{
    block_select, residual, Block, BlockKind, BlockedDictionary, ClassificationOutcome, Decision,
    ImageGrid, ImageVector, OcclusionMask, SparseCoefficients,
};
pub use solvers::{solve_group_bpdn, solve_l1_bpdn, solve_l1_error, SolveReport, SolverConfig};
