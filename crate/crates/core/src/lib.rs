//! Synthesis of constraint-feasible decentralized affine control policies for
//! dynamically coupled linear systems.
//!
//! Pipeline: [`model`] validates an instance, [`infograph`] splits each
//! controller's information into a locally nested part and
//! information-coupling states, [`lifting`] builds the trajectory-space
//! operators, [`synthesis`] co-optimizes an affine policy with an ellipsoidal
//! assume-guarantee contract through a conic program solved by [`conic`],
//! and [`simulate`] validates the result by Monte Carlo rollout.

// Links the system BLAS/LAPACK used by the conic solver's PSD cones.
extern crate openblas_src;

pub mod conic;
pub mod fixtures;
pub mod infograph;
pub mod layout;
pub mod lifting;
pub mod linalg;
pub mod model;
pub mod serde_matrix;
pub mod simulate;
pub mod synthesis;

pub use infograph::{
    build_coupling_graphs, compute_decomposition, CouplingGraphs, InfoDecomposition,
    SparsityPattern,
};
pub use layout::{Layout, SubsystemDims};
pub use lifting::{lift, LiftedSystem};
pub use model::{load_instance, save_instance, validate_instance, ModelError, ProblemInstance};
pub use simulate::{SimulationConfig, SimulationReport};
pub use synthesis::{synthesize, AffinePolicy, Contract, SynthesisResult};
