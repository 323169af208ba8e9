//! Outer approximations of regions of attraction (ROA) for polynomial
//! control systems.
//!
//! The approximation is computed from a sum-of-squares program posed on a
//! decomposition of the time horizon and the state-space box into cells.
//! The positions of the cell boundaries enter the compiled semidefinite
//! program as parameters; this crate can differentiate the optimal value
//! with respect to those positions and drive them with a first-order
//! method, shrinking the approximation at fixed memory cost.
//!
//! Pipeline: [`model`] describes the system and the split layout,
//! [`soscomp`] compiles the certificate program into standard conic form,
//! [`cone`] solves it and owns the cone projection operators, [`diffcone`]
//! differentiates the solution map, [`paramdiff`] chains that with the
//! data sensitivity to the split positions, [`optim`] runs the descent,
//! and [`roa`] evaluates, measures and exports certificates.

// Force the BLAS/LAPACK backend link for clarabel's PSD cone support.
extern crate openblas_src;

pub mod cone;
pub mod diffcone;
pub mod error;
pub mod model;
pub mod optim;
pub mod paramdiff;
pub mod poly;
pub mod roa;
pub mod soscomp;
pub mod sparse;

pub use cone::{Cone, ConicProgram, ConicSolution, SolveStatus};
pub use error::Error;
pub use model::{Decomposition, SplitConfig, SystemSpec};
pub use poly::{Monomial, MonomialBasis, Polynomial};
pub use soscomp::{CompiledProgram, PiecewiseCertificate};
