//! Continuous-variable measurement-device-independent QKD, end to end:
//! Gaussian covariance algebra, protocol simulation against entangling
//! cloner attacks, communication-free finite-size parameter estimation,
//! and composable secret-key rates against collective and coherent
//! attacks.
//!
//! Units and conventions are uniform across the crate: shot-noise units
//! (vacuum variance 1), quadrature ordering `(q1, p1, q2, p2, ...)`, and
//! all entropies and rates in bits.

pub mod error;
pub mod estimation;
pub mod gaussian;
pub mod keyrate;
pub mod minentropy;
pub mod protocol;

pub use error::{CoreError, Result};
pub use estimation::{EmpiricalMoments, WorstCaseCM};
pub use gaussian::{CovMatrix, Quadrature, SymplecticEigenvalues};
pub use keyrate::{AnalysisMode, AnalysisSpec, CoherentSpec, RateReport, ReconciliationSide, SecurityBudget};
pub use minentropy::CCState;
pub use protocol::{DisplacementCoeffs, RoundBatch, ScenarioParams};
