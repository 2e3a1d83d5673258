//! Learning, verifying and evaluating neural QSR dissipativity certificates
//! for control-affine plants.
//!
//! The crate learns a storage function V(x) = xᵀṼ(x)x together with
//! state-dependent supply-rate matrices Q(x), S(x), R(x), derives the
//! structured controller u = −R(x)⁻¹S(x)ᵀx from them, certifies the learned
//! functions over a box region by interval branch-and-bound, and evaluates
//! the closed loop by simulation against an LQR baseline.

pub mod algebra;
pub mod certificates;
pub mod diffgraph;
pub mod error;
pub mod losses;
pub mod mat;
pub mod plants;
pub mod simeval;
pub mod trainer;
pub mod verifier;

pub use certificates::CertificateBundle;
pub use diffgraph::{MlpParams, Tape};
pub use error::{Error, Result};
pub use mat::Mat;
pub use plants::Plant;
pub use trainer::{SampleSet, TrainConfig};
pub use verifier::{Verdict, VerdictStatus};
