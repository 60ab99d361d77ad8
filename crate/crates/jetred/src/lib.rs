//! Reduction of stochastic PDEs given by evolution generators on a jet
//! space to finite-dimensional Stratonovich systems, with reconstruction
//! and an independent finite-difference check.

pub mod coords;
pub mod expr;

pub use coords::{JetCoord, MultiIndex, Space};
pub use expr::{equal, parse_expr, Expr, ParseContext, Verdict};
pub mod calculus;
pub mod linalg;
pub mod flows;
pub mod phi;
pub mod functions;
pub mod model;
pub mod reduction;
pub mod reconstruct;
pub mod sim;
pub mod oracle;
