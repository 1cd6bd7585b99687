//! Solver for composite convex functions `h = f + g` where `f` is reached
//! only through value/gradient callbacks (possibly returning `+inf` outside
//! its domain) and `g` is declared from a fixed set of structured atoms
//! (linear/quadratic cost, box, simplex, linear constraints, l1 ball, hinge
//! budget).
//!
//! Each iteration builds a piecewise-affine lower model of `f` from the last
//! `M` gradients, adds a low-rank quasi-Newton curvature estimate and a
//! proximal trust penalty, and minimizes the model plus `g` with the in-crate
//! dense interior-point QP solver. A chord line search keeps the method a
//! descent method, QP duals recover a subgradient of `g` for residual-based
//! stopping, and the model minimum doubles as a lower bound on the optimum.
//!
//! The `problems` module ships seeded generators for four sample-average
//! benchmark families (Kelly betting, CVaR option portfolios, exponential
//! family density fitting, EVaR news vendor) together with empirical
//! VaR/CVaR/EVaR primitives.

pub mod bundle;
pub mod curvature;
pub mod driver;
pub mod linalg;
pub mod oracle;
pub mod par;
pub mod problems;
pub mod qp;
pub mod rng;
pub mod structured;

pub use bundle::{Bundle, BundlePiece};
pub use curvature::CurvatureModel;
pub use driver::{solve, IterRecord, SolveReport, SolveStatus, SolverConfig};
pub use oracle::{Oracle, OracleEval};
pub use problems::ProblemInstance;
pub use qp::{QpProblem, QpSolution, QpStatus};
pub use structured::StructuredFunction;
