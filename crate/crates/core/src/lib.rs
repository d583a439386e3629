//! Stochastic iterative rotation averaging from relative-rotation
//! measurements.
//!
//! Given a graph whose edges carry relative rotations `R_i = R_ij · R_j`,
//! the solvers in [`averaging`] recover every node's orientation (up to one
//! global rotation) by repeatedly sampling a node and one of its neighbors
//! and nudging the node toward the pose its neighbor implies. Three
//! parameterizations are provided: rotation matrices updated on SO(3),
//! unit quaternions in R⁴, and Modified Rodrigues Parameters, which work in
//! an open Euclidean space and escape the wrap-around critical points the
//! other two get stuck in.
//!
//! ```
//! use rotavg::averaging::{run_averaging, Algorithm, OptimizerConfig};
//! use rotavg::envgraph::{generate_uniform_env, GeneratorConfig};
//!
//! let env = generate_uniform_env(&GeneratorConfig { n_nodes: 20, ..Default::default() }).unwrap();
//! let cfg = OptimizerConfig { algorithm: Algorithm::Mrp, max_iters: 2000, ..Default::default() };
//! let run = run_averaging(&env, &cfg).unwrap();
//! assert!(run.trace.last().unwrap().ape_mean_deg.unwrap() < run.trace[0].ape_mean_deg.unwrap());
//! ```

pub mod averaging;
pub mod envgraph;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rotmath;

pub use averaging::{Algorithm, EstimateSet, Init, OptimizerConfig};
pub use envgraph::{GeneratorConfig, RotationEnvironment};
pub use error::{ConfigError, EnvError, IoError, MetricsError, RotError};
pub use rotmath::{MrpVector, RotationMatrix, TangentVector, UnitQuaternion};
