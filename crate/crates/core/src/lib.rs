#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Conservative natural policy gradient primal-dual solver for tabular
//! constrained MDPs, with exact evaluation oracles, Monte-Carlo estimators
//! over a generative model and an occupancy-measure LP baseline.

pub mod cmdp;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lp;
pub mod policy;
pub mod sampler;
pub mod solver;

pub use cmdp::{Cmdp, CmdpSpec, PolicyMatrix, Signal};
pub use error::{Error, Result};
pub use policy::{FeatureMap, PolicyParams, SmoothnessConstants};
