//! Unstacked DeepONet: a branch net over the masked covariate history, a trunk
//! net over normalized time, merged by a dot product plus a scalar bias.

mod branch;
mod hyper;
mod io;
mod model;
mod scaler;
mod trunk;

pub use branch::{BranchFactory, BranchNet, BranchRegistry, CnnBranch, CnnFactory, FnnBranch, FnnFactory};
pub use hyper::{HyperParams, InputDims};
pub use io::{read_model, write_model};
pub use model::{Batch, DeepOnet, FittedDeepOnet};
pub use scaler::Standardizer;
pub use trunk::Trunk;
