//! Grid construction, masked row expansion, the discretized likelihood loss,
//! survival reconstruction and training.

pub mod cache;
mod curve;
mod expand;
mod grid;
mod loss;
mod record;
mod train;

pub use curve::SurvivalCurve;
pub use expand::{expand_dataset, ExpandedDataset, ExpandedRow, SubjectBlock};
pub use grid::{build_grid, TimeGrid};
pub use loss::{batch_loss_grad, likelihood_loss, H_LIMIT};
pub use record::{covariate_dims, StepPath, SurvivalRecord};
pub use train::{train, train_expanded, EpochRecord, TrainOutcome, TrainSpec, TrainTrace};
