//! Metric learning and classification with nearest-neighbour Gaussian
//! kernels.
//!
//! Every training embedding becomes a Gaussian kernel centre. A query is
//! classified by the weighted kernel mass each class collects from the
//! query's approximate nearest centres, and the embedding network is trained
//! to maximise the mass on the true class. Centres are refreshed from the
//! network only every few epochs, and neighbour lists come from an
//! occlusion-pruned graph index.

pub mod ann;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod synth;
pub mod train;

pub use ann::{brute_force_knn, AnnIndex, GraphIndex, Neighbour, SearchParams};
pub use bank::{CentreBank, CentreStore, Diagnostics, NeighbourTable, UpdateSchedule};
pub use checkpoint::Checkpoint;
pub use config::{LossKind, RunConfig};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use kernel::{
    classify, kernel_value, log_kernel_sums, nnk_loss, nnk_loss_backward, ClassDistribution, KernelConfig,
    LossGradients, Neighbourhood,
};
pub use net::{MlpModel, ModelSpec, TrainConfig};
pub use train::{enroll, evaluate, train, tune_sigma, EvalMode, Report, TrainHistory, TrainOutcome};
