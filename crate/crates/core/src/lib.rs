//! Order-aware reweighted triplet training for binary embeddings.
//!
//! Pipeline: an [`encoder::Encoder`] maps features to relaxed codes in
//! `[0,1]^q`; codes are binarized into [`codes::PackedCode`]s and ranked by
//! Hamming distance per query ([`ranking`]); [`mining`] turns each rank list
//! into triplets weighted by the change in average precision from swapping
//! their positive and negative; [`loss`] scores `Σ λ ℓ^γ` on the relaxed
//! codes; [`train`] and [`harness`] run and evaluate the method against its
//! ablations and mining baselines.

pub mod codes;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod loss;
pub mod mining;
pub mod ranking;
pub mod train;

pub use codes::{binarize, hamming, PackedCode, RelaxedCode};
pub use data::{LabelSet, LabeledDataset, SyntheticSpec};
pub use encoder::{Encoder, Sgd, SgdConfig};
pub use error::{Error, Result};
pub use harness::{EvalReport, ExperimentConfig};
pub use loss::{LossConfig, Weighting};
pub use mining::{Triplet, WeightedTriplet};
pub use ranking::{average_precision, mean_average_precision, swap_delta_ap, RankList};
pub use train::{Method, TrainConfig};
