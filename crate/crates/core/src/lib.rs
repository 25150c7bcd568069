//! Differentially private hierarchical text classification.
//!
//! The crate trains per-level classifiers over a class tree with DP-Adam,
//! tracks the privacy cost of training with a Rényi-DP ledger, and audits
//! trained checkpoints with a white-box membership-inference attack so the
//! empirical leakage can be compared against the theoretical DP bound.
//!
//! Modules, bottom up:
//!
//! * [`tensor`]: dense f64 tensors with a reverse-mode tape and per-example
//!   gradient capture; the numeric substrate for everything else.
//! * [`taxonomy`]: the class tree, label paths, ancestor and LCA queries.
//! * [`data`]: tokenization, vocabularies, embeddings, dataset ingestion,
//!   synthetic corpora, splits.
//! * [`model`]: BoW, CNN, and tiny-transformer encoders with one softmax
//!   head per hierarchy level, plus hierarchy-consistent path resolution.
//! * [`optim`]: Adam and DP-Adam (per-example clipping, Gaussian noise),
//!   clipping-norm calibration, the training loop with early stopping.
//! * [`privacy`]: the RDP ledger, (ε,δ) conversion, and the membership
//!   advantage bound.
//! * [`attack`]: white-box membership inference: splits, features, the
//!   attack classifier, and attack metrics (accuracy, AUC, advantage).
//! * [`metrics`]: flat, hierarchical, and LCA evaluation metrics.
//! * [`harness`]: config-driven experiment orchestration and report/plot
//!   emission.

pub mod attack;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod taxonomy;
pub mod tensor;

pub use attack::{AttackModel, AttackRecord, AttackReport};
pub use data::{Record, Vocabulary};
pub use harness::{ExperimentConfig, RunManifest};
pub use metrics::EvalResult;
pub use model::{EncoderConfig, HtcModel, LevelPrediction};
pub use optim::{DpConfig, TrainReport};
pub use privacy::{PrivacySpec, RdpLedger};
pub use taxonomy::{LabelPath, NodeId, Taxonomy};
pub use tensor::{Graph, ParamStore, Tensor};
