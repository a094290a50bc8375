//! Support-set context for episodic few-shot concept problems.
//!
//! An [`Episode`] holds labeled positive and negative support vectors plus
//! labeled queries. The crate provides the pieces needed to classify those
//! queries and to measure how much per-episode context helps:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`episode`] | data model, line-delimited JSON episode files, validation |
//! | [`normalize`] | support-set / train-set standardization, l2 normalization |
//! | [`classifiers`] | kNN, nearest prototype, linear SVM, margin score |
//! | [`encoder`] | small MLP encoder trained with a temperature-scaled contrastive loss |
//! | [`mimic`] | set transformer regressing teacher prototypes or hyperplanes |
//! | [`optim`] | AdamW, one-cycle schedule, finite-difference gradient checks |
//! | [`train`] | mimic and encoder training loops |
//! | [`config`] | TOML run configuration with dotted-key overrides |
//! | [`checkpoint`] | self-describing parameter files |
//! | [`synthetic`] | generator of episodes with per-episode nuisance structure |
//! | [`eval`] | evaluation, robustness sweeps, CSV/markdown reports |
//!
//! All arithmetic is `f64`.

pub mod checkpoint;
pub mod classifiers;
pub mod config;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod mimic;
pub mod normalize;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod train;

pub use classifiers::{Hyperplane, PrototypePair, SvmConfig};
pub use episode::{Dataset, Episode, FeatureVector, Label, Query};
pub use error::{Error, Result};
pub use eval::{EvalReport, Method, MethodSpec};
pub use mimic::{MimicConfig, MimicMode, MimicModel, MimicTargets};
pub use normalize::{NormStats, Normalization};
pub use optim::{AdamW, TrainConfig};
pub use synthetic::EpisodeSpec;


