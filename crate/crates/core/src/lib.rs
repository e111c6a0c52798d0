//! Unsupervised anomaly detection on Bitcoin-style transaction ledgers.
//!
//! A ledger is viewed as two graphs: users linked by payments, and
//! transactions linked by the coins one spends from another. Each node gets
//! a feature vector; three detectors work on the normalized features:
//!
//! * [`kmeans`]: Lloyd's k-means, used as a reference partition;
//! * [`gaussian`]: multivariate Gaussian fit, ranked by Mahalanobis distance;
//! * [`ocsvm`]: one-class ν-SVM with an RBF kernel, trained by SMO.
//!
//! [`eval`] compares the detectors with each other across the two graphs
//! and against known anomalies, and [`synth`] builds seeded test ledgers
//! with planted anomalies.

pub mod error;
pub mod eval;
pub mod features;
pub mod gaussian;
pub mod graphs;
pub mod kmeans;
pub mod ledger;
pub mod matrix;
pub mod ocsvm;
pub mod ranking;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{DualEvalResult, EntityKind, GroundTruth, OwnershipIndex};
pub use features::{default_schema, Feature, FeatureMatrix, FeatureSchema, GraphKind};
pub use gaussian::{GaussianModel, Threshold};
pub use graphs::{TransactionGraph, UserGraph};
pub use kmeans::KMeansModel;
pub use ledger::{Satoshi, TransactionRecord, UserMap};
pub use matrix::Matrix;
pub use ocsvm::{OcSvmModel, OcSvmParams, SmoConfig};
pub use ranking::AnomalyRanking;
