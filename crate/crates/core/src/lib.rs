//! Hybrid hotel recommendation engine and offline evaluation harness.
//!
//! Two independent engines produce ranked hotel lists for a user:
//!
//! * a content engine that averages the (normalized, PCA-reduced) feature
//!   vectors of the hotels a user stayed at and retrieves the nearest
//!   hotels by Euclidean distance, optionally pruned through k-means
//!   clusters;
//! * a collaborative-filtering engine that factorizes the user × hotel
//!   visit-count matrix with regularized alternating least squares.
//!
//! The two lists are merged by rank interleaving and scored with
//! recall@N over leave-last-out splits.
//!
//! The numeric core is generic over [`Scalar`]; the `*F64` aliases below
//! are what the command-line tool uses.

pub mod catalog;
pub mod cf_engine;
pub mod cli;
pub mod content_engine;
pub mod engines;
pub mod error;
pub mod eval;
pub mod hybrid;
pub mod linalg;
pub mod ranking;
pub mod scalar;
pub mod scenario;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type HotelFeatureVectorF64 = catalog::HotelFeatureVector<f64>;
pub type FeatureCatalogF64 = catalog::FeatureCatalog<f64>;
pub type PcaModelF64 = content_engine::PcaModel<f64>;
pub type ClusterModelF64 = content_engine::ClusterModel<f64>;
pub type UserProfileF64 = content_engine::UserProfile<f64>;
pub type AlsConfigF64 = cf_engine::AlsConfig<f64>;
pub type FactorModelF64 = cf_engine::FactorModel<f64>;
pub type RankedListF64 = ranking::RankedList<f64>;
pub type TrainedEnginesF64 = engines::TrainedEngines<f64>;

pub type HotelFeatureVectorF32 = catalog::HotelFeatureVector<f32>;
pub type PcaModelF32 = content_engine::PcaModel<f32>;
pub type FactorModelF32 = cf_engine::FactorModel<f32>;
