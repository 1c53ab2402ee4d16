//! Post-processing toolkit for detectors trained on federated annotations.
//!
//! The crate works on prediction, ground-truth and verification files rather
//! than on a network. It covers:
//!
//! * box and run-length mask arithmetic ([`geometry`]),
//! * the record types and their CSV/JSON formats ([`io`]),
//! * verification-aware RoI label matrices and the masked sigmoid
//!   cross-entropy ([`labels`]),
//! * RoI pool sampling/partitioning and learning-rate schedules ([`training`]),
//! * two-stage multi-model ensembling ([`ensemble`]),
//! * expert category splits ([`experts`]),
//! * submission filters ([`postprocess`]),
//! * federated mAP evaluation ([`eval`]).
//!
//! Every operation is a pure function of its inputs. Where work is split
//! across threads the result is identical to the sequential one.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experts;
pub mod geometry;
pub mod io;
pub mod labels;
pub mod postprocess;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BBox, BinaryMask, SoftMask};
pub use io::{
    CategoryStats, EmbeddingTable, GroundTruthInstance, Hierarchy, Prediction, Roi, RoiPool,
    Verification, VerificationTable,
};

/// Intersection-over-union threshold used by suppression, grouping,
/// RoI assignment and evaluation unless a caller overrides it.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
