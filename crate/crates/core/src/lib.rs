//! Multivariate functional additive mixed models for sparse, irregular
//! multivariate functional data.

pub mod basis;
pub mod coarsen;
pub mod covsmooth;
pub mod error;
pub mod fpca;
pub mod fundata;
pub mod mean;
pub mod mfpca;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod pls;
pub mod simeval;

pub use basis::{PenaltyBlock, SplineSpec};
pub use coarsen::{coarsen, coarsen_dataset, point_segment_sqdist, CoarsenResult, Polyline, StopRule};
pub use covsmooth::{CovSmoothOptions, CovarianceModel};
pub use error::{Error, ErrorClass, Result};
pub use fpca::UniEigenSet;
pub use fundata::{CurveInput, DimPoints, FunCurve, FunDataset, GroupingLayer, LayerDecl, LayerKind};
pub use mean::{FixedFormula, MeanFit, SmoothingOptions};
pub use mfpca::{MultiEigenBasis, ScalarProduct, TruncationCriterion, VarianceTable};
pub use model::{ModelFit, ModelSpec, Scedasticity};
pub use pipeline::{FitOptions, StepOne, TruncationOptions, TruncationRule, WeightKind, WeightSpec};
pub use pls::{Criterion, LambdaSearch, PlsFit, PlsProblem};
pub use simeval::{MetricReport, SimSetting, Truth};
