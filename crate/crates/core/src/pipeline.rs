//! Two-step estimation driver shared by the CLI and the simulation harness.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::SplineSpec;
use crate::covsmooth::{smooth_covariance_direct, CovSmoothOptions, CovarianceModel};
use crate::error::{Error, Result};
use crate::fpca::{eigensets, predict_scores, UniEigenSet, DEFAULT_GRID};
use crate::fundata::FunDataset;
use crate::mean::{center, fit_univariate_means, FixedFormula, MeanFit, SmoothingOptions};
use crate::mfpca::{
    mfpca, select_truncation, variance_table, MultiEigenBasis, ScalarProduct, TruncationCriterion, VarianceTable,
};
use crate::model::{fit, ModelFit, ModelSpec, Scedasticity};
use crate::numeric::unit_grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Unit,
    InverseVariance,
}

/// Scalar-product weights: a named rule or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Named(WeightKind),
    Explicit(Vec<f64>),
}

impl WeightSpec {
    pub fn scalar_product(&self, sigma2: &[f64], grid: Vec<f64>) -> Result<ScalarProduct> {
        match self {
            WeightSpec::Named(WeightKind::Unit) => ScalarProduct::unit(sigma2.len(), grid),
            WeightSpec::Named(WeightKind::InverseVariance) => ScalarProduct::inverse_variance(sigma2, grid),
            WeightSpec::Explicit(w) => {
                if w.len() != sigma2.len() {
                    return Err(Error::Config(format!(
                        "{} explicit weights for {} dimensions",
                        w.len(),
                        sigma2.len()
                    )));
                }
                ScalarProduct::new(w.clone(), grid)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationRule {
    Tv,
    Uv,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncationOptions {
    pub rule: TruncationRule,
    pub level: f64,
    /// Component counts per process for the fixed rule; absent processes get 0.
    pub fixed: BTreeMap<String, usize>,
}

impl Default for TruncationOptions {
    fn default() -> Self {
        TruncationOptions {
            rule: TruncationRule::Tv,
            level: 0.95,
            fixed: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub formula: FixedFormula,
    pub mean_smoothing: SmoothingOptions,
    pub covariance: CovSmoothOptions,
    pub grid_points: usize,
    pub weights: WeightSpec,
    pub truncation: TruncationOptions,
    pub scedasticity: Scedasticity,
    pub smoothing: SmoothingOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            formula: FixedFormula::intercept_only(SplineSpec {
                degree: 3,
                num_basis: 8,
                penalty_order: 2,
            }),
            mean_smoothing: SmoothingOptions::default(),
            covariance: CovSmoothOptions::default(),
            grid_points: DEFAULT_GRID,
            weights: WeightSpec::Named(WeightKind::Unit),
            truncation: TruncationOptions::default(),
            scedasticity: Scedasticity::PerDimension,
            smoothing: SmoothingOptions::default(),
        }
    }
}

/// Results of the covariance-estimation step.
#[derive(Debug, Clone)]
pub struct StepOne {
    pub mean: MeanFit,
    pub covariance: CovarianceModel,
    pub eigensets: Vec<Vec<UniEigenSet>>,
    /// Multivariate bases with `truncation` set by the selected rule.
    pub bases: Vec<MultiEigenBasis>,
    pub scalar_product: ScalarProduct,
    pub variance: VarianceTable,
    pub warnings: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

struct Timer {
    start: Instant,
    out: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Timer {
            start: Instant::now(),
            out: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let s = self.start.elapsed().as_secs_f64();
        log::info!("stage {stage}: {s:.3}s");
        self.out.push((stage.to_string(), s));
        self.start = Instant::now();
    }
}

pub fn step_one(ds: &FunDataset, opts: &FitOptions) -> Result<StepOne> {
    let mut timer = Timer::new();
    let mean = fit_univariate_means(ds, &opts.formula, &opts.mean_smoothing)?;
    let centered = center(ds, &mean)?;
    timer.lap("mean");
    let covariance = smooth_covariance_direct(&centered, &opts.covariance)?;
    let mut warnings = covariance.warnings.clone();
    timer.lap("covariance");
    let sets = eigensets(&covariance, opts.grid_points)?;
    let scores = predict_scores(&centered, &sets, &covariance)?;
    timer.lap("univariate-fpca");
    let grid = unit_grid(opts.grid_points);
    let sp = opts.weights.scalar_product(&covariance.sigma2, grid)?;
    let mut bases = scores
        .iter()
        .zip(&sets)
        .map(|(s, set)| mfpca(s, set, &sp))
        .collect::<Result<Vec<_>>>()?;
    let counts = match opts.truncation.rule {
        TruncationRule::Fixed => {
            for name in opts.truncation.fixed.keys() {
                if !bases.iter().any(|b| &b.process == name) {
                    return Err(Error::Config(format!(
                        "fixed truncation names unknown process '{name}'"
                    )));
                }
            }
            bases
                .iter()
                .map(|b| {
                    let want = opts.truncation.fixed.get(&b.process).copied().unwrap_or(0);
                    if want > b.len() {
                        warnings.push(format!(
                            "process '{}': {} components requested, {} available",
                            b.process,
                            want,
                            b.len()
                        ));
                    }
                    want.min(b.len())
                })
                .collect()
        }
        rule => {
            let crit = if rule == TruncationRule::Tv {
                TruncationCriterion::Tv
            } else {
                TruncationCriterion::Uv
            };
            select_truncation(&bases, &covariance.sigma2, &sp, crit, opts.truncation.level)?
        }
    };
    for (b, m) in bases.iter_mut().zip(counts) {
        b.truncation = m;
    }
    let variance = variance_table(&bases, &covariance.sigma2, &sp, &ds.dims)?;
    timer.lap("mfpca");
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(StepOne {
        mean,
        covariance,
        eigensets: sets,
        bases,
        scalar_product: sp,
        variance,
        warnings,
        timings: timer.out,
    })
}

pub fn step_two(ds: &FunDataset, opts: &FitOptions, s1: &StepOne) -> Result<ModelFit> {
    let start = Instant::now();
    let spec = ModelSpec {
        formula: opts.formula.clone(),
        bases: s1.bases.clone(),
        scedasticity: opts.scedasticity,
        sigma2: s1.covariance.sigma2.clone(),
        smoothing: opts.smoothing.clone(),
    };
    let out = fit(ds, &spec)?;
    log::info!("stage model: {:.3}s", start.elapsed().as_secs_f64());
    Ok(out)
}
