//! Simulation harness: synthetic data from a known model, relative error
//! metrics and confidence-band coverage.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::SplineSpec;
use crate::covsmooth::CovSmoothOptions;
use crate::error::{Error, Result};
use crate::fundata::{CurveInput, DimPoints, FunDataset, LayerDecl, CURVE_LAYER};
use crate::mean::{FixedFormula, Term, TermKind};
use crate::mfpca::{weighted_inner, MultiEigenBasis, ScalarProduct};
use crate::model::ModelFit;
use crate::numeric::{quantile, sym_eigen_desc, trapezoid_weights, unit_grid};
use crate::pipeline::{
    step_one, step_two, FitOptions, StepOne, TruncationOptions, TruncationRule, WeightKind, WeightSpec,
};

/// Grid on which curves, effects and coverage are evaluated.
pub const EVAL_GRID: usize = 100;
/// Grid of the true eigenfunctions.
pub const BASIS_GRID: usize = 101;

/// `c + l·t + Σ_k a_k sin(2πkt) + b_k cos(2πkt)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthFunction {
    pub constant: f64,
    pub linear: f64,
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

impl TruthFunction {
    pub fn eval(&self, t: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI * t;
        let mut v = self.constant + self.linear * t;
        for (k, a) in self.sin.iter().enumerate() {
            v += a * ((k + 1) as f64 * tau).sin();
        }
        for (k, b) in self.cos.iter().enumerate() {
            v += b * ((k + 1) as f64 * tau).cos();
        }
        v
    }
}

/// True coefficient function of one formula term, one entry per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTruth {
    pub term: String,
    /// Covariates multiplying the effect; empty for the intercept.
    #[serde(default)]
    pub covariates: Vec<String>,
    pub functions: Vec<TruthFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CovariateSource {
    /// Value indexed by the crossed level, cycling through `values`.
    Crossed { values: Vec<f64> },
    /// Bernoulli draw per subject.
    Subject { p: f64 },
    /// Index of the nested level (0, 1, ...).
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: CovariateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessTruth {
    /// Grouping layer name, or `curve` for the smooth residual.
    pub process: String,
    pub eigenvalues: Vec<f64>,
    /// Seed of the deterministic eigenfunction construction.
    pub basis_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    CenteredDecorrelated,
    RawIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub subjects: usize,
    /// Crossed layer name and number of levels.
    pub crossed: Option<(String, usize)>,
    /// Layer nested in subject and number of levels per subject.
    pub nested: Option<(String, usize)>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub name: String,
    pub dims: Vec<String>,
    pub design: Design,
    /// Inclusive range of the number of points per curve and dimension.
    pub points: (usize, usize),
    /// Use the same time points on every dimension of a curve.
    pub shared_times: bool,
    pub covariates: Vec<CovariateSpec>,
    pub mean: Vec<EffectTruth>,
    pub processes: Vec<ProcessTruth>,
    pub sigma2: Vec<f64>,
    /// Scalar product under which the true eigenfunctions are orthonormal.
    pub weights: WeightKind,
    pub scores: ScoreMode,
    /// Difference-penalty order used when fitting fixed effects.
    pub penalty_order: usize,
    pub seed: u64,
    pub replicates: usize,
}

impl SimSetting {
    pub fn check(&self) -> Result<()> {
        let (lo, hi) = self.points;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("invalid point range [{lo}, {hi}]")));
        }
        if self.dims.is_empty() || self.sigma2.len() != self.dims.len() {
            return Err(Error::Config("one error variance per dimension is required".into()));
        }
        if self.sigma2.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("error variances must be non-negative".into()));
        }
        if self.design.subjects == 0 || self.design.reps == 0 {
            return Err(Error::Config(
                "design needs at least one subject and one repetition".into(),
            ));
        }
        for e in &self.mean {
            if e.functions.len() != self.dims.len() {
                return Err(Error::Config(format!(
                    "effect '{}' needs one function per dimension",
                    e.term
                )));
            }
            for c in &e.covariates {
                if !self.covariates.iter().any(|s| &s.name == c) {
                    return Err(Error::Config(format!(
                        "effect '{}' uses unknown covariate '{c}'",
                        e.term
                    )));
                }
            }
        }
        if self.mean.iter().filter(|e| e.covariates.is_empty()).count() != 1 {
            return Err(Error::Config("the mean needs exactly one intercept effect".into()));
        }
        let layers = self.layer_names();
        for p in &self.processes {
            if p.process != CURVE_LAYER && !layers.contains(&p.process) {
                return Err(Error::Config(format!(
                    "process '{}' is not a layer of the design",
                    p.process
                )));
            }
            if p.eigenvalues.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!(
                    "process '{}': eigenvalues must be non-negative",
                    p.process
                )));
            }
            if p.eigenvalues.len() > 4 * self.dims.len() {
                return Err(Error::Config(format!(
                    "process '{}': at most {} components are supported",
                    p.process,
                    4 * self.dims.len()
                )));
            }
        }
        Ok(())
    }

    fn layer_names(&self) -> Vec<String> {
        let mut v = vec!["subject".to_string()];
        if let Some((n, _)) = &self.design.crossed {
            v.push(n.clone());
        }
        if let Some((n, _)) = &self.design.nested {
            v.push(n.clone());
        }
        v
    }

    fn layer_decls(&self) -> Vec<LayerDecl> {
        let mut v = vec![LayerDecl::crossed("subject")];
        if let Some((n, _)) = &self.design.crossed {
            v.push(LayerDecl::crossed(n));
        }
        if let Some((n, _)) = &self.design.nested {
            v.push(LayerDecl::nested(n, "subject"));
        }
        v
    }

    pub fn n_curves(&self) -> usize {
        let d = &self.design;
        d.subjects * d.crossed.as_ref().map_or(1, |c| c.1) * d.nested.as_ref().map_or(1, |c| c.1) * d.reps
    }

    /// Model specification mirroring the data generation, with the number of
    /// components fixed at the true counts.
    pub fn true_model_options(&self) -> FitOptions {
        let t_basis = SplineSpec {
            degree: 3,
            num_basis: 8,
            penalty_order: self.penalty_order,
        };
        let terms = self
            .mean
            .iter()
            .map(|e| Term {
                name: e.term.clone(),
                kind: match e.covariates.len() {
                    0 => TermKind::Intercept,
                    1 => TermKind::Linear {
                        covariate: e.covariates[0].clone(),
                    },
                    _ => TermKind::Interaction {
                        covariates: e.covariates.clone(),
                    },
                },
                t_basis,
            })
            .collect();
        let layers = self
            .processes
            .iter()
            .filter(|p| p.process != CURVE_LAYER)
            .map(|p| p.process.clone())
            .collect();
        FitOptions {
            formula: FixedFormula { terms },
            covariance: CovSmoothOptions {
                basis: SplineSpec {
                    degree: 3,
                    num_basis: 5,
                    penalty_order: self.penalty_order,
                },
                layers: Some(layers),
                ..CovSmoothOptions::default()
            },
            weights: WeightSpec::Named(self.weights),
            truncation: TruncationOptions {
                rule: TruncationRule::Fixed,
                level: 0.95,
                fixed: self
                    .processes
                    .iter()
                    .map(|p| (p.process.clone(), p.eigenvalues.len()))
                    .collect(),
            },
            ..FitOptions::default()
        }
    }
}

fn legendre(k: usize, t: f64) -> f64 {
    let x = 2.0 * t - 1.0;
    match k {
        0 => 1.0,
        1 => 3f64.sqrt() * x,
        2 => 5f64.sqrt() * 0.5 * (3.0 * x * x - 1.0),
        _ => 7f64.sqrt() * 0.5 * (5.0 * x * x * x - 3.0 * x),
    }
}

/// Deterministic orthonormal multivariate basis of cubic polynomials.
pub fn truth_basis(
    process: &str,
    dims: &[String],
    eigenvalues: &[f64],
    sp: &ScalarProduct,
    seed: u64,
) -> Result<MultiEigenBasis> {
    let n_dims = dims.len();
    let m = eigenvalues.len();
    if m > 4 * n_dims {
        return Err(Error::InvalidArgument(format!(
            "{m} components exceed the {} available",
            4 * n_dims
        )));
    }
    let decay = [1.0, 0.8, 0.6, 0.4];
    let grid = &sp.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    while comps.len() < m {
        let coef: Vec<[f64; 4]> = (0..n_dims)
            .map(|_| std::array::from_fn(|k| rng.sample::<f64, _>(StandardNormal) * decay[k]))
            .collect();
        let mut f: Vec<Vec<f64>> = coef
            .iter()
            .map(|c| {
                grid.iter()
                    .map(|&t| (0..4).map(|k| c[k] * legendre(k, t)).sum())
                    .collect()
            })
            .collect();
        let before = weighted_inner(&f, &f, sp)?.sqrt();
        for prev in &comps {
            let ip = weighted_inner(&f, prev, sp)?;
            for d in 0..n_dims {
                for (x, p) in f[d].iter_mut().zip(&prev[d]) {
                    *x -= ip * p;
                }
            }
        }
        let norm = weighted_inner(&f, &f, sp)?.sqrt();
        if norm < 1e-6 * before {
            continue;
        }
        f.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x /= norm));
        comps.push(f);
    }
    let g = grid.len();
    let functions = (0..n_dims)
        .map(|d| DMatrix::from_fn(g, m, |i, k| comps[k][d][i]))
        .collect::<Vec<_>>();
    let w = trapezoid_weights(grid);
    let norms = DMatrix::from_fn(m, n_dims, |k, d| (0..g).map(|i| w[i] * comps[k][d][i].powi(2)).sum());
    Ok(MultiEigenBasis {
        process: process.to_string(),
        dims: dims.to_vec(),
        grid: grid.clone(),
        weights: sp.weights.clone(),
        eigenvalues: eigenvalues.to_vec(),
        functions,
        norms,
        truncation: m,
    })
}

/// Empirically centred scores with covariance exactly `diag(ν)`.
pub fn centered_decorrelated(raw: &DMatrix<f64>, nu: &[f64]) -> Result<DMatrix<f64>> {
    let (n, m) = raw.shape();
    if m == 0 {
        return Ok(raw.clone());
    }
    if n <= m {
        return Err(Error::InvalidArgument(format!(
            "decorrelating {m} scores needs more than {m} levels, got {n}"
        )));
    }
    let mut z = raw.clone();
    for j in 0..m {
        let mu = z.column(j).mean();
        z.column_mut(j).add_scalar_mut(-mu);
    }
    let s = z.transpose() * &z / (n - 1) as f64;
    let (vals, vecs) = sym_eigen_desc(&s);
    if vals[m - 1] <= 1e-12 * vals[0] {
        return Err(Error::Numeric("score draws are collinear".into()));
    }
    let inv_sqrt = &vecs
        * DMatrix::from_diagonal(&DVector::from_iterator(m, vals.iter().map(|v| 1.0 / v.sqrt())))
        * vecs.transpose();
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(m, nu.iter().map(|v| v.sqrt())));
    Ok(z * inv_sqrt * scale)
}

/// True model with its eigenbases, shared by all replicates.
#[derive(Debug, Clone)]
pub struct TruthModel {
    pub setting: SimSetting,
    pub bases: Vec<MultiEigenBasis>,
}

impl TruthModel {
    pub fn new(setting: &SimSetting) -> Result<Self> {
        setting.check()?;
        let grid = unit_grid(BASIS_GRID);
        let sp = match setting.weights {
            WeightKind::Unit => ScalarProduct::unit(setting.dims.len(), grid)?,
            WeightKind::InverseVariance => ScalarProduct::inverse_variance(&setting.sigma2, grid)?,
        };
        let bases = setting
            .processes
            .iter()
            .map(|p| truth_basis(&p.process, &setting.dims, &p.eigenvalues, &sp, p.basis_seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(TruthModel {
            setting: setting.clone(),
            bases,
        })
    }

    pub fn effect(&self, term: &str) -> Result<&EffectTruth> {
        self.setting
            .mean
            .iter()
            .find(|e| e.term == term)
            .ok_or_else(|| Error::Unknown {
                kind: "term",
                name: term.to_string(),
            })
    }

    /// True mean of dimension `d` for covariates `cov` (ordered as the
    /// setting's covariates) at `t`.
    pub fn mean_at(&self, d: usize, cov: &[f64], t: f64) -> f64 {
        self.setting
            .mean
            .iter()
            .map(|e| {
                let x: f64 = e
                    .covariates
                    .iter()
                    .map(|c| {
                        cov[self
                            .setting
                            .covariates
                            .iter()
                            .position(|s| &s.name == c)
                            .expect("checked")]
                    })
                    .product();
                x * e.functions[d].eval(t)
            })
            .sum()
    }
}

/// Drawn random scores of one process, rows keyed by level.
#[derive(Debug, Clone)]
pub struct TrueScores {
    pub process: String,
    pub levels: Vec<String>,
    pub scores: DMatrix<f64>,
}

/// Ground truth of one simulated dataset.
#[derive(Debug, Clone)]
pub struct Truth {
    pub model: TruthModel,
    pub scores: Vec<TrueScores>,
}

impl Truth {
    /// Random-effect curve of `process` at `level` on dimension `d`.
    pub fn random_effect(&self, g: usize, level: usize, d: usize, t: &[f64]) -> Vec<f64> {
        let b = &self.model.bases[g];
        let s = &self.scores[g].scores;
        t.iter()
            .map(|&tt| (0..b.len()).map(|m| s[(level, m)] * b.eval(m, d, tt)).sum())
            .collect()
    }
}

struct CurveKey {
    subject: usize,
    crossed: usize,
    nested: usize,
    rep: usize,
}

/// Draws one dataset from replicate `replicate` of the setting.
pub fn simulate(setting: &SimSetting, replicate: u64) -> Result<(FunDataset, Truth)> {
    let model = TruthModel::new(setting)?;
    simulate_from(&model, replicate)
}

pub fn simulate_from(model: &TruthModel, replicate: u64) -> Result<(FunDataset, Truth)> {
    let s = &model.setting;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(replicate));
    let d = &s.design;
    let n_cross = d.crossed.as_ref().map_or(1, |c| c.1);
    let n_nest = d.nested.as_ref().map_or(1, |c| c.1);
    let mut keys = Vec::with_capacity(s.n_curves());
    for subject in 0..d.subjects {
        for crossed in 0..n_cross {
            for nested in 0..n_nest {
                for rep in 0..d.reps {
                    keys.push(CurveKey {
                        subject,
                        crossed,
                        nested,
                        rep,
                    });
                }
            }
        }
    }
    let subj_label = |i: usize| format!("s{:03}", i + 1);
    let cross_label = |j: usize| format!("c{:03}", j + 1);
    let nest_label = |k: usize| format!("n{}", k + 1);
    let curve_id = |k: &CurveKey| {
        let mut id = subj_label(k.subject);
        if d.crossed.is_some() {
            id.push_str(&format!("_{}", cross_label(k.crossed)));
        }
        if d.nested.is_some() {
            id.push_str(&format!("_{}", nest_label(k.nested)));
        }
        format!("{id}_r{}", k.rep + 1)
    };

    let subject_cov: Vec<Vec<f64>> = s
        .covariates
        .iter()
        .map(|c| match &c.source {
            CovariateSource::Subject { p } => {
                let b = Bernoulli::new(*p).map_err(|e| Error::Config(format!("covariate '{}': {e}", c.name)))?;
                Ok((0..d.subjects)
                    .map(|_| if b.sample(&mut rng) { 1.0 } else { 0.0 })
                    .collect())
            }
            _ => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;

    let mut true_scores = Vec::with_capacity(model.bases.len());
    for (p, b) in s.processes.iter().zip(&model.bases) {
        let levels: Vec<String> = if p.process == CURVE_LAYER {
            let mut v: Vec<String> = keys.iter().map(curve_id).collect();
            v.sort();
            v
        } else if p.process == "subject" {
            (0..d.subjects).map(subj_label).collect()
        } else if d.crossed.as_ref().is_some_and(|c| c.0 == p.process) {
            (0..n_cross).map(cross_label).collect()
        } else {
            let mut v = Vec::new();
            for i in 0..d.subjects {
                for k in 0..n_nest {
                    v.push(format!("{}/{}", subj_label(i), nest_label(k)));
                }
            }
            v.sort();
            v
        };
        let m = b.len();
        let raw = DMatrix::from_fn(levels.len(), m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scores = match s.scores {
            ScoreMode::CenteredDecorrelated => centered_decorrelated(&raw, &b.eigenvalues)?,
            ScoreMode::RawIid => {
                let mut z = raw;
                for (j, nu) in b.eigenvalues.iter().enumerate() {
                    z.column_mut(j).scale_mut(nu.sqrt());
                }
                z
            }
        };
        true_scores.push(TrueScores {
            process: p.process.clone(),
            levels,
            scores,
        });
    }

    let (lo, hi) = s.points;
    let n_dims = s.dims.len();
    let mut curves = Vec::with_capacity(keys.len());
    for k in &keys {
        let id = curve_id(k);
        let cov: Vec<f64> = s
            .covariates
            .iter()
            .zip(&subject_cov)
            .map(|(c, sv)| match &c.source {
                CovariateSource::Crossed { values } => values[k.crossed % values.len()],
                CovariateSource::Subject { .. } => sv[k.subject],
                CovariateSource::Nested => k.nested as f64,
            })
            .collect();
        let mut labels = vec![subj_label(k.subject)];
        if d.crossed.is_some() {
            labels.push(cross_label(k.crossed));
        }
        if d.nested.is_some() {
            labels.push(nest_label(k.nested));
        }
        let level_of = |g: usize| -> usize {
            let p = &s.processes[g].process;
            let key = if p == CURVE_LAYER {
                id.clone()
            } else if p == "subject" {
                subj_label(k.subject)
            } else if d.crossed.as_ref().is_some_and(|c| &c.0 == p) {
                cross_label(k.crossed)
            } else {
                format!("{}/{}", subj_label(k.subject), nest_label(k.nested))
            };
            true_scores[g].levels.binary_search(&key).expect("level drawn")
        };
        let levels: Vec<usize> = (0..true_scores.len()).map(level_of).collect();
        let draw_times = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(lo..=hi);
            let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        };
        let shared = if s.shared_times {
            Some(draw_times(&mut rng))
        } else {
            None
        };
        let mut points = Vec::with_capacity(n_dims);
        for dd in 0..n_dims {
            let t = match &shared {
                Some(t) => t.clone(),
                None => draw_times(&mut rng),
            };
            let sd = s.sigma2[dd].sqrt();
            let y = t
                .iter()
                .map(|&tt| {
                    let re: f64 = model
                        .bases
                        .iter()
                        .enumerate()
                        .map(|(g, b)| {
                            (0..b.len())
                                .map(|m| true_scores[g].scores[(levels[g], m)] * b.eval(m, dd, tt))
                                .sum::<f64>()
                        })
                        .sum();
                    let eps: f64 = rng.sample(StandardNormal);
                    model.mean_at(dd, &cov, tt) + re + sd * eps
                })
                .collect();
            points.push(DimPoints { t, y });
        }
        curves.push(CurveInput {
            id,
            points,
            covariates: cov,
            labels,
        });
    }
    let ds = FunDataset::new(
        s.dims.clone(),
        s.covariates.iter().map(|c| c.name.clone()).collect(),
        s.layer_decls(),
        curves,
    )?;
    Ok((
        ds,
        Truth {
            model: model.clone(),
            scores: true_scores,
        },
    ))
}

/// Mean squared deviation from the true mean per dimension; estimates the
/// integrated variance for uniformly drawn time points.
pub fn empirical_integrated_variance(ds: &FunDataset, model: &TruthModel) -> Vec<f64> {
    (0..ds.n_dims())
        .map(|d| {
            let (mut s, mut n) = (0.0, 0usize);
            for c in ds.curves() {
                for (&t, &y) in c.points[d].t.iter().zip(&c.points[d].y) {
                    s += (y - model.mean_at(d, &c.covariates, t)).powi(2);
                    n += 1;
                }
            }
            s / n as f64
        })
        .collect()
}

/// Relative error of a scalar estimate.
pub fn rrmse_scalar(truth: f64, est: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::InvalidArgument("relative error with zero truth".into()));
    }
    Ok(((truth - est).powi(2) / (truth * truth)).sqrt())
}

/// Relative error of univariate functions on a common grid; `truth[s]` and
/// `est[s]` hold the values of function `s`.
pub fn urrmse(truth: &[Vec<f64>], est: &[Vec<f64>], grid: &[f64]) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} true and {} estimated functions",
            truth.len(),
            est.len()
        )));
    }
    let w = trapezoid_weights(grid);
    let (mut num, mut den) = (0.0, 0.0);
    for (f, g) in truth.iter().zip(est) {
        if f.len() != w.len() || g.len() != w.len() {
            return Err(Error::DimensionMismatch("function values do not match the grid".into()));
        }
        for i in 0..w.len() {
            num += w[i] * (f[i] - g[i]).powi(2);
            den += w[i] * f[i] * f[i];
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("relative error with zero truth".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative error of multivariate functions under the unweighted product;
/// `truth[s][d]` holds dimension `d` of function `s`.
pub fn mrrmse(truth: &[Vec<Vec<f64>>], est: &[Vec<Vec<f64>>], grid: &[f64]) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} true and {} estimated functions",
            truth.len(),
            est.len()
        )));
    }
    let flat = |v: &[Vec<Vec<f64>>]| -> Result<Vec<Vec<f64>>> {
        let nd = v[0].len();
        if v.iter().any(|f| f.len() != nd) {
            return Err(Error::DimensionMismatch("functions differ in dimension count".into()));
        }
        Ok(v.iter().flat_map(|f| f.iter().cloned()).collect())
    };
    let (t, e) = (flat(truth)?, flat(est)?);
    if t.len() != e.len() {
        return Err(Error::DimensionMismatch(
            "true and estimated functions differ in dimension count".into(),
        ));
    }
    urrmse(&t, &e, grid)
}

/// Flips `est` when its negative is closer to `truth`; ties keep `est`.
pub fn align_sign(est: &[Vec<f64>], truth: &[Vec<f64>], sp: &ScalarProduct) -> Result<Vec<Vec<f64>>> {
    let neg: Vec<Vec<f64>> = est.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let dist = |a: &[Vec<f64>]| -> Result<f64> {
        let diff: Vec<Vec<f64>> = truth
            .iter()
            .zip(a)
            .map(|(t, e)| t.iter().zip(e).map(|(x, y)| x - y).collect())
            .collect();
        weighted_inner(&diff, &diff, sp)
    };
    if dist(&neg)? < dist(est)? {
        Ok(neg)
    } else {
        Ok(est.to_vec())
    }
}

/// Fraction of grid points where `truth` lies inside `value ± z·se`.
pub fn band_coverage(truth: &[f64], value: &[f64], se: &[f64], level: f64) -> Result<f64> {
    if truth.len() != value.len() || truth.len() != se.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch("band and truth lengths differ".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "band level must lie in (0, 1), got {level}"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let inside = (0..truth.len())
        .filter(|&i| (truth[i] - value[i]).abs() <= z * se[i])
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub replicate: usize,
    pub component: String,
    pub measure: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub setting: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<(usize, String)>,
}

fn push(
    rows: &mut Vec<MetricRow>,
    replicate: usize,
    component: impl Into<String>,
    measure: impl Into<String>,
    value: f64,
) {
    rows.push(MetricRow {
        replicate,
        component: component.into(),
        measure: measure.into(),
        value,
    });
}

fn record_functions(
    rows: &mut Vec<MetricRow>,
    replicate: usize,
    component: &str,
    dims: &[String],
    truth: &[Vec<Vec<f64>>],
    est: &[Vec<Vec<f64>>],
    grid: &[f64],
) -> Result<()> {
    push(rows, replicate, component, "mrrmse", mrrmse(truth, est, grid)?);
    for (d, name) in dims.iter().enumerate() {
        let t: Vec<Vec<f64>> = truth.iter().map(|f| f[d].clone()).collect();
        let e: Vec<Vec<f64>> = est.iter().map(|f| f[d].clone()).collect();
        if let Ok(v) = urrmse(&t, &e, grid) {
            push(rows, replicate, component, format!("urrmse:{name}"), v);
        }
    }
    Ok(())
}

/// Metrics of one fitted replicate.
pub fn evaluate_replicate(
    replicate: usize,
    truth: &Truth,
    ds: &FunDataset,
    s1: &StepOne,
    fit: &ModelFit,
    level: f64,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let grid = unit_grid(EVAL_GRID);
    let dims = &ds.dims;
    let nd = dims.len();
    let model = &truth.model;
    let fitted_procs: Vec<&str> = fit
        .bases
        .iter()
        .filter(|b| b.truncation > 0)
        .map(|b| b.process.as_str())
        .collect();

    let mut mu_true = Vec::new();
    let mut mu_est = Vec::new();
    let mut y_true = Vec::new();
    let mut y_est = Vec::new();
    for c in ds.curves() {
        let mt: Vec<Vec<f64>> = (0..nd)
            .map(|d| grid.iter().map(|&t| model.mean_at(d, &c.covariates, t)).collect())
            .collect();
        let me: Vec<Vec<f64>> = (0..nd)
            .map(|d| {
                Ok(fit
                    .predict_mean(d, &ds.covariate_names, &c.covariates, &grid)?
                    .as_slice()
                    .to_vec())
            })
            .collect::<Result<_>>()?;
        let mut yt = mt.clone();
        for (g, ts) in truth.scores.iter().enumerate() {
            let li = ds.layer_index(&ts.process)?;
            let key = &ds.layers[li].levels[c.levels[li]];
            let l = ts
                .levels
                .binary_search(key)
                .map_err(|_| Error::Data(format!("level '{key}' has no true score")))?;
            for (d, v) in yt.iter_mut().enumerate() {
                for (x, r) in v.iter_mut().zip(truth.random_effect(g, l, d, &grid)) {
                    *x += r;
                }
            }
        }
        let mut ye = me.clone();
        for p in &fitted_procs {
            let li = ds.layer_index(p)?;
            let key = &ds.layers[li].levels[c.levels[li]];
            for (d, v) in ye.iter_mut().enumerate() {
                let r = fit.random_effect_curves(p, key, &dims[d], &grid)?;
                for (x, r) in v.iter_mut().zip(r.iter()) {
                    *x += r;
                }
            }
        }
        mu_true.push(mt);
        mu_est.push(me);
        y_true.push(yt);
        y_est.push(ye);
    }
    record_functions(&mut rows, replicate, "y", dims, &y_true, &y_est, &grid)?;
    record_functions(&mut rows, replicate, "mu", dims, &mu_true, &mu_est, &grid)?;

    for (g, ts) in truth.scores.iter().enumerate() {
        let fitted = fitted_procs.contains(&ts.process.as_str());
        let mut t_curves = Vec::new();
        let mut e_curves = Vec::new();
        for (l, key) in ts.levels.iter().enumerate() {
            t_curves.push((0..nd).map(|d| truth.random_effect(g, l, d, &grid)).collect::<Vec<_>>());
            e_curves.push(
                (0..nd)
                    .map(|d| {
                        if fitted {
                            Ok(fit
                                .random_effect_curves(&ts.process, key, &dims[d], &grid)?
                                .as_slice()
                                .to_vec())
                        } else {
                            Ok(vec![0.0; grid.len()])
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        if t_curves.iter().flatten().flatten().any(|x| *x != 0.0) {
            record_functions(&mut rows, replicate, &ts.process, dims, &t_curves, &e_curves, &grid)?;
        }

        let tb = &model.bases[g];
        let eb = s1.bases.iter().find(|b| b.process == ts.process);
        let unit = ScalarProduct::unit(nd, tb.grid.clone())?;
        for m in 0..tb.len() {
            let name = format!("{}:{}", ts.process, m + 1);
            if tb.eigenvalues[m] > 0.0 {
                let est = eb.map_or(0.0, |b| b.eigenvalues.get(m).copied().unwrap_or(0.0));
                push(
                    &mut rows,
                    replicate,
                    &name,
                    "nu_rrmse",
                    rrmse_scalar(tb.eigenvalues[m], est)?,
                );
            }
            let Some(b) = eb.filter(|b| m < b.len() && b.grid.len() == tb.grid.len()) else {
                continue;
            };
            let truth_fn = tb.component(m);
            let est_fn = align_sign(&b.component(m), &truth_fn, &unit)?;
            push(
                &mut rows,
                replicate,
                &name,
                "psi_mrrmse",
                mrrmse(&[truth_fn], &[est_fn], &tb.grid)?,
            );
        }
        push(
            &mut rows,
            replicate,
            &ts.process,
            "fpc",
            eb.map_or(0, |b| b.truncation) as f64,
        );
    }

    for (d, name) in dims.iter().enumerate() {
        if model.setting.sigma2[d] > 0.0 {
            push(
                &mut rows,
                replicate,
                format!("sigma2:{name}"),
                "rrmse",
                rrmse_scalar(model.setting.sigma2[d], s1.covariance.sigma2[d])?,
            );
        }
    }

    for e in &model.setting.mean {
        for (d, name) in dims.iter().enumerate() {
            let (value, se) = fit.effect_estimates(&e.term, name, &grid, None)?;
            let t: Vec<f64> = grid.iter().map(|&x| e.functions[d].eval(x)).collect();
            let cov = band_coverage(&t, value.as_slice(), se.as_slice(), level)?;
            push(&mut rows, replicate, format!("{}:{name}", e.term), "coverage", cov);
        }
    }
    Ok(rows)
}

/// Simulates, fits and scores `replicates` datasets; replicate `i` uses seed
/// `seed + i`. Failed replicates are recorded, not fatal.
pub fn run_replicates(setting: &SimSetting, opts: &FitOptions, level: f64) -> Result<MetricReport> {
    let model = TruthModel::new(setting)?;
    let results: Vec<std::result::Result<Vec<MetricRow>, String>> = (0..setting.replicates)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Vec<MetricRow>> {
                let (ds, truth) = simulate_from(&model, i as u64)?;
                let s1 = step_one(&ds, opts)?;
                let fit = step_two(&ds, opts, &s1)?;
                evaluate_replicate(i, &truth, &ds, &s1, &fit, level)
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let mut report = MetricReport {
        setting: setting.name.clone(),
        seed: setting.seed,
        ..Default::default()
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => {
                log::warn!("replicate {i} failed: {e}");
                report.failures.push((i, e));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
}

impl MetricReport {
    pub fn values(&self, component: &str, measure: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.component == component && r.measure == measure)
            .map(|r| r.value)
            .collect()
    }

    /// `component → measure → summary`.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, MetricSummary>> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.component.clone(), r.measure.clone()))
                .or_default()
                .push(r.value);
        }
        let mut out: BTreeMap<String, BTreeMap<String, MetricSummary>> = BTreeMap::new();
        for ((c, m), v) in groups {
            out.entry(c).or_default().insert(
                m,
                MetricSummary {
                    n: v.len(),
                    median: quantile(&v, 0.5),
                    q25: quantile(&v, 0.25),
                    q75: quantile(&v, 0.75),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                },
            );
        }
        out
    }

    /// Average coverage per effect and dimension.
    pub fn coverage_table(&self) -> BTreeMap<String, f64> {
        self.summary()
            .into_iter()
            .filter_map(|(c, m)| m.get("coverage").map(|s| (c, s.mean)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("replicate,component,measure,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.replicate, r.component, r.measure, r.value));
        }
        s
    }

    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(preamble.as_bytes())
            .and_then(|_| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn summary_json(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "setting": self.setting,
            "seed": self.seed,
            "replicates": self.rows.iter().map(|r| r.replicate).collect::<std::collections::BTreeSet<_>>().len(),
            "failures": self.failures,
            "metrics": self.summary(),
            "coverage": self.coverage_table(),
            "run": extra,
        })
    }
}

fn tf(constant: f64, linear: f64, sin: &[f64], cos: &[f64]) -> TruthFunction {
    TruthFunction {
        constant,
        linear,
        sin: sin.to_vec(),
        cos: cos.to_vec(),
    }
}

fn bivariate_base() -> SimSetting {
    SimSetting {
        name: "setting1-desk".into(),
        dims: vec!["dim1".into(), "dim2".into()],
        design: Design {
            subjects: 9,
            crossed: Some(("word".into(), 16)),
            nested: None,
            reps: 2,
        },
        points: (20, 50),
        shared_times: false,
        covariates: vec![
            CovariateSpec {
                name: "x1".into(),
                source: CovariateSource::Crossed {
                    values: [vec![1.0; 8], vec![0.0; 8]].concat(),
                },
            },
            CovariateSpec {
                name: "x2".into(),
                source: CovariateSource::Crossed { values: vec![1.0, 0.0] },
            },
        ],
        mean: vec![
            EffectTruth {
                term: "intercept".into(),
                covariates: vec![],
                functions: vec![tf(0.2, 0.0, &[0.3], &[0.1]), tf(-0.1, 0.3, &[], &[0.2])],
            },
            EffectTruth {
                term: "x1".into(),
                covariates: vec!["x1".into()],
                functions: vec![tf(0.1, 0.0, &[0.15], &[]), tf(-0.05, 0.0, &[], &[0.1])],
            },
            EffectTruth {
                term: "x2".into(),
                covariates: vec!["x2".into()],
                functions: vec![tf(0.0, 0.2, &[], &[]), tf(0.0, 0.0, &[-0.1], &[])],
            },
        ],
        processes: vec![
            ProcessTruth {
                process: "subject".into(),
                eigenvalues: vec![0.018, 0.009, 0.004],
                basis_seed: 11,
            },
            ProcessTruth {
                process: CURVE_LAYER.into(),
                eigenvalues: vec![0.060, 0.017, 0.012, 0.007, 0.003],
                basis_seed: 12,
            },
        ],
        sigma2: vec![0.004, 0.014],
        weights: WeightKind::Unit,
        scores: ScoreMode::CenteredDecorrelated,
        penalty_order: 3,
        seed: 20240101,
        replicates: 50,
    }
}

pub const PRESETS: [&str; 6] = [
    "setting1-desk",
    "setting2",
    "setting3",
    "setting4",
    "setting5",
    "setting6",
];

/// Desk-scale versions of the benchmark data settings.
pub fn preset(name: &str) -> Result<SimSetting> {
    let mut s = bivariate_base();
    s.name = name.to_string();
    match name {
        "setting1-desk" => {}
        "setting2" => s.sigma2 = vec![s.sigma2[0], 16.0 * s.sigma2[0]],
        "setting3" => s.points = (3, 10),
        "setting4" => s.scores = ScoreMode::RawIid,
        "setting5" => {
            s.weights = WeightKind::InverseVariance;
            let scale = 1.0 / (s.sigma2.iter().sum::<f64>() / s.sigma2.len() as f64);
            for p in &mut s.processes {
                p.eigenvalues.iter_mut().for_each(|v| *v *= scale);
            }
        }
        "setting6" => {
            let dims: Vec<String> = (1..=6).map(|d| format!("dim{d}")).collect();
            let f = |k: usize, a: f64| {
                tf(
                    0.1 * a * ((k % 3) as f64 - 1.0),
                    0.0,
                    &[a * 0.3],
                    &[a * 0.1 * (k as f64 - 2.5)],
                )
            };
            let term = |name: &str, covs: &[&str], a: f64| EffectTruth {
                term: name.into(),
                covariates: covs.iter().map(|c| c.to_string()).collect(),
                functions: (0..6).map(|k| f(k, a)).collect(),
            };
            s = SimSetting {
                name: name.into(),
                dims,
                design: Design {
                    subjects: 25,
                    crossed: None,
                    nested: Some(("session".into(), 2)),
                    reps: 2,
                },
                points: (10, 50),
                shared_times: true,
                covariates: vec![
                    CovariateSpec {
                        name: "skill".into(),
                        source: CovariateSource::Subject { p: 0.5 },
                    },
                    CovariateSpec {
                        name: "group".into(),
                        source: CovariateSource::Subject { p: 0.5 },
                    },
                    CovariateSpec {
                        name: "session".into(),
                        source: CovariateSource::Nested,
                    },
                ],
                mean: vec![
                    term("intercept", &[], 1.0),
                    term("skill", &["skill"], 0.4),
                    term("group", &["group"], 0.3),
                    term("session", &["session"], 0.3),
                    term("skill_session", &["skill", "session"], 0.2),
                ],
                processes: vec![
                    ProcessTruth {
                        process: "subject".into(),
                        eigenvalues: [15.0, 9.0, 4.0, 2.5, 1.5, 1.0].iter().map(|v| v * 1e-3).collect(),
                        basis_seed: 21,
                    },
                    ProcessTruth {
                        process: "session".into(),
                        eigenvalues: [28.0, 6.0, 4.0, 2.0, 1.0].iter().map(|v| v * 1e-3).collect(),
                        basis_seed: 22,
                    },
                    ProcessTruth {
                        process: CURVE_LAYER.into(),
                        eigenvalues: [7.0, 3.0, 2.0, 1.2, 0.8].iter().map(|v| v * 1e-3).collect(),
                        basis_seed: 23,
                    },
                ],
                sigma2: vec![7e-3 / 6.0; 6],
                weights: WeightKind::Unit,
                scores: ScoreMode::CenteredDecorrelated,
                penalty_order: 1,
                seed: 20240106,
                replicates: 50,
            };
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimSetting {
        let mut s = preset("setting1-desk").unwrap();
        s.design.subjects = 5;
        s.design.reps = 1;
        s
    }

    #[test]
    fn truth_basis_is_orthonormal() {
        for w in [vec![1.0, 1.0], vec![250.0, 70.0]] {
            let sp = ScalarProduct::new(w, unit_grid(BASIS_GRID)).unwrap();
            let b = truth_basis("p", &["a".into(), "b".into()], &[3.0, 2.0, 1.0, 0.5, 0.2], &sp, 4).unwrap();
            for m in 0..5 {
                for n in 0..5 {
                    let ip = weighted_inner(&b.component(m), &b.component(n), &sp).unwrap();
                    let want = if m == n { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-10, "{m} {n} {ip}");
                }
            }
        }
    }

    #[test]
    fn centered_scores_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = DMatrix::from_fn(9, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nu = [0.018, 0.009, 0.004];
        let z = centered_decorrelated(&raw, &nu).unwrap();
        for j in 0..3 {
            assert!(z.column(j).mean().abs() < 1e-12);
        }
        let cov = z.transpose() * &z / 8.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { nu[i] } else { 0.0 };
                assert!((cov[(i, j)] - want).abs() < 1e-12);
            }
        }
        assert!(centered_decorrelated(&DMatrix::zeros(3, 3), &nu).is_err());
    }

    #[test]
    fn noiseless_draw_equals_mean() {
        let mut s = small();
        s.sigma2 = vec![0.0, 0.0];
        for p in &mut s.processes {
            p.eigenvalues.iter_mut().for_each(|v| *v = 0.0);
        }
        let (ds, truth) = simulate(&s, 0).unwrap();
        for c in ds.curves() {
            for d in 0..2 {
                for (&t, &y) in c.points[d].t.iter().zip(&c.points[d].y) {
                    assert_eq!(y, truth.model.mean_at(d, &c.covariates, t));
                }
            }
        }
    }

    #[test]
    fn setting_one_shape_and_reproducibility() {
        let mut s = preset("setting1-desk").unwrap();
        s.design.reps = 5;
        assert_eq!(s.n_curves(), 720);
        let (ds, truth) = simulate(&s, 3).unwrap();
        assert_eq!(ds.n_curves(), 720);
        for c in ds.curves() {
            for p in &c.points {
                assert!(p.len() <= 50 && p.len() >= 19);
            }
        }
        assert_eq!(truth.scores[0].levels.len(), 9);
        assert_eq!(truth.scores[1].levels.len(), 720);
        let (again, _) = simulate(&s, 3).unwrap();
        assert_eq!(ds, again);
        let (other, _) = simulate(&s, 4).unwrap();
        assert_ne!(ds, other);
    }

    #[test]
    fn nested_preset_builds() {
        let mut s = preset("setting6").unwrap();
        s.design.subjects = 8;
        let (ds, truth) = simulate(&s, 0).unwrap();
        assert_eq!(ds.n_curves(), 32);
        assert_eq!(ds.n_dims(), 6);
        let session = &truth.scores[1];
        assert_eq!(session.levels.len(), 16);
        assert!(session.levels[0].contains('/'));
        for c in ds.curves() {
            assert!(c.points.iter().all(|p| p.t == c.points[0].t));
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(preset("setting7").is_err());
        for p in PRESETS {
            preset(p).unwrap().check().unwrap();
        }
    }

    #[test]
    fn scalar_and_functional_errors() {
        assert_eq!(rrmse_scalar(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(rrmse_scalar(2.0, 2.0).unwrap(), 0.0);
        assert!(rrmse_scalar(0.0, 1.0).is_err());
        let grid = vec![0.0, 0.5, 1.0];
        // Trapezoid by hand: ‖(1,1,1)‖² = 1, ‖(0,1,2)‖² = 0.25·0 + 0.5·1 + 0.25·4 = 1.5.
        let truth = vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]];
        let est = vec![vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]];
        let v = urrmse(&truth, &est, &grid).unwrap();
        assert!((v - (1.5f64 / 2.5).sqrt()).abs() < 1e-15);
        let m_truth = vec![vec![truth[0].clone(), truth[1].clone()]];
        let m_zero = vec![vec![vec![0.0; 3], vec![0.0; 3]]];
        assert_eq!(mrrmse(&m_truth, &m_truth, &grid).unwrap(), 0.0);
        assert_eq!(mrrmse(&m_truth, &m_zero, &grid).unwrap(), 1.0);
    }

    #[test]
    fn sign_alignment() {
        let sp = ScalarProduct::unit(1, vec![0.0, 0.5, 1.0]).unwrap();
        let t = vec![vec![1.0, 2.0, 3.0]];
        let neg = vec![vec![-1.0, -2.0, -3.0]];
        assert_eq!(align_sign(&neg, &t, &sp).unwrap(), t);
        assert_eq!(align_sign(&t, &t, &sp).unwrap(), t);
        let orth = vec![vec![0.0, 0.0, 0.0]];
        assert_eq!(align_sign(&orth, &t, &sp).unwrap(), orth);
    }

    #[test]
    fn coverage_extremes() {
        let t = vec![1.0, 2.0, 3.0];
        let v = vec![1.5, 2.5, 3.5];
        assert_eq!(band_coverage(&t, &v, &[f64::INFINITY; 3], 0.95).unwrap(), 1.0);
        assert_eq!(band_coverage(&t, &v, &[0.0; 3], 0.95).unwrap(), 0.0);
        assert!(band_coverage(&t, &v, &[0.0; 2], 0.95).is_err());
    }

    #[test]
    fn replicate_pipeline_runs() {
        let mut s = small();
        s.replicates = 1;
        let opts = s.true_model_options();
        let report = run_replicates(&s, &opts, 0.95).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert!(report.rows.iter().all(|r| r.value.is_finite() && r.value >= 0.0));
        assert!(!report.values("mu", "mrrmse").is_empty());
        assert_eq!(report.values("intercept:dim1", "coverage").len(), 1);
        let csv = report.to_csv();
        assert!(csv.starts_with("replicate,component,measure,value\n"));
    }

    proptest::proptest! {
        #[test]
        fn mrrmse_scale_invariant(seed in 0u64..1000, c in proptest::prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = unit_grid(7);
            let mut draw = || (0..3).map(|_| (0..2).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).collect::<Vec<Vec<Vec<f64>>>>();
            let (t, e) = (draw(), draw());
            let scale = |v: &Vec<Vec<Vec<f64>>>| v.iter().map(|f| f.iter().map(|x| x.iter().map(|y| c * y).collect()).collect()).collect::<Vec<Vec<Vec<f64>>>>();
            let a = mrrmse(&t, &e, &grid).unwrap();
            let b = mrrmse(&scale(&t), &scale(&e), &grid).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
