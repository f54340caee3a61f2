//! Fixed-effect formulas and per-dimension working-independence mean fits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bspline_design, kron, row_tensor, SplineSpec};
use crate::error::{Error, Result};
use crate::fundata::FunDataset;
use crate::numeric::sym_eigen_desc;
use crate::pls::{Criterion, DesignBlock, Gram, LambdaSearch, PenaltyTerm, PlsFit, PlsProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TermKind {
    /// Functional intercept `f(t)`.
    Intercept,
    /// `x · β(t)` for a scalar covariate.
    Linear { covariate: String },
    /// Smooth surface `f(x, t)`, centred over the observed covariate values.
    Smooth { covariate: String, x_basis: SplineSpec },
    /// Product of 0/1 dummies times `β(t)`.
    Interaction { covariates: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    #[serde(flatten)]
    pub kind: TermKind,
    pub t_basis: SplineSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedFormula {
    pub terms: Vec<Term>,
}

impl FixedFormula {
    pub fn intercept_only(t_basis: SplineSpec) -> Self {
        FixedFormula {
            terms: vec![Term {
                name: "intercept".into(),
                kind: TermKind::Intercept,
                t_basis,
            }],
        }
    }

    pub fn with_linear(mut self, name: &str, covariate: &str, t_basis: SplineSpec) -> Self {
        self.terms.push(Term {
            name: name.into(),
            kind: TermKind::Linear {
                covariate: covariate.into(),
            },
            t_basis,
        });
        self
    }

    pub fn with_interaction(mut self, name: &str, covariates: &[&str], t_basis: SplineSpec) -> Self {
        self.terms.push(Term {
            name: name.into(),
            kind: TermKind::Interaction {
                covariates: covariates.iter().map(|s| s.to_string()).collect(),
            },
            t_basis,
        });
        self
    }

    pub fn term_index(&self, name: &str) -> Result<usize> {
        self.terms
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "term",
                name: name.to_string(),
            })
    }

    fn check_structure(&self) -> Result<()> {
        let n_int = self.terms.iter().filter(|t| t.kind == TermKind::Intercept).count();
        if n_int != 1 {
            return Err(Error::Config(format!(
                "formula needs exactly one functional intercept, found {n_int}"
            )));
        }
        let mut names: Vec<&str> = self.terms.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.terms.len() {
            return Err(Error::Config("formula term names must be unique".into()));
        }
        for t in &self.terms {
            t.t_basis.check()?;
            if let TermKind::Smooth { x_basis, .. } = &t.kind {
                x_basis.check()?;
            }
        }
        Ok(())
    }
}

/// A term resolved against a dataset: covariate positions, covariate scaling
/// and the sum-to-zero reparameterization of smooth covariate effects.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTerm {
    pub term: Term,
    covariates: Vec<String>,
    x_range: Option<(f64, f64)>,
    constraint: Option<DMatrix<f64>>,
}

impl BoundTerm {
    pub fn ncols(&self) -> usize {
        let nt = self.term.t_basis.num_basis;
        match &self.constraint {
            Some(z) => z.ncols() * nt,
            None => nt,
        }
    }

    /// Design rows for points `t` of curves with covariate rows `cov` (one per
    /// point, in the order of the term's covariates).
    fn design(&self, cov: &[Vec<f64>], t: &[f64]) -> Result<DMatrix<f64>> {
        let phi_t = bspline_design(&self.term.t_basis, t)?;
        match &self.term.kind {
            TermKind::Intercept => Ok(phi_t),
            TermKind::Linear { .. } | TermKind::Interaction { .. } => {
                let mut out = phi_t;
                for (i, c) in cov.iter().enumerate() {
                    let m: f64 = c.iter().product();
                    out.row_mut(i).scale_mut(m);
                }
                Ok(out)
            }
            TermKind::Smooth { x_basis, .. } => {
                let (lo, hi) = self.x_range.expect("bound smooth term");
                let xs: Vec<f64> = cov.iter().map(|c| scale_unit(c[0], lo, hi)).collect();
                let phi_x = bspline_design(x_basis, &xs)? * self.constraint.as_ref().expect("constraint");
                row_tensor(&phi_x, &phi_t)
            }
        }
    }

    fn penalties(&self, prefix: &str) -> Result<Vec<PenaltyTerm>> {
        let pt = self.term.t_basis.penalty()?.matrix;
        let name = &self.term.name;
        match (&self.term.kind, &self.constraint) {
            (TermKind::Smooth { x_basis, .. }, Some(z)) => {
                let px = z.transpose() * x_basis.penalty()?.matrix * z;
                let ix = DMatrix::<f64>::identity(z.ncols(), z.ncols());
                let it = DMatrix::<f64>::identity(pt.nrows(), pt.nrows());
                Ok(vec![
                    PenaltyTerm::new(kron(&px, &it), format!("{prefix}{name}:x")),
                    PenaltyTerm::new(kron(&ix, &pt), format!("{prefix}{name}:t")),
                ])
            }
            _ => Ok(vec![PenaltyTerm::new(pt, format!("{prefix}{name}:t"))]),
        }
    }
}

fn scale_unit(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

/// A formula bound to the covariates of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundFormula {
    pub formula: FixedFormula,
    pub terms: Vec<BoundTerm>,
}

impl BoundFormula {
    pub fn bind(formula: &FixedFormula, ds: &FunDataset) -> Result<Self> {
        formula.check_structure()?;
        let mut terms = Vec::new();
        for term in &formula.terms {
            let covariates: Vec<String> = match &term.kind {
                TermKind::Intercept => vec![],
                TermKind::Linear { covariate } | TermKind::Smooth { covariate, .. } => vec![covariate.clone()],
                TermKind::Interaction { covariates } => covariates.clone(),
            };
            let idx: Vec<usize> = covariates
                .iter()
                .map(|c| ds.covariate_index(c))
                .collect::<Result<_>>()?;
            if let TermKind::Interaction { .. } = term.kind {
                for c in ds.curves() {
                    for &j in &idx {
                        let v = c.covariates[j];
                        if v != 0.0 && v != 1.0 {
                            return Err(Error::Data(format!(
                                "interaction covariate '{}' must be coded 0/1 (curve '{}' has {v})",
                                ds.covariate_names[j], c.id
                            )));
                        }
                    }
                }
            }
            let (x_range, constraint) = match &term.kind {
                TermKind::Smooth { x_basis, .. } => {
                    let vals: Vec<f64> = ds.curves().iter().map(|c| c.covariates[idx[0]]).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let xs: Vec<f64> = vals.iter().map(|&x| scale_unit(x, lo, hi)).collect();
                    let phi = bspline_design(x_basis, &xs)?;
                    (Some((lo, hi)), Some(sum_to_zero_basis(&phi)))
                }
                _ => (None, None),
            };
            terms.push(BoundTerm {
                term: term.clone(),
                covariates,
                x_range,
                constraint,
            });
        }
        Ok(BoundFormula {
            formula: formula.clone(),
            terms,
        })
    }

    pub fn ncols(&self) -> usize {
        self.terms.iter().map(BoundTerm::ncols).sum()
    }

    /// Covariate rows for every curve of `ds`, per term.
    fn covariate_rows(&self, ds: &FunDataset) -> Result<Vec<Vec<Vec<f64>>>> {
        self.terms
            .iter()
            .map(|bt| {
                let idx: Vec<usize> = bt
                    .covariates
                    .iter()
                    .map(|c| ds.covariate_index(c))
                    .collect::<Result<_>>()?;
                Ok(ds
                    .curves()
                    .iter()
                    .map(|c| idx.iter().map(|&j| c.covariates[j]).collect())
                    .collect())
            })
            .collect()
    }

    /// One dense design block per term for the observations `(curve, t)` of
    /// `ds` listed in `rows`. Block and penalty names carry `prefix`.
    pub fn blocks(&self, ds: &FunDataset, rows: &[(usize, f64)], prefix: &str) -> Result<Vec<DesignBlock>> {
        let cov = self.covariate_rows(ds)?;
        let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
        self.terms
            .iter()
            .zip(&cov)
            .map(|(bt, cv)| {
                let per_row: Vec<Vec<f64>> = rows.iter().map(|r| cv[r.0].clone()).collect();
                Ok(DesignBlock::dense(
                    format!("{prefix}{}", bt.term.name),
                    bt.design(&per_row, &t)?,
                    bt.penalties(prefix)?,
                ))
            })
            .collect()
    }

    /// Design of the effect of term `j` on `grid`. Linear and interaction
    /// terms give their coefficient function; smooth terms need `x`.
    pub fn effect_design(&self, j: usize, grid: &[f64], x: Option<f64>) -> Result<DMatrix<f64>> {
        let bt = &self.terms[j];
        let cov: Vec<Vec<f64>> = match &bt.term.kind {
            TermKind::Smooth { .. } => {
                let x = x.ok_or_else(|| {
                    Error::InvalidArgument(format!("smooth term '{}' needs a covariate value", bt.term.name))
                })?;
                vec![vec![x]; grid.len()]
            }
            _ => vec![vec![1.0; bt.covariates.len()]; grid.len()],
        };
        bt.design(&cov, grid)
    }

    /// Full-width design (all terms) for one curve's covariates at `t`.
    pub fn curve_design(&self, covariate_names: &[String], covariates: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(t.len(), self.ncols());
        let mut off = 0;
        for bt in &self.terms {
            let vals: Vec<f64> = bt
                .covariates
                .iter()
                .map(|c| {
                    covariate_names
                        .iter()
                        .position(|n| n == c)
                        .map(|j| covariates[j])
                        .ok_or_else(|| Error::Unknown {
                            kind: "covariate",
                            name: c.clone(),
                        })
                })
                .collect::<Result<_>>()?;
            let d = bt.design(&vec![vals; t.len()], t)?;
            out.view_mut((0, off), (t.len(), d.ncols())).copy_from(&d);
            off += d.ncols();
        }
        Ok(out)
    }

    pub fn term_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.terms
            .iter()
            .map(|t| {
                let o = off;
                off += t.ncols();
                o
            })
            .collect()
    }
}

/// Orthonormal basis of the null space of the column sums of `phi`, used to
/// centre a smooth covariate effect.
fn sum_to_zero_basis(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let c = phi.row_sum().transpose();
    let k = c.len();
    let proj = DMatrix::<f64>::identity(k, k) - &c * c.transpose() / c.norm_squared();
    let (vals, vecs) = sym_eigen_desc(&proj);
    let keep: Vec<usize> = (0..k).filter(|&i| vals[i] > 0.5).collect();
    DMatrix::from_fn(k, keep.len(), |i, j| vecs[(i, keep[j])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingOptions {
    pub criterion: Criterion,
    pub search: LambdaSearch,
}

impl Default for SmoothingOptions {
    fn default() -> Self {
        SmoothingOptions {
            criterion: Criterion::Gcv,
            search: LambdaSearch::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanFit {
    pub formula: BoundFormula,
    pub dims: Vec<String>,
    pub fits: Vec<PlsFit>,
}

/// Observations of dimension `d` as `(curve, t)` pairs plus responses.
pub(crate) fn dim_rows(ds: &FunDataset, d: usize) -> (Vec<(usize, f64)>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, c) in ds.curves().iter().enumerate() {
        for (&t, &v) in c.points[d].t.iter().zip(&c.points[d].y) {
            rows.push((i, t));
            y.push(v);
        }
    }
    (rows, y)
}

/// Fits each dimension's mean separately under working independence.
pub fn fit_univariate_means(ds: &FunDataset, formula: &FixedFormula, opts: &SmoothingOptions) -> Result<MeanFit> {
    let bound = BoundFormula::bind(formula, ds)?;
    let fits = (0..ds.n_dims())
        .into_par_iter()
        .map(|d| {
            let (rows, y) = dim_rows(ds, d);
            if rows.is_empty() {
                return Err(Error::Data(format!("dimension '{}' has no observations", ds.dims[d])));
            }
            let blocks = bound.blocks(ds, &rows, "")?;
            let n = y.len();
            let problem = PlsProblem::new(DVector::from_vec(y), DVector::from_element(n, 1.0), blocks)?;
            let gram = Gram::from_problem(&problem)?;
            gram.check_identifiability().map_err(|e| match e {
                Error::RankDeficient(m) => Error::RankDeficient(format!("dimension '{}': {m}", ds.dims[d])),
                other => other,
            })?;
            gram.select(opts.criterion, &opts.search)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanFit {
        formula: bound,
        dims: ds.dims.clone(),
        fits,
    })
}

impl MeanFit {
    /// Mean of dimension `d` for a curve with the given covariates at `t`.
    pub fn predict(&self, d: usize, covariate_names: &[String], covariates: &[f64], t: &[f64]) -> Result<DVector<f64>> {
        let x = self.formula.curve_design(covariate_names, covariates, t)?;
        Ok(x * &self.fits[d].coefficients)
    }

    fn dim_map(&self, ds: &FunDataset) -> Result<Vec<usize>> {
        ds.dims
            .iter()
            .map(|name| {
                self.dims.iter().position(|d| d == name).ok_or_else(|| Error::Unknown {
                    kind: "dimension",
                    name: name.clone(),
                })
            })
            .collect()
    }

    /// Fitted mean at every observation of `ds`, in dataset order.
    pub fn fitted(&self, ds: &FunDataset) -> Result<Vec<Vec<DVector<f64>>>> {
        let map = self.dim_map(ds)?;
        ds.curves()
            .iter()
            .map(|c| {
                c.points
                    .iter()
                    .enumerate()
                    .map(|(d, p)| self.predict(map[d], &ds.covariate_names, &c.covariates, &p.t))
                    .collect()
            })
            .collect()
    }
}

/// Residuals `y − μ̂(x, t)` with the same structure as `ds`.
pub fn center(ds: &FunDataset, m: &MeanFit) -> Result<FunDataset> {
    let fitted = m.fitted(ds)?;
    let mut out = ds.to_inputs();
    for (ci, c) in out.iter_mut().enumerate() {
        for (d, p) in c.points.iter_mut().enumerate() {
            for (k, y) in p.y.iter_mut().enumerate() {
                *y -= fitted[ci][d][k];
            }
        }
    }
    ds.with_curves(out)
}
