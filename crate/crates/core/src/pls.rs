//! Penalized weighted least squares with automatic smoothing-parameter
//! selection.
//!
//! The solver works on sufficient statistics ([`Gram`]). One grouped block
//! (a block whose columns are replicated per group level, such as curve-level
//! random effects) can be kept in block-diagonal form and eliminated through a
//! Schur complement, which keeps large random-effect designs cheap.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{chol_logdet, cholesky_strict, sym_eigen_desc};

/// A penalty matrix attached to a design block. Blocks may carry several
/// penalties; penalties with the same `group` share one smoothing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerm {
    pub matrix: DMatrix<f64>,
    pub group: String,
}

impl PenaltyTerm {
    pub fn new(matrix: DMatrix<f64>, group: impl Into<String>) -> Self {
        PenaltyTerm {
            matrix,
            group: group.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockDesign {
    Dense(DMatrix<f64>),
    /// Row `i` places `values.row(i)` in the columns of level `level[i]`;
    /// columns are ordered level-major (`level * width + k`). Penalties on a
    /// grouped block are `width x width` and apply to every level.
    Grouped {
        level: Vec<usize>,
        n_levels: usize,
        values: DMatrix<f64>,
    },
}

impl BlockDesign {
    pub fn nrows(&self) -> usize {
        match self {
            BlockDesign::Dense(m) => m.nrows(),
            BlockDesign::Grouped { values, .. } => values.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            BlockDesign::Dense(m) => m.ncols(),
            BlockDesign::Grouped { n_levels, values, .. } => n_levels * values.ncols(),
        }
    }

    fn penalty_dim(&self) -> usize {
        match self {
            BlockDesign::Dense(m) => m.ncols(),
            BlockDesign::Grouped { values, .. } => values.ncols(),
        }
    }

    /// Dense equivalent of the block.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            BlockDesign::Dense(m) => m.clone(),
            BlockDesign::Grouped {
                level,
                n_levels,
                values,
            } => {
                let w = values.ncols();
                let mut out = DMatrix::zeros(values.nrows(), n_levels * w);
                for (i, &v) in level.iter().enumerate() {
                    for k in 0..w {
                        out[(i, v * w + k)] = values[(i, k)];
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub name: String,
    pub design: BlockDesign,
    pub penalties: Vec<PenaltyTerm>,
}

impl DesignBlock {
    pub fn dense(name: impl Into<String>, design: DMatrix<f64>, penalties: Vec<PenaltyTerm>) -> Self {
        DesignBlock {
            name: name.into(),
            design: BlockDesign::Dense(design),
            penalties,
        }
    }

    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }
}

/// Weighted penalized regression problem in explicit design form.
#[derive(Debug, Clone)]
pub struct PlsProblem {
    pub response: DVector<f64>,
    pub weights: DVector<f64>,
    pub blocks: Vec<DesignBlock>,
}

impl PlsProblem {
    pub fn new(response: DVector<f64>, weights: DVector<f64>, blocks: Vec<DesignBlock>) -> Result<Self> {
        let n = response.len();
        if weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {n} observations",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(
                "observation weights must be positive and finite".into(),
            ));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("empty design".into()));
        }
        for b in &blocks {
            if b.design.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "block '{}' has {} rows, response has {n}",
                    b.name,
                    b.design.nrows()
                )));
            }
            let dim = b.design.penalty_dim();
            for p in &b.penalties {
                if p.matrix.nrows() != dim || p.matrix.ncols() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "penalty '{}' on block '{}' is {}x{}, expected {dim}x{dim}",
                        p.group,
                        b.name,
                        p.matrix.nrows(),
                        p.matrix.ncols()
                    )));
                }
            }
            if let BlockDesign::Grouped { level, n_levels, .. } = &b.design {
                if level.len() != n || level.iter().any(|&v| v >= *n_levels) {
                    return Err(Error::DimensionMismatch(format!(
                        "block '{}': invalid level index",
                        b.name
                    )));
                }
            }
        }
        Ok(PlsProblem {
            response,
            weights,
            blocks,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn n_coef(&self) -> usize {
        self.blocks.iter().map(DesignBlock::ncols).sum()
    }

    /// Full dense design matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs(), self.n_coef());
        let mut off = 0;
        for b in &self.blocks {
            let d = b.design.to_dense();
            x.view_mut((0, off), (d.nrows(), d.ncols())).copy_from(&d);
            off += d.ncols();
        }
        x
    }

    /// Total penalty matrix `Σ λ_k P_k` in full coefficient coordinates.
    pub fn penalty_matrix(&self, lambda: &BTreeMap<String, f64>) -> Result<DMatrix<f64>> {
        let p = self.n_coef();
        let mut s = DMatrix::zeros(p, p);
        let mut off = 0;
        for b in &self.blocks {
            for pen in &b.penalties {
                let l = *lambda.get(&pen.group).ok_or_else(|| missing_lambda(&pen.group))?;
                let full = match &b.design {
                    BlockDesign::Dense(_) => pen.matrix.clone(),
                    BlockDesign::Grouped { n_levels, .. } => {
                        DMatrix::<f64>::identity(*n_levels, *n_levels).kronecker(&pen.matrix)
                    }
                };
                let mut v = s.view_mut((off, off), (full.nrows(), full.ncols()));
                v += full * l;
            }
            off += b.ncols();
        }
        Ok(s)
    }

    /// `X θ` computed block by block.
    pub fn fitted(&self, coef: &DVector<f64>) -> Result<DVector<f64>> {
        if coef.len() != self.n_coef() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} design columns",
                coef.len(),
                self.n_coef()
            )));
        }
        let mut out = DVector::zeros(self.n_obs());
        let mut off = 0;
        for b in &self.blocks {
            match &b.design {
                BlockDesign::Dense(m) => {
                    out += m * coef.rows(off, m.ncols());
                }
                BlockDesign::Grouped { level, values, .. } => {
                    let w = values.ncols();
                    for (i, &v) in level.iter().enumerate() {
                        let c = coef.rows(off + v * w, w);
                        out[i] += values.row(i).transpose().dot(&c);
                    }
                }
            }
            off += b.ncols();
        }
        Ok(out)
    }

    pub fn gram(&self) -> Result<Gram> {
        Gram::from_problem(self)
    }
}

fn missing_lambda(group: &str) -> Error {
    Error::InvalidArgument(format!("no smoothing parameter for penalty group '{group}'"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Place {
    Dense { offset: usize },
    Eliminated,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    name: String,
    offset: usize,
    ncols: usize,
    place: Place,
}

#[derive(Debug, Clone)]
struct EliminatedBlock {
    block: usize,
    width: usize,
    a0: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct PenaltyEntry {
    block: usize,
    matrix: DMatrix<f64>,
    group: String,
}

/// Sufficient statistics of a weighted penalized regression.
#[derive(Debug, Clone)]
pub struct Gram {
    n_obs: f64,
    yty: f64,
    layout: Vec<BlockLayout>,
    p: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    elim: Option<EliminatedBlock>,
    penalties: Vec<PenaltyEntry>,
    block_rank: Vec<usize>,
}

/// A block description for [`Gram::from_dense`].
#[derive(Debug, Clone)]
pub struct GramBlock {
    pub name: String,
    pub ncols: usize,
    pub penalties: Vec<PenaltyTerm>,
}

impl Gram {
    /// Builds a Gram from precomputed dense crossproducts `XᵀWX`, `XᵀWy`,
    /// `yᵀWy` and the (possibly frequency-weighted) observation count.
    pub fn from_dense(
        blocks: Vec<GramBlock>,
        xtx: DMatrix<f64>,
        xty: DVector<f64>,
        yty: f64,
        n_obs: f64,
    ) -> Result<Self> {
        let p: usize = blocks.iter().map(|b| b.ncols).sum();
        if xtx.nrows() != p || xtx.ncols() != p || xty.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "crossproducts sized {}x{} / {} for {p} columns",
                xtx.nrows(),
                xtx.ncols(),
                xty.len()
            )));
        }
        let mut layout = Vec::new();
        let mut penalties = Vec::new();
        let mut off = 0;
        for (j, b) in blocks.into_iter().enumerate() {
            for pen in b.penalties {
                if pen.matrix.nrows() != b.ncols || pen.matrix.ncols() != b.ncols {
                    return Err(Error::DimensionMismatch(format!(
                        "penalty '{}' on block '{}'",
                        pen.group, b.name
                    )));
                }
                penalties.push(PenaltyEntry {
                    block: j,
                    matrix: pen.matrix,
                    group: pen.group,
                });
            }
            layout.push(BlockLayout {
                name: b.name,
                offset: off,
                ncols: b.ncols,
                place: Place::Dense { offset: off },
            });
            off += b.ncols;
        }
        let mut g = Gram {
            n_obs,
            yty,
            layout,
            p,
            xtx,
            xty,
            elim: None,
            penalties,
            block_rank: Vec::new(),
        };
        g.block_rank = g.compute_block_ranks();
        Ok(g)
    }

    pub fn from_problem(problem: &PlsProblem) -> Result<Self> {
        let n = problem.n_obs();
        let w = &problem.weights;
        let y = &problem.response;

        // Keep the widest grouped block in block-diagonal form.
        let elim_block = problem
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(&b.design, BlockDesign::Grouped { n_levels, .. } if *n_levels > 1))
            .max_by_key(|(j, b)| (b.ncols(), std::cmp::Reverse(*j)))
            .map(|(j, _)| j);

        let mut layout = Vec::new();
        let mut penalties = Vec::new();
        let mut dense_cols = 0;
        let mut off = 0;
        for (j, b) in problem.blocks.iter().enumerate() {
            let place = if Some(j) == elim_block {
                Place::Eliminated
            } else {
                let pl = Place::Dense { offset: dense_cols };
                dense_cols += b.ncols();
                pl
            };
            for pen in &b.penalties {
                let matrix = match (&b.design, place) {
                    (BlockDesign::Grouped { n_levels, .. }, Place::Dense { .. }) => {
                        DMatrix::<f64>::identity(*n_levels, *n_levels).kronecker(&pen.matrix)
                    }
                    _ => pen.matrix.clone(),
                };
                penalties.push(PenaltyEntry {
                    block: j,
                    matrix,
                    group: pen.group.clone(),
                });
            }
            layout.push(BlockLayout {
                name: b.name.clone(),
                offset: off,
                ncols: b.ncols(),
                place,
            });
            off += b.ncols();
        }

        let mut xd = DMatrix::zeros(n, dense_cols);
        for (b, l) in problem.blocks.iter().zip(&layout) {
            if let Place::Dense { offset } = l.place {
                let d = b.design.to_dense();
                xd.view_mut((0, offset), (n, d.ncols())).copy_from(&d);
            }
        }
        let sw = w.map(f64::sqrt);
        let mut xw = xd.clone();
        for (i, s) in sw.iter().enumerate() {
            xw.row_mut(i).scale_mut(*s);
        }
        let yw = y.component_mul(&sw);
        let xtx = xw.tr_mul(&xw);
        let xty = xw.tr_mul(&yw);
        let yty = yw.dot(&yw);

        let elim = elim_block.map(|j| {
            let (level, n_levels, values) = match &problem.blocks[j].design {
                BlockDesign::Grouped {
                    level,
                    n_levels,
                    values,
                } => (level, *n_levels, values),
                BlockDesign::Dense(_) => unreachable!("eliminated block is grouped"),
            };
            let width = values.ncols();
            let mut a0 = vec![DMatrix::zeros(width, width); n_levels];
            let mut c = vec![DMatrix::zeros(width, dense_cols); n_levels];
            let mut b = vec![DVector::zeros(width); n_levels];
            for i in 0..n {
                let v = level[i];
                let r = values.row(i).transpose() * sw[i];
                a0[v] += &r * r.transpose();
                c[v] += &r * xw.row(i);
                b[v] += &r * yw[i];
            }
            EliminatedBlock {
                block: j,
                width,
                a0,
                c,
                b,
            }
        });

        let mut g = Gram {
            n_obs: n as f64,
            yty,
            layout,
            p: problem.n_coef(),
            xtx,
            xty,
            elim,
            penalties,
            block_rank: Vec::new(),
        };
        g.block_rank = g.compute_block_ranks();
        Ok(g)
    }

    pub fn n_coef(&self) -> usize {
        self.p
    }

    pub fn n_obs(&self) -> f64 {
        self.n_obs
    }

    /// Sorted smoothing-parameter group ids.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.penalties.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    fn p_dense(&self) -> usize {
        self.xtx.nrows()
    }

    fn dense_offset(&self, block: usize) -> Option<usize> {
        match self.layout[block].place {
            Place::Dense { offset } => Some(offset),
            Place::Eliminated => None,
        }
    }

    /// Structural rank of each block's summed penalty (per level for the
    /// eliminated block).
    fn compute_block_ranks(&self) -> Vec<usize> {
        (0..self.layout.len())
            .map(|j| {
                let mats: Vec<&DMatrix<f64>> = self
                    .penalties
                    .iter()
                    .filter(|p| p.block == j)
                    .map(|p| &p.matrix)
                    .collect();
                if mats.is_empty() {
                    return 0;
                }
                let dim = mats[0].nrows();
                let mut s = DMatrix::zeros(dim, dim);
                for m in mats {
                    let tr = m.trace();
                    if tr > 0.0 {
                        s += m / tr;
                    }
                }
                crate::numeric::psd_rank(&s, 1e-10)
            })
            .collect()
    }

    /// Per-group scale `trace(block Gram) / trace(penalty)`, used to centre the
    /// smoothing-parameter grid.
    pub fn lambda_scales(&self) -> BTreeMap<String, f64> {
        let mut num: BTreeMap<String, f64> = BTreeMap::new();
        let mut den: BTreeMap<String, f64> = BTreeMap::new();
        for pen in &self.penalties {
            let (gram_tr, pen_tr) = match self.dense_offset(pen.block) {
                Some(off) => {
                    let k = self.layout[pen.block].ncols;
                    let tr: f64 = (off..off + k).map(|i| self.xtx[(i, i)]).sum();
                    (tr, pen.matrix.trace())
                }
                None => {
                    let e = self.elim.as_ref().expect("eliminated block");
                    let tr: f64 = e.a0.iter().map(|a| a.trace()).sum();
                    (tr, pen.matrix.trace() * e.a0.len() as f64)
                }
            };
            *num.entry(pen.group.clone()).or_default() += gram_tr;
            *den.entry(pen.group.clone()).or_default() += pen_tr;
        }
        num.into_iter()
            .map(|(g, n)| {
                let d = den[&g];
                let s = if d > 0.0 && n > 0.0 { n / d } else { 1.0 };
                (g, s)
            })
            .collect()
    }

    fn lambda_for(&self, lambda: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let groups = self.groups();
        for g in lambda.keys() {
            if !groups.contains(g) {
                return Err(Error::InvalidArgument(format!("unknown penalty group '{g}'")));
            }
        }
        self.penalties
            .iter()
            .map(|p| {
                let l = *lambda.get(&p.group).ok_or_else(|| missing_lambda(&p.group))?;
                if !(l.is_finite() && l >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "smoothing parameter for '{}' must be finite and non-negative, got {l}",
                        p.group
                    )));
                }
                Ok(l)
            })
            .collect()
    }

    fn solve(&self, lambda: &BTreeMap<String, f64>, want_cov: bool) -> Result<Solution> {
        let lam = self.lambda_for(lambda)?;
        let pd = self.p_dense();

        let mut s_dd = DMatrix::zeros(pd, pd);
        let width = self.elim.as_ref().map_or(0, |e| e.width);
        let mut s_e = DMatrix::zeros(width, width);
        for (pen, &l) in self.penalties.iter().zip(&lam) {
            match self.dense_offset(pen.block) {
                Some(off) => {
                    let k = pen.matrix.nrows();
                    let mut v = s_dd.view_mut((off, off), (k, k));
                    v += &pen.matrix * l;
                }
                None => s_e += &pen.matrix * l,
            }
        }

        let mut r = &self.xtx + &s_dd;
        let mut rhs = self.xty.clone();
        let mut log_det_h = 0.0;
        let mut tr_hinv_s = 0.0;
        let mut q = s_dd.clone();
        let mut a_inv = Vec::new();
        let mut gs = Vec::new();
        if let Some(e) = &self.elim {
            a_inv.reserve(e.a0.len());
            gs.reserve(e.a0.len());
            for v in 0..e.a0.len() {
                let a = &e.a0[v] + &s_e;
                let ch = cholesky_strict(&a, "random-effect block")?;
                log_det_h += chol_logdet(&ch);
                let ai = ch.inverse();
                let g = &ai * &e.c[v];
                r -= e.c[v].tr_mul(&g);
                rhs -= g.tr_mul(&e.b[v]);
                tr_hinv_s += (&ai * &s_e).trace();
                q += g.tr_mul(&(&s_e * &g));
                a_inv.push(ai);
                gs.push(g);
            }
        }
        let r = 0.5 * (&r + r.transpose());
        let r_chol = cholesky_strict(&r, "penalized normal equations")?;
        log_det_h += chol_logdet(&r_chol);
        let theta_d = r_chol.solve(&rhs);
        tr_hinv_s += r_chol.solve(&q).trace();

        let mut coef = DVector::zeros(self.p);
        let mut xty_full = DVector::zeros(self.p);
        let mut pen = theta_d.dot(&(&s_dd * &theta_d));
        for (j, l) in self.layout.iter().enumerate() {
            match l.place {
                Place::Dense { offset } => {
                    coef.rows_mut(l.offset, l.ncols)
                        .copy_from(&theta_d.rows(offset, l.ncols));
                    xty_full
                        .rows_mut(l.offset, l.ncols)
                        .copy_from(&self.xty.rows(offset, l.ncols));
                }
                Place::Eliminated => {
                    let e = self.elim.as_ref().expect("eliminated block");
                    debug_assert_eq!(e.block, j);
                    for v in 0..e.a0.len() {
                        let tv = &a_inv[v] * &e.b[v] - &gs[v] * &theta_d;
                        pen += tv.dot(&(&s_e * &tv));
                        coef.rows_mut(l.offset + v * e.width, e.width).copy_from(&tv);
                        xty_full.rows_mut(l.offset + v * e.width, e.width).copy_from(&e.b[v]);
                    }
                }
            }
        }
        let dev_pen = (self.yty - coef.dot(&xty_full)).max(0.0);
        let rss = (dev_pen - pen).max(0.0);
        let edf = self.p as f64 - tr_hinv_s;

        // log|S|_+ per block.
        let mut log_det_s = 0.0;
        let mut rank_total = 0;
        for (j, l) in self.layout.iter().enumerate() {
            let rank = self.block_rank[j];
            if rank == 0 {
                continue;
            }
            let (s_block, reps) = match l.place {
                Place::Dense { offset } => (s_dd.view((offset, offset), (l.ncols, l.ncols)).into_owned(), 1),
                Place::Eliminated => (s_e.clone(), self.elim.as_ref().map_or(1, |e| e.a0.len())),
            };
            let (vals, _) = sym_eigen_desc(&s_block);
            let ld: f64 = vals.iter().take(rank).map(|v| v.max(f64::MIN_POSITIVE).ln()).sum();
            log_det_s += ld * reps as f64;
            rank_total += rank * reps;
        }

        let cov = if want_cov {
            Some(CovarianceParts {
                r_inv: r_chol.inverse(),
                a_inv,
                g: gs,
            })
        } else {
            None
        };
        Ok(Solution {
            coef,
            rss,
            dev_pen,
            edf,
            log_det_h,
            log_det_s,
            null_dim: self.p - rank_total,
            cov,
        })
    }

    fn criterion_value(&self, sol: &Solution, criterion: Criterion) -> f64 {
        let n = self.n_obs;
        match criterion {
            Criterion::Gcv => {
                let denom = n - sol.edf;
                if denom <= 0.0 {
                    f64::INFINITY
                } else {
                    n * sol.rss / (denom * denom)
                }
            }
            Criterion::Reml => {
                let dof = n - sol.null_dim as f64;
                if dof <= 0.0 {
                    return f64::INFINITY;
                }
                let dp = sol.dev_pen.max(f64::MIN_POSITIVE);
                dof * (1.0 + (2.0 * std::f64::consts::PI * dp / dof).ln()) + sol.log_det_h - sol.log_det_s
            }
        }
    }

    fn evaluate(&self, lambda: &BTreeMap<String, f64>, criterion: Criterion) -> f64 {
        match self.solve(lambda, false) {
            Ok(sol) => {
                let v = self.criterion_value(&sol, criterion);
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn finish(&self, lambda: BTreeMap<String, f64>, criterion: Option<(Criterion, f64)>) -> Result<PlsFit> {
        let sol = self.solve(&lambda, true)?;
        let resid_df = self.n_obs - sol.edf;
        let scale = if resid_df > 1e-8 { sol.rss / resid_df } else { 0.0 };
        let parts = sol.cov.expect("covariance requested");
        let mut full_to_dense = vec![None; self.p];
        let mut elim_offset = None;
        for l in &self.layout {
            match l.place {
                Place::Dense { offset } => {
                    for k in 0..l.ncols {
                        full_to_dense[l.offset + k] = Some(offset + k);
                    }
                }
                Place::Eliminated => elim_offset = Some(l.offset),
            }
        }
        let covariance = CoefCovariance {
            scale,
            p: self.p,
            full_to_dense,
            elim_offset,
            width: self.elim.as_ref().map_or(0, |e| e.width),
            r_inv: parts.r_inv,
            a_inv: parts.a_inv,
            g: parts.g,
        };
        Ok(PlsFit {
            coefficients: sol.coef,
            lambda,
            covariance,
            edf: sol.edf,
            scale,
            rss: sol.rss,
            n_obs: self.n_obs,
            criterion,
            blocks: self
                .layout
                .iter()
                .map(|l| BlockRange {
                    name: l.name.clone(),
                    offset: l.offset,
                    ncols: l.ncols,
                })
                .collect(),
        })
    }

    pub fn solve_fixed(&self, lambda: &BTreeMap<String, f64>) -> Result<PlsFit> {
        self.finish(lambda.clone(), None)
    }

    /// Coefficients only, skipping the covariance.
    pub fn solve_coefficients(&self, lambda: &BTreeMap<String, f64>) -> Result<DVector<f64>> {
        Ok(self.solve(lambda, false)?.coef)
    }

    /// Minimizes `criterion` over the smoothing parameters: a log-spaced grid
    /// per group followed by golden-section refinement, swept coordinate-wise
    /// until the criterion stabilizes.
    pub fn select(&self, criterion: Criterion, search: &LambdaSearch) -> Result<PlsFit> {
        search.check()?;
        let groups = self.groups();
        if groups.is_empty() {
            let v = self.evaluate(&BTreeMap::new(), criterion);
            return self.finish(BTreeMap::new(), Some((criterion, v)));
        }
        let scales = self.lambda_scales();
        let (lo, hi) = (search.lower.log10(), search.upper.log10());
        let grid: Vec<f64> = crate::numeric::unit_grid(search.grid_points)
            .into_iter()
            .map(|u| lo + u * (hi - lo))
            .collect();
        let step = if grid.len() > 1 { grid[1] - grid[0] } else { hi - lo };

        let mut pos: BTreeMap<String, f64> = groups.iter().map(|g| (g.clone(), 0.0f64.clamp(lo, hi))).collect();
        let to_lambda = |pos: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
            pos.iter()
                .map(|(g, u)| (g.clone(), scales[g] * 10f64.powf(*u)))
                .collect()
        };
        let mut best = self.evaluate(&to_lambda(&pos), criterion);

        for sweep in 0..search.max_sweeps {
            let before = best;
            for g in &groups {
                let mut eval_at = |u: f64| {
                    let mut trial = pos.clone();
                    trial.insert(g.clone(), u);
                    self.evaluate(&to_lambda(&trial), criterion)
                };
                let mut cand_u = pos[g];
                let mut cand_v = best;
                for &u in &grid {
                    let v = eval_at(u);
                    if v < cand_v {
                        cand_u = u;
                        cand_v = v;
                    }
                }
                let (a, b) = ((cand_u - step).max(lo), (cand_u + step).min(hi));
                if b > a {
                    let (u, v) = golden_section(&mut eval_at, a, b, search.refine_tol);
                    if v < cand_v {
                        cand_u = u;
                        cand_v = v;
                    }
                }
                if cand_v < best {
                    best = cand_v;
                    pos.insert(g.clone(), cand_u);
                }
            }
            if !best.is_finite() {
                return Err(Error::Numeric(
                    "smoothing criterion is non-finite at every grid point".into(),
                ));
            }
            let change = (before - best).abs();
            log::trace!("lambda sweep {sweep}: criterion {best:.6e}");
            if groups.len() == 1 || (before.is_finite() && change < search.tol * best.abs().max(1.0)) {
                break;
            }
        }
        self.finish(to_lambda(&pos), Some((criterion, best)))
    }

    /// Checks that the unpenalized part of the dense design is identifiable:
    /// the crossproduct restricted to the joint penalty null space must have
    /// full rank.
    pub fn check_identifiability(&self) -> Result<()> {
        let pd = self.p_dense();
        if pd == 0 {
            return Ok(());
        }
        let mut s = DMatrix::zeros(pd, pd);
        for pen in &self.penalties {
            if let Some(off) = self.dense_offset(pen.block) {
                let tr = pen.matrix.trace();
                if tr > 0.0 {
                    let k = pen.matrix.nrows();
                    let mut v = s.view_mut((off, off), (k, k));
                    v += &pen.matrix / tr;
                }
            }
        }
        let (vals, vecs) = sym_eigen_desc(&s);
        let top = vals.first().copied().unwrap_or(0.0).max(0.0);
        let null: Vec<usize> = (0..pd).filter(|&i| vals[i] <= 1e-10 * top.max(1e-300)).collect();
        if null.is_empty() {
            return Ok(());
        }
        let n = DMatrix::from_fn(pd, null.len(), |i, j| vecs[(i, null[j])]);
        let m = n.tr_mul(&(&self.xtx * &n));
        let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
        let dmax = d.iter().cloned().fold(0.0, f64::max);
        if d.iter().any(|&x| x <= 1e-12 * dmax.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient(
                "an unpenalized direction has no support in the data".into(),
            ));
        }
        let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
        let (ev, _) = sym_eigen_desc(&scaled);
        let lo = *ev.last().expect("non-empty");
        if lo <= 1e-9 * ev[0] {
            return Err(Error::RankDeficient(format!(
                "unpenalized design columns are collinear (condition {:.2e})",
                ev[0] / lo.max(f64::MIN_POSITIVE)
            )));
        }
        Ok(())
    }
}

fn golden_section<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

struct CovarianceParts {
    r_inv: DMatrix<f64>,
    a_inv: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
}

struct Solution {
    coef: DVector<f64>,
    rss: f64,
    dev_pen: f64,
    edf: f64,
    log_det_h: f64,
    log_det_s: f64,
    null_dim: usize,
    cov: Option<CovarianceParts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Gcv,
    #[serde(alias = "reml-profile")]
    Reml,
}

/// Smoothing-parameter search settings. Grid bounds are multiplied by a
/// per-group scale (see [`Gram::lambda_scales`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSearch {
    pub lower: f64,
    pub upper: f64,
    pub grid_points: usize,
    pub tol: f64,
    pub refine_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        LambdaSearch {
            lower: 1e-4,
            upper: 1e6,
            grid_points: 11,
            tol: 1e-6,
            refine_tol: 1e-3,
            max_sweeps: 30,
        }
    }
}

impl LambdaSearch {
    pub fn check(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.upper >= self.lower && self.upper.is_finite()) {
            return Err(Error::Config(format!(
                "lambda grid bounds must satisfy 0 < lower <= upper (got {}, {})",
                self.lower, self.upper
            )));
        }
        if self.grid_points == 0 || self.max_sweeps == 0 || self.refine_tol <= 0.0 {
            return Err(Error::Config(
                "lambda search needs grid points, sweeps and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRange {
    pub name: String,
    pub offset: usize,
    pub ncols: usize,
}

/// Posterior coefficient covariance `scale · (XᵀWX + S)⁻¹`, stored in
/// factored form so that large random-effect blocks need not be expanded.
#[derive(Debug, Clone)]
pub struct CoefCovariance {
    pub scale: f64,
    p: usize,
    full_to_dense: Vec<Option<usize>>,
    elim_offset: Option<usize>,
    width: usize,
    r_inv: DMatrix<f64>,
    a_inv: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
}

impl CoefCovariance {
    pub fn dim(&self) -> usize {
        self.p
    }

    /// Variance of the linear combination `xᵀθ`.
    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "row of length {} for {} coefficients",
                x.len(),
                self.p
            )));
        }
        let pd = self.r_inv.nrows();
        let mut u = DVector::zeros(pd);
        for (i, &xi) in x.iter().enumerate() {
            if let Some(j) = self.full_to_dense[i] {
                u[j] += xi;
            }
        }
        let mut acc = 0.0;
        if let Some(off) = self.elim_offset {
            let w = self.width;
            for (v, (ai, g)) in self.a_inv.iter().zip(&self.g).enumerate() {
                let xs = &x[off + v * w..off + (v + 1) * w];
                if xs.iter().all(|&z| z == 0.0) {
                    continue;
                }
                let xv = DVector::from_column_slice(xs);
                u -= g.tr_mul(&xv);
                acc += xv.dot(&(ai * &xv));
            }
        }
        acc += u.dot(&(&self.r_inv * &u));
        Ok(self.scale * acc.max(0.0))
    }

    /// Fully expanded covariance matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.p);
        let dense: Vec<(usize, usize)> = self
            .full_to_dense
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|d| (i, d)))
            .collect();
        for &(i, di) in &dense {
            for &(j, dj) in &dense {
                out[(i, j)] = self.r_inv[(di, dj)];
            }
        }
        if let Some(off) = self.elim_offset {
            let w = self.width;
            let rg: Vec<DMatrix<f64>> = self.g.iter().map(|g| &self.r_inv * g.transpose()).collect();
            for v in 0..self.g.len() {
                for &(i, di) in &dense {
                    for k in 0..w {
                        let val = -rg[v][(di, k)];
                        out[(i, off + v * w + k)] = val;
                        out[(off + v * w + k, i)] = val;
                    }
                }
                for u in 0..self.g.len() {
                    let mut blk = &self.g[v] * &rg[u];
                    if u == v {
                        blk += &self.a_inv[v];
                    }
                    out.view_mut((off + v * w, off + u * w), (w, w)).copy_from(&blk);
                }
            }
        }
        out * self.scale
    }
}

#[derive(Debug, Clone)]
pub struct PlsFit {
    pub coefficients: DVector<f64>,
    pub lambda: BTreeMap<String, f64>,
    pub covariance: CoefCovariance,
    pub edf: f64,
    pub scale: f64,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub n_obs: f64,
    pub criterion: Option<(Criterion, f64)>,
    pub blocks: Vec<BlockRange>,
}

impl PlsFit {
    pub fn block(&self, name: &str) -> Result<&BlockRange> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "design block",
                name: name.to_string(),
            })
    }

    pub fn block_coefficients(&self, name: &str) -> Result<DVector<f64>> {
        let b = self.block(name)?;
        Ok(self.coefficients.rows(b.offset, b.ncols).into_owned())
    }
}

pub fn solve_fixed_lambda(problem: &PlsProblem, lambda: &BTreeMap<String, f64>) -> Result<PlsFit> {
    problem.gram()?.solve_fixed(lambda)
}

pub fn select_lambda(problem: &PlsProblem, criterion: Criterion, search: &LambdaSearch) -> Result<PlsFit> {
    let gram = problem.gram()?;
    if gram.groups().is_empty() {
        return Err(Error::InvalidArgument(
            "smoothing selection needs at least one penalized block".into(),
        ));
    }
    gram.select(criterion, search)
}

/// Pointwise standard errors `sqrt(diag(X V Xᵀ))` for the rows of `design`.
pub fn pointwise_se(fit: &PlsFit, design: &DMatrix<f64>) -> Result<DVector<f64>> {
    if design.ncols() != fit.covariance.dim() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, fit has {} coefficients",
            design.ncols(),
            fit.covariance.dim()
        )));
    }
    let mut out = DVector::zeros(design.nrows());
    let mut row = vec![0.0; design.ncols()];
    for i in 0..design.nrows() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = design[(i, j)];
        }
        out[i] = fit.covariance.variance(&row)?.sqrt();
    }
    Ok(out)
}
