//! Greedy coarsening of densely sampled planar trajectories.
//!
//! Interior points are removed one at a time, always the one closest to the
//! segment joining its current neighbours, until a size or loss criterion
//! stops the process.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundata::{CurveInput, DimPoints, FunDataset, PointTable};

/// Ordered sample of a planar curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    t: Vec<f64>,
    y: Vec<[f64; 2]>,
}

impl Polyline {
    pub fn new(t: Vec<f64>, y: Vec<[f64; 2]>) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} times for {} points",
                t.len(),
                y.len()
            )));
        }
        if t.len() < 2 {
            return Err(Error::InvalidArgument("a polyline needs at least 2 points".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "polyline times must be strictly increasing".into(),
            ));
        }
        Ok(Polyline { t, y })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.y
    }

    /// Squared distances at or below this level are rounding noise.
    pub fn noise_floor(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &self.y {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let scale = (hi[0] - lo[0]).hypot(hi[1] - lo[1]).max(hi[0].abs().max(hi[1].abs()));
        (16.0 * f64::EPSILON * scale).powi(2)
    }

    /// Distance of point `i` to the segment between points `a` and `b`, with
    /// rounding noise snapped to zero.
    pub fn removal_loss(&self, i: usize, a: usize, b: usize, floor: f64) -> f64 {
        let d = point_segment_sqdist(self.y[i], self.y[a], self.y[b]);
        if d <= floor {
            0.0
        } else {
            d
        }
    }
}

/// Squared distance from `p` to the segment `[a, b]`.
pub fn point_segment_sqdist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let yp = [p[0] - a[0], p[1] - a[1]];
    let yplus = [b[0] - a[0], b[1] - a[1]];
    let norm2 = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
    let len = norm2(yplus).sqrt();
    if len == 0.0 {
        return norm2(yp);
    }
    let u = [yplus[0] / len, yplus[1] / len];
    let proj = yp[0] * u[0] + yp[1] * u[1];
    if proj <= 0.0 {
        norm2(yp)
    } else if proj <= len {
        norm2([yp[0] - proj * u[0], yp[1] - proj * u[1]])
    } else {
        norm2([yp[0] - yplus[0], yp[1] - yplus[1]])
    }
}

/// Mean squared distance of the interior points to the chord joining the
/// first and last point.
pub fn mean_reference_loss(pl: &Polyline) -> Result<f64> {
    let n = pl.len();
    if n < 3 {
        return Err(Error::InvalidArgument("reference loss needs at least 3 points".into()));
    }
    let floor = pl.noise_floor();
    Ok((1..n - 1).map(|i| pl.removal_loss(i, 0, n - 1, floor)).sum::<f64>() / (n - 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Remove points until this many remain.
    TargetSize(usize),
    /// Commit a removal only while the relative cumulative loss stays below.
    Relative(f64),
    /// Commit a removal only while the cumulative loss stays below.
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsenResult {
    /// Kept indices, increasing; always includes the first and last.
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    /// Loss of each committed removal.
    pub losses: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Cumulative loss relative to the reference loss (0 when that is 0).
    pub relative: Vec<f64>,
    pub reference: f64,
}

fn key(loss: f64, idx: usize) -> (u64, usize) {
    // Losses are non-negative, so the bit pattern orders like the value.
    (loss.to_bits(), idx)
}

/// Greedy coarsening with neighbour-only loss updates.
pub fn coarsen(pl: &Polyline, stop: StopRule) -> Result<CoarsenResult> {
    let n = pl.len();
    match stop {
        StopRule::TargetSize(k) if k < 2 || k > n => {
            return Err(Error::Config(format!(
                "target size {k} is infeasible for {n} points (must be in [2, {n}])"
            )))
        }
        StopRule::Relative(r) | StopRule::Absolute(r) if !(r >= 0.0) => {
            return Err(Error::Config(format!("threshold must be non-negative, got {r}")))
        }
        _ => {}
    }
    let reference = if n >= 3 { mean_reference_loss(pl)? } else { 0.0 };
    let mut prev: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
    let mut next: Vec<usize> = (0..n).map(|i| (i + 1).min(n - 1)).collect();
    let floor = pl.noise_floor();
    let mut loss = vec![0.0; n];
    let mut queue = BTreeSet::new();
    for i in 1..n.saturating_sub(1) {
        loss[i] = pl.removal_loss(i, i - 1, i + 1, floor);
        queue.insert(key(loss[i], i));
    }
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut out = CoarsenResult {
        kept: Vec::new(),
        removed: Vec::new(),
        losses: Vec::new(),
        cumulative: Vec::new(),
        relative: Vec::new(),
        reference,
    };
    let mut s = 0.0;
    while let Some(&(bits, i)) = queue.first() {
        let d = f64::from_bits(bits);
        let s_new = s + d;
        let r_new = if reference > 0.0 { s_new / reference } else { 0.0 };
        let commit = match stop {
            StopRule::TargetSize(k) => remaining > k,
            StopRule::Relative(r) => r_new < r || (reference == 0.0 && r > 0.0),
            StopRule::Absolute(a) => s_new < a,
        };
        if !commit {
            break;
        }
        queue.pop_first();
        alive[i] = false;
        remaining -= 1;
        s = s_new;
        out.removed.push(i);
        out.losses.push(d);
        out.cumulative.push(s);
        out.relative.push(r_new);
        let (p, q) = (prev[i], next[i]);
        next[p] = q;
        prev[q] = p;
        for j in [p, q] {
            if j == 0 || j == n - 1 {
                continue;
            }
            queue.remove(&key(loss[j], j));
            loss[j] = pl.removal_loss(j, prev[j], next[j], floor);
            queue.insert(key(loss[j], j));
        }
    }
    out.kept = (0..n).filter(|&i| alive[i]).collect();
    Ok(out)
}

/// Coarsens one curve on dimensions `lead` and drops the removed time points
/// from every dimension.
pub fn coarsen_curve(
    id: &str,
    points: &mut [DimPoints],
    lead: (usize, usize),
    stop: StopRule,
) -> Result<CoarsenResult> {
    let (px, py) = (&points[lead.0], &points[lead.1]);
    if px.t != py.t {
        return Err(Error::Data(format!(
            "curve '{id}': the lead dimensions are observed at different times"
        )));
    }
    if px.len() < 3 {
        return Ok(CoarsenResult {
            kept: (0..px.len()).collect(),
            removed: vec![],
            losses: vec![],
            cumulative: vec![],
            relative: vec![],
            reference: 0.0,
        });
    }
    let pl = Polyline::new(px.t.clone(), px.y.iter().zip(&py.y).map(|(a, b)| [*a, *b]).collect())?;
    let res = coarsen(&pl, stop)?;
    let dropped: Vec<f64> = res.removed.iter().map(|&i| pl.t[i]).collect();
    for p in points.iter_mut() {
        let keep: Vec<bool> =
            p.t.iter()
                .map(|t| !dropped.iter().any(|r| (r - t).abs() < 1e-12))
                .collect();
        let mut k = keep.iter();
        p.t.retain(|_| *k.next().expect("mask"));
        let mut k = keep.iter();
        p.y.retain(|_| *k.next().expect("mask"));
    }
    Ok(res)
}

fn lead_indices(dims: &[String], lead: [&str; 2]) -> Result<(usize, usize)> {
    let find = |name: &str| {
        dims.iter().position(|d| d == name).ok_or_else(|| Error::Unknown {
            kind: "dimension",
            name: name.to_string(),
        })
    };
    let (a, b) = (find(lead[0])?, find(lead[1])?);
    if a == b {
        return Err(Error::Config("the two lead dimensions must differ".into()));
    }
    Ok((a, b))
}

/// Coarsens every curve of a point table in place.
pub fn coarsen_table(table: &mut PointTable, lead: [&str; 2], stop: StopRule) -> Result<Vec<CoarsenResult>> {
    let li = lead_indices(&table.dims, lead)?;
    table
        .curves
        .par_iter_mut()
        .map(|(id, points)| coarsen_curve(id, points, li, stop))
        .collect()
}

/// Coarsens each curve of a dataset on a lead pair of dimensions.
pub fn coarsen_dataset(ds: &FunDataset, lead: [&str; 2], stop: StopRule) -> Result<(FunDataset, Vec<CoarsenResult>)> {
    let li = lead_indices(&ds.dims, lead)?;
    let mut inputs: Vec<CurveInput> = ds.to_inputs();
    let results = inputs
        .par_iter_mut()
        .map(|c| coarsen_curve(&c.id, &mut c.points, li, stop))
        .collect::<Result<Vec<_>>>()?;
    Ok((ds.with_curves(inputs)?, results))
}
