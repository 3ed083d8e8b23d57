//! Spectral operators on parameter matrices: SVD, nuclear norm, singular
//! value soft-thresholding and numeric rank.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Thin SVD `X = U diag(S) Vᵀ` with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m × r`, orthonormal columns
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    /// `N × r`, orthonormal columns
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) Vᵀ`; an empty factorization reconstructs to zeros.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.transpose()
    }

    /// Keeps the first `k` triplets.
    pub fn truncate(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank());
        SvdFactors {
            u: self.u.columns(0, k).into_owned(),
            s: self.s.rows(0, k).into_owned(),
            v: self.v.columns(0, k).into_owned(),
        }
    }
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("matrix contains non-finite entries");
    }
    Ok(())
}

/// Full thin SVD.
pub fn svd(x: &DMatrix<f64>) -> Result<SvdFactors> {
    check_finite(x)?;
    let (m, n) = x.shape();
    let r = m.min(n);
    if r == 0 {
        return Ok(SvdFactors {
            u: DMatrix::zeros(m, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(n, 0),
        });
    }
    let dec = x.clone().svd(true, true);
    let u = dec
        .u
        .ok_or_else(|| Error::Internal("SVD returned no U".into()))?;
    let vt = dec
        .v_t
        .ok_or_else(|| Error::Internal("SVD returned no Vᵀ".into()))?;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let mut su = DMatrix::zeros(m, r);
    let mut sv = DMatrix::zeros(n, r);
    let mut ss = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &vt.row(src).transpose());
        ss[dst] = dec.singular_values[src].max(0.0);
    }
    Ok(SvdFactors {
        u: su,
        s: ss,
        v: sv,
    })
}

/// Sum of singular values.
pub fn nuclear_norm(x: &DMatrix<f64>) -> Result<f64> {
    Ok(svd(x)?.s.sum())
}

/// `D_α(X) = U (S - α)_+ Vᵀ`, the proximal map of `α‖·‖_*`. A singular
/// value equal to `α` maps to zero.
pub fn soft_threshold(x: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return invalid(format!(
            "threshold must be finite and non-negative, got {alpha}"
        ));
    }
    let f = svd(x)?;
    Ok(shrink_factors(&f, alpha).reconstruct())
}

fn shrink_factors(f: &SvdFactors, alpha: f64) -> SvdFactors {
    let keep = f.s.iter().take_while(|&&s| s > alpha).count();
    let mut out = f.truncate(keep);
    out.s.apply(|s| *s -= alpha);
    out
}

/// Number of singular values strictly above `threshold`.
pub fn numeric_rank(x: &DMatrix<f64>, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return invalid(format!("rank threshold must be positive, got {threshold}"));
    }
    Ok(svd(x)?.s.iter().filter(|&&s| s > threshold).count())
}

/// Leading singular triplets of a matrix, `k` at a time.
pub trait PartialSvd {
    /// The `k` largest singular triplets (fewer if the matrix is smaller).
    fn leading(&mut self, k: usize) -> Result<SvdFactors>;
    fn max_rank(&self) -> usize;
}

/// Dense backend: one full decomposition, sliced on request.
pub struct DenseSvd<'a> {
    x: &'a DMatrix<f64>,
    full: Option<SvdFactors>,
}

impl<'a> DenseSvd<'a> {
    pub fn new(x: &'a DMatrix<f64>) -> Self {
        DenseSvd { x, full: None }
    }
}

impl PartialSvd for DenseSvd<'_> {
    fn leading(&mut self, k: usize) -> Result<SvdFactors> {
        if self.full.is_none() {
            self.full = Some(svd(self.x)?);
        }
        Ok(self.full.as_ref().unwrap().truncate(k))
    }

    fn max_rank(&self) -> usize {
        self.x.nrows().min(self.x.ncols())
    }
}

/// Triplets above a cut, found by requesting `start` values and growing
/// the request by `step` while the smallest returned value still exceeds
/// the cut.
#[derive(Debug, Clone)]
pub struct LadderSvd {
    pub factors: SvdFactors,
    /// Number of partial decompositions requested.
    pub rounds: usize,
}

pub fn rank_ladder_svd(x: &DMatrix<f64>, cut: f64, start: usize, step: usize) -> Result<LadderSvd> {
    check_finite(x)?;
    rank_ladder_with(&mut DenseSvd::new(x), cut, start, step)
}

pub fn rank_ladder_with<B: PartialSvd>(
    backend: &mut B,
    cut: f64,
    start: usize,
    step: usize,
) -> Result<LadderSvd> {
    if !(cut > 0.0) {
        return invalid(format!("cut must be positive, got {cut}"));
    }
    if start == 0 || step == 0 {
        return invalid("ladder start and step must be positive");
    }
    let max_rank = backend.max_rank();
    let mut want = start.min(max_rank);
    let mut rounds = 0;
    loop {
        rounds += 1;
        let f = backend.leading(want)?;
        let smallest_above = f.s.iter().last().is_some_and(|&s| s > cut);
        if smallest_above && want < max_rank {
            want = (want + step).min(max_rank);
            continue;
        }
        let keep = f.s.iter().take_while(|&&s| s > cut).count();
        return Ok(LadderSvd {
            factors: f.truncate(keep),
            rounds,
        });
    }
}

/// Result of a proximal nuclear-norm step.
#[derive(Debug, Clone)]
pub struct Shrunk {
    pub matrix: DMatrix<f64>,
    /// Shrunk singular values (all positive).
    pub singular_values: DVector<f64>,
}

impl Shrunk {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.sum()
    }
}

/// Soft-thresholding through the rank ladder: only triplets above `alpha`
/// are ever materialized.
pub(crate) fn shrink(x: &DMatrix<f64>, alpha: f64) -> Result<Shrunk> {
    let (m, n) = x.shape();
    if alpha <= 0.0 {
        let f = svd(x)?;
        return Ok(Shrunk {
            matrix: x.clone(),
            singular_values: f
                .s
                .iter()
                .copied()
                .filter(|&s| s > 0.0)
                .collect::<Vec<_>>()
                .into(),
        });
    }
    let ladder = rank_ladder_svd(x, alpha, 5, 5)?;
    let f = shrink_factors(&ladder.factors, alpha);
    let matrix = if f.rank() == 0 {
        DMatrix::zeros(m, n)
    } else {
        f.reconstruct()
    };
    Ok(Shrunk {
        matrix,
        singular_values: f.s,
    })
}
