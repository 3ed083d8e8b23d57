//! Instance domain, random trigonometric basis and quadrature grids.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Upper bound on the node count of a tensor grid.
pub const DEFAULT_MAX_GRID_NODES: usize = 1 << 22;

/// Axis-aligned box `X = [lo, hi]` holding all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr")]
pub struct Domain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Deserialize)]
struct DomainRepr {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<DomainRepr> for Domain {
    type Error = Error;
    fn try_from(r: DomainRepr) -> Result<Self> {
        Domain::new(r.lo, r.hi)
    }
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return invalid(format!(
                "domain bounds must be non-empty and equal length (got {} and {})",
                lo.len(),
                hi.len()
            ));
        }
        for (j, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return invalid(format!("axis {j}: need finite lo < hi, got [{l}, {h}]"));
            }
        }
        let d = Domain { lo, hi };
        let v = d.volume();
        if !(v.is_finite() && v > 0.0) {
            return invalid(format!("domain volume {v} is not finite and positive"));
        }
        Ok(d)
    }

    /// The cube `[-half_width, half_width]^d`.
    pub fn cube(d: usize, half_width: f64) -> Result<Self> {
        Domain::new(vec![-half_width; d], vec![half_width; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }
}

/// Bounding box of the rows of `instances`, widened by `margin` times the
/// axis range on each side. Constant axes are widened by `margin` in
/// absolute units, never less than `1e-6`.
pub fn domain_from_data(instances: &DMatrix<f64>, margin: f64) -> Result<Domain> {
    if instances.nrows() == 0 || instances.ncols() == 0 {
        return invalid("cannot build a domain from an empty instance set");
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return invalid(format!(
            "margin must be a finite non-negative number, got {margin}"
        ));
    }
    let d = instances.ncols();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for col in instances.column_iter() {
        let mn = col.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(mn.is_finite() && mx.is_finite()) {
            return invalid("instances contain non-finite values");
        }
        let range = mx - mn;
        let pad = if range > 0.0 {
            margin * range
        } else {
            margin.max(1e-6)
        };
        lo.push(mn - pad);
        hi.push(mx + pad);
    }
    Domain::new(lo, hi)
}

/// A feature map `φ: R^d -> R^m` evaluated on quadrature nodes and instances.
pub trait FeatureMap {
    fn input_dim(&self) -> usize;
    fn num_features(&self) -> usize;
    /// Writes `φ(x)` into `out` (length `num_features`).
    fn eval_into(&self, x: &[f64], out: &mut [f64]);
    /// Identifies the map; densities built on different maps are not comparable.
    fn fingerprint(&self) -> u64;
}

/// The shared random trigonometric basis: for each frequency row `g_k`,
/// features `sin(g_k·x)` and `cos(g_k·x)` stored as adjacent entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    d: usize,
    m: usize,
    seed: u64,
    /// `(m/2) × d`
    freqs: DMatrix<f64>,
}

impl BasisSpec {
    /// Draws `m/2` frequency rows i.i.d. from `N(0, I_d)`.
    pub fn new(d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return invalid("instance dimension d must be at least 1");
        }
        if m == 0 || m % 2 != 0 {
            return invalid(format!("basis size m must be even and positive, got {m}"));
        }
        let mut r = rng::seeded(seed);
        let k = m / 2;
        // row-major draw order, so the stream layout matches the file format
        let mut freqs = DMatrix::zeros(k, d);
        for i in 0..k {
            for j in 0..d {
                freqs[(i, j)] = r.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(BasisSpec { d, m, seed, freqs })
    }

    /// Builds a basis with explicit frequency rows (`m = 2 * rows`).
    /// The seed is kept only as an identifier.
    pub fn with_freqs(freqs: DMatrix<f64>, seed: u64) -> Result<Self> {
        if freqs.nrows() == 0 || freqs.ncols() == 0 {
            return invalid("frequency matrix must be non-empty");
        }
        if freqs.iter().any(|v| !v.is_finite()) {
            return invalid("frequencies must be finite");
        }
        Ok(BasisSpec {
            d: freqs.ncols(),
            m: 2 * freqs.nrows(),
            seed,
            freqs,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn freqs(&self) -> &DMatrix<f64> {
        &self.freqs
    }

    /// `φ(x)`; entries `2k` and `2k+1` are `sin(g_k·x)` and `cos(g_k·x)`.
    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.d {
            return invalid(format!(
                "instance has dimension {}, basis expects {}",
                x.len(),
                self.d
            ));
        }
        let mut out = DVector::zeros(self.m);
        self.eval_into(x, out.as_mut_slice());
        Ok(out)
    }

    /// Features of every row of `instances`, as an `n × m` matrix.
    pub fn eval_rows(&self, instances: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if instances.ncols() != self.d {
            return invalid(format!(
                "instances have dimension {}, basis expects {}",
                instances.ncols(),
                self.d
            ));
        }
        Ok(eval_feature_rows(self, instances))
    }
}

impl FeatureMap for BasisSpec {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn num_features(&self) -> usize {
        self.m
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.m / 2 {
            let mut t = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                t += self.freqs[(k, j)] * xj;
            }
            let (s, c) = t.sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    fn fingerprint(&self) -> u64 {
        self.seed
    }
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    d: usize,
    m: usize,
    seed: u64,
    freqs: Vec<f64>,
}

impl Serialize for BasisSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut freqs = Vec::with_capacity(self.freqs.len());
        for row in self.freqs.row_iter() {
            freqs.extend(row.iter());
        }
        BasisRepr {
            d: self.d,
            m: self.m,
            seed: self.seed,
            freqs,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BasisSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = BasisRepr::deserialize(de)?;
        if r.m == 0 || r.m % 2 != 0 || r.d == 0 || r.freqs.len() != r.m / 2 * r.d {
            return Err(D::Error::custom(format!(
                "inconsistent basis: d={}, m={}, {} frequencies",
                r.d,
                r.m,
                r.freqs.len()
            )));
        }
        let freqs = DMatrix::from_row_slice(r.m / 2, r.d, &r.freqs);
        BasisSpec::with_freqs(freqs, r.seed).map_err(D::Error::custom)
    }
}

pub(crate) fn eval_feature_rows<F: FeatureMap + ?Sized>(
    map: &F,
    points: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let m = map.num_features();
    let mut out = DMatrix::zeros(n, m);
    let mut x = vec![0.0; d];
    let mut row = vec![0.0; m];
    for i in 0..n {
        for j in 0..d {
            x[j] = points[(i, j)];
        }
        map.eval_into(&x, &mut row);
        for k in 0..m {
            out[(i, k)] = row[k];
        }
    }
    out
}

/// How an [`IntegrationGrid`] was built; enough to rebuild it bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridKind {
    TensorGrid {
        points_per_axis: usize,
    },
    MonteCarlo {
        #[serde(rename = "Q")]
        q: usize,
        seed: u64,
    },
}

/// Quadrature nodes and positive weights over a [`Domain`].
#[derive(Debug, Clone)]
pub struct IntegrationGrid {
    domain: Domain,
    /// `Q × d`
    nodes: DMatrix<f64>,
    weights: Vec<f64>,
    kind: GridKind,
}

impl IntegrationGrid {
    /// Midpoint rule on a regular `points_per_axis^d` lattice.
    pub fn tensor(domain: &Domain, points_per_axis: usize) -> Result<Self> {
        Self::tensor_with_budget(domain, points_per_axis, DEFAULT_MAX_GRID_NODES)
    }

    pub fn tensor_with_budget(
        domain: &Domain,
        points_per_axis: usize,
        max_nodes: usize,
    ) -> Result<Self> {
        if points_per_axis < 2 {
            return invalid(format!(
                "points_per_axis must be at least 2, got {points_per_axis}"
            ));
        }
        let d = domain.dim();
        let q = (points_per_axis as u128)
            .checked_pow(d as u32)
            .filter(|&q| q <= max_nodes as u128)
            .ok_or_else(|| {
                Error::Resource(format!(
                    "tensor grid with {points_per_axis}^{d} nodes exceeds the node limit of {max_nodes}"
                ))
            })? as usize;
        let h: Vec<f64> = (0..d)
            .map(|j| domain.width(j) / points_per_axis as f64)
            .collect();
        let mut nodes = DMatrix::zeros(q, d);
        for idx in 0..q {
            // last axis varies fastest
            let mut rest = idx;
            for j in (0..d).rev() {
                let k = rest % points_per_axis;
                rest /= points_per_axis;
                nodes[(idx, j)] = domain.lo[j] + (k as f64 + 0.5) * h[j];
            }
        }
        let w = domain.volume() / q as f64;
        Ok(IntegrationGrid {
            domain: domain.clone(),
            nodes,
            weights: vec![w; q],
            kind: GridKind::TensorGrid { points_per_axis },
        })
    }

    /// `q` uniform random nodes, each with weight `volume / q`.
    pub fn monte_carlo(domain: &Domain, q: usize, seed: u64) -> Result<Self> {
        if q == 0 {
            return invalid("Monte Carlo grid needs at least one node");
        }
        let d = domain.dim();
        let mut r = rng::seeded(seed);
        let mut nodes = DMatrix::zeros(q, d);
        for i in 0..q {
            for j in 0..d {
                let u: f64 = r.random();
                nodes[(i, j)] = domain.lo[j] + u * domain.width(j);
            }
        }
        let w = domain.volume() / q as f64;
        Ok(IntegrationGrid {
            domain: domain.clone(),
            nodes,
            weights: vec![w; q],
            kind: GridKind::MonteCarlo { q, seed },
        })
    }

    pub fn build(domain: &Domain, kind: GridKind) -> Result<Self> {
        match kind {
            GridKind::TensorGrid { points_per_axis } => Self::tensor(domain, points_per_axis),
            GridKind::MonteCarlo { q, seed } => Self::monte_carlo(domain, q, seed),
        }
    }

    /// Default quadrature: 64-point tensor grid up to three dimensions,
    /// 20 000 Monte Carlo nodes beyond.
    pub fn default_for(domain: &Domain, seed: u64) -> Result<Self> {
        if domain.dim() <= 3 {
            Self::tensor(domain, 64)
        } else {
            Self::monte_carlo(domain, 20_000, seed)
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ_q w_q f(x_q)`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let d = self.domain.dim();
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for (q, &w) in self.weights.iter().enumerate() {
            for j in 0..d {
                x[j] = self.nodes[(q, j)];
            }
            acc += w * f(&x);
        }
        acc
    }
}

/// A feature map tabulated on a quadrature grid: the `Q × m` matrix
/// `Φ[q, k] = φ_k(x_q)` together with the log-weights. All density
/// computations (log-partition, moments, KL) run against this table.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    phi: DMatrix<f64>,
    // column-major copy of Φᵀ so that Φᵀπ runs as a plain product
    phi_t: DMatrix<f64>,
    log_weights: DVector<f64>,
    domain: Domain,
    fingerprint: u64,
}

impl FeatureGrid {
    pub fn new<F: FeatureMap + ?Sized>(map: &F, grid: &IntegrationGrid) -> Result<Self> {
        if map.input_dim() != grid.domain.dim() {
            return invalid(format!(
                "feature map takes {}-d input but the grid is {}-d",
                map.input_dim(),
                grid.domain.dim()
            ));
        }
        let phi = eval_feature_rows(map, &grid.nodes);
        Ok(FeatureGrid {
            phi_t: phi.transpose(),
            phi,
            log_weights: DVector::from_iterator(grid.len(), grid.weights.iter().map(|w| w.ln())),
            domain: grid.domain.clone(),
            fingerprint: map.fingerprint(),
        })
    }

    /// Features `ψ = Uᵀφ` for an `m × k` matrix `U`.
    pub fn project(&self, u: &DMatrix<f64>) -> Result<Self> {
        if u.nrows() != self.num_features() {
            return invalid(format!(
                "projection has {} rows, expected {}",
                u.nrows(),
                self.num_features()
            ));
        }
        let phi = &self.phi * u;
        Ok(FeatureGrid {
            phi_t: phi.transpose(),
            phi,
            log_weights: self.log_weights.clone(),
            domain: self.domain.clone(),
            fingerprint: self.fingerprint ^ 0x5bd1_e995,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `Φᵀ`, `m × Q`.
    pub fn phi_t(&self) -> &DMatrix<f64> {
        &self.phi_t
    }

    pub fn log_weights(&self) -> &DVector<f64> {
        &self.log_weights
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn num_nodes(&self) -> usize {
        self.phi.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.phi.ncols()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}
