//! Bag-level similarity and classification.
//!
//! Bags are compared either through fitted densities (symmetric KL of
//! maximum-entropy or kernel density estimates) or directly through their
//! instances (average Hausdorff distance). Citation-kNN classifies on any of
//! these distances; [`kfold_evaluate`] runs the whole pipeline under
//! stratified cross-validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{domain_from_data, BasisSpec, FeatureGrid, IntegrationGrid};
use crate::error::{invalid, Result};
use crate::lowrank;
use crate::maxent::{self, MEDensity, NewtonConfig, SufficientStats};
use crate::rng;
use crate::solvers::{self, CmenaConfig, LambdaMatrix, PsiBasis, RmdeConfig, PSI_RANK_TOL};

/// One bag: an identifier, an optional class label and `n × d` instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag {
    pub bag_id: String,
    pub label: Option<String>,
    pub instances: DMatrix<f64>,
}

/// Bags sharing an instance dimension, with unique identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBagDataset {
    pub bags: Vec<LabeledBag>,
    d: usize,
}

impl LabeledBagDataset {
    pub fn new(bags: Vec<LabeledBag>) -> Result<Self> {
        let Some(first) = bags.first() else {
            return invalid("data set has no bags");
        };
        let d = first.instances.ncols();
        if d == 0 {
            return invalid(format!(
                "bag {} has zero-dimensional instances",
                first.bag_id
            ));
        }
        let mut seen = HashSet::new();
        for b in &bags {
            if b.instances.nrows() == 0 {
                return invalid(format!("bag {} has no instances", b.bag_id));
            }
            if b.instances.ncols() != d {
                return invalid(format!(
                    "bag {} has {}-dimensional instances, expected {d}",
                    b.bag_id,
                    b.instances.ncols()
                ));
            }
            if b.instances.iter().any(|v| !v.is_finite()) {
                return invalid(format!("bag {} contains non-finite values", b.bag_id));
            }
            if !seen.insert(b.bag_id.as_str()) {
                return invalid(format!("duplicate bag id {}", b.bag_id));
            }
        }
        Ok(LabeledBagDataset { bags, d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Sorted set of labels present.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.bags.iter().filter_map(|b| b.label.as_ref()).collect();
        set.into_iter().cloned().collect()
    }

    /// Labels of every bag; fails if any bag is unlabeled.
    pub fn labels(&self) -> Result<Vec<String>> {
        self.bags
            .iter()
            .map(|b| match &b.label {
                Some(l) => Ok(l.clone()),
                None => invalid(format!("bag {} has no label", b.bag_id)),
            })
            .collect()
    }

    /// All instances stacked row-wise.
    pub fn pooled(&self) -> DMatrix<f64> {
        pool(self.bags.iter().map(|b| &b.instances), self.d)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        LabeledBagDataset::new(idx.iter().map(|&i| self.bags[i].clone()).collect())
    }
}

fn pool<'a>(bags: impl Iterator<Item = &'a DMatrix<f64>> + Clone, d: usize) -> DMatrix<f64> {
    let total: usize = bags.clone().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, d);
    let mut row = 0;
    for b in bags {
        out.rows_mut(row, b.nrows()).copy_from(b);
        row += b.nrows();
    }
    out
}

/// Principal-component projection `(x - mean) · components`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    #[serde(with = "crate::serde_vec")]
    pub mean: DVector<f64>,
    /// `d × r`, orthonormal columns in decreasing-variance order.
    #[serde(with = "crate::serde_vec::rows")]
    pub components: DMatrix<f64>,
}

impl PcaModel {
    pub fn r(&self) -> usize {
        self.components.ncols()
    }

    /// Projects the rows of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return invalid(format!(
                "PCA expects {}-dimensional instances, got {}",
                self.mean.len(),
                x.ncols()
            ));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.components)
    }
}

/// Top-`r` eigenvectors of the pooled covariance. Each component's sign is
/// chosen so that its largest-magnitude entry is positive.
pub fn pca_fit(pooled: &DMatrix<f64>, r: usize) -> Result<PcaModel> {
    let (n, d) = pooled.shape();
    if r == 0 || r > d {
        return invalid(format!("PCA dimension {r} must lie in 1..={d}"));
    }
    if n <= r {
        return invalid(format!(
            "PCA to {r} dimensions needs more than {r} instances, got {n}"
        ));
    }
    let mean = DVector::from_fn(d, |j, _| pooled.column(j).mean());
    let mut centered = pooled.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = DMatrix::zeros(d, r);
    for (k, &src) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        components.set_column(k, &v);
    }
    Ok(PcaModel { mean, components })
}

/// Applies `model` to every bag.
pub fn pca_apply(model: &PcaModel, data: &LabeledBagDataset) -> Result<LabeledBagDataset> {
    let bags = data
        .bags
        .iter()
        .map(|b| {
            Ok(LabeledBag {
                bag_id: b.bag_id.clone(),
                label: b.label.clone(),
                instances: model.apply(&b.instances)?,
            })
        })
        .collect::<Result<_>>()?;
    LabeledBagDataset::new(bags)
}

/// Per-axis affine map to zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    #[serde(with = "crate::serde_vec")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub scale: DVector<f64>,
}

impl Standardizer {
    /// Constant axes keep unit scale.
    pub fn fit(pooled: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = pooled.shape();
        if n == 0 {
            return invalid("cannot standardize an empty instance set");
        }
        let mean = DVector::from_fn(d, |j, _| pooled.column(j).mean());
        let scale = DVector::from_fn(d, |j, _| {
            let var = pooled
                .column(j)
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        });
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return invalid("standardizer dimension mismatch");
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }
}

fn check_bag(b: &DMatrix<f64>) -> Result<()> {
    if b.nrows() == 0 {
        return invalid("empty bag");
    }
    Ok(())
}

/// `(Σ_a min_b ‖a-b‖ + Σ_b min_a ‖a-b‖) / (|A| + |B|)`.
pub fn avg_hausdorff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_bag(a)?;
    check_bag(b)?;
    if a.ncols() != b.ncols() {
        return invalid("bags have different instance dimensions");
    }
    let d = a.ncols();
    let mut min_a = vec![f64::INFINITY; a.nrows()];
    let mut min_b = vec![f64::INFINITY; b.nrows()];
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut s = 0.0;
            for k in 0..d {
                let t = a[(i, k)] - b[(j, k)];
                s += t * t;
            }
            if s < min_a[i] {
                min_a[i] = s;
            }
            if s < min_b[j] {
                min_b[j] = s;
            }
        }
    }
    // the two directed sums are added last so that swapping the bags gives
    // the same bits
    let sa: f64 = min_a.iter().map(|s| s.sqrt()).sum();
    let sb: f64 = min_b.iter().map(|s| s.sqrt()).sum();
    Ok((sa + sb) / (a.nrows() + b.nrows()) as f64)
}

/// Gaussian kernel density estimate with a per-axis bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    /// `n × d`
    pub centers: DMatrix<f64>,
    pub bandwidth: Vec<f64>,
}

/// Terrell's maximal-smoothing bandwidth for a Gaussian kernel,
/// `1.144 σ n^{-1/5}`.
pub fn maximal_smoothing_bandwidth(sigma: f64, n: usize) -> f64 {
    1.144 * sigma * (n as f64).powf(-0.2)
}

/// Per-axis maximal-smoothing bandwidths; an axis without spread uses
/// `σ = 1` (the unit scale of standardized data).
pub fn kde_fit(bag: &DMatrix<f64>) -> Result<Kde> {
    check_bag(bag)?;
    let n = bag.nrows();
    let bandwidth = (0..bag.ncols())
        .map(|j| {
            let c = bag.column(j);
            let mean = c.mean();
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            maximal_smoothing_bandwidth(if sd > 0.0 { sd } else { 1.0 }, n)
        })
        .collect();
    Ok(Kde {
        centers: bag.clone(),
        bandwidth,
    })
}

impl Kde {
    /// `log (1/n) Σ_j Π_k N(x_k; c_jk, h_k²)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.centers.nrows();
        let d = self.centers.ncols();
        let log_norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum::<f64>()
            + (n as f64).ln();
        let mut exps = Vec::with_capacity(n);
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                let t = (x[k] - self.centers[(j, k)]) / self.bandwidth[k];
                s += t * t;
            }
            exps.push(-0.5 * s);
        }
        let mx = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exps.iter().map(|e| (e - mx).exp()).sum();
        mx + sum.ln() - log_norm
    }

    /// Log-density on every grid node, renormalized to integrate to one
    /// over the grid.
    fn grid_log_density(&self, grid: &IntegrationGrid) -> Vec<f64> {
        let nodes = grid.nodes();
        let d = nodes.ncols();
        let mut x = vec![0.0; d];
        let mut vals = Vec::with_capacity(grid.len());
        for q in 0..grid.len() {
            for k in 0..d {
                x[k] = nodes[(q, k)];
            }
            vals.push(self.log_density(&x));
        }
        let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mass: f64 = vals
            .iter()
            .zip(grid.weights())
            .map(|(v, w)| w * (v - mx).exp())
            .sum();
        let shift = mx + mass.ln();
        vals.iter().map(|v| v - shift).collect()
    }
}

fn sym_kl_from_log_tables(lp: &[f64], lq: &[f64], weights: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .zip(weights)
        .map(|((a, b), w)| w * (a.exp() - b.exp()) * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// Symmetric KL between two KDEs by quadrature on `grid`, with both
/// densities renormalized on the grid.
pub fn kde_sym_kl(a: &Kde, b: &Kde, grid: &IntegrationGrid) -> Result<f64> {
    let d = grid.domain().dim();
    if a.centers.ncols() != d || b.centers.ncols() != d {
        return invalid("KDE and grid dimensions differ");
    }
    let la = a.grid_log_density(grid);
    let lb = b.grid_log_density(grid);
    Ok(sym_kl_from_log_tables(&la, &lb, grid.weights()))
}

/// Bag distance used for kernels and citation-kNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// Symmetric KL of densities from the confidence-constrained fit.
    KlCmen,
    /// Symmetric KL of densities from the regularized fit (continuation).
    KlRmde,
    /// Symmetric KL of independent per-bag maximum-likelihood densities.
    KlMde,
    /// Symmetric KL of kernel density estimates.
    KlKde,
    Hausdorff,
}

impl DistanceKind {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::KlCmen => "kl-cmen",
            DistanceKind::KlRmde => "kl-rmde",
            DistanceKind::KlMde => "kl-mde",
            DistanceKind::KlKde => "kl-kde",
            DistanceKind::Hausdorff => "hausdorff",
        }
    }
}

/// Inputs a distance matrix can be computed from.
pub enum BagSet<'a> {
    Densities(&'a [MEDensity]),
    Kdes(&'a [Kde], &'a IntegrationGrid),
    Instances(&'a [DMatrix<f64>]),
}

/// Symmetric matrix from a pairwise function, computed row-parallel and
/// assembled in index order.
fn pairwise(n: usize, f: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<DMatrix<f64>> {
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| f(i, j)).collect())
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row?.into_iter().enumerate() {
            let j = i + 1 + off;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Pairwise closed-form symmetric KL.
pub fn sym_kl_matrix(densities: &[MEDensity]) -> Result<DMatrix<f64>> {
    pairwise(densities.len(), |i, j| {
        Ok(maxent::sym_kl(&densities[i], &densities[j])?.max(0.0))
    })
}

pub fn hausdorff_matrix(bags: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    pairwise(bags.len(), |i, j| avg_hausdorff(&bags[i], &bags[j]))
}

pub fn kde_sym_kl_matrix(kdes: &[Kde], grid: &IntegrationGrid) -> Result<DMatrix<f64>> {
    let tables: Vec<Vec<f64>> = kdes.par_iter().map(|k| k.grid_log_density(grid)).collect();
    pairwise(kdes.len(), |i, j| {
        Ok(sym_kl_from_log_tables(
            &tables[i],
            &tables[j],
            grid.weights(),
        ))
    })
}

pub fn distance_matrix(set: &BagSet, kind: DistanceKind) -> Result<DMatrix<f64>> {
    match (set, kind) {
        (
            BagSet::Densities(d),
            DistanceKind::KlCmen | DistanceKind::KlRmde | DistanceKind::KlMde,
        ) => sym_kl_matrix(d),
        (BagSet::Kdes(k, g), DistanceKind::KlKde) => kde_sym_kl_matrix(k, g),
        (BagSet::Instances(b), DistanceKind::Hausdorff) => hausdorff_matrix(b),
        _ => invalid(format!(
            "distance {} does not apply to this input",
            kind.name()
        )),
    }
}

/// `K = exp(-γ D)`, elementwise.
pub fn kernel_from_distances(dist: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return invalid(format!("gamma must be positive, got {gamma}"));
    }
    Ok(dist.map(|v| (-gamma * v.max(0.0)).exp()))
}

pub fn kernel_matrix(set: &BagSet, kind: DistanceKind, gamma: f64) -> Result<DMatrix<f64>> {
    kernel_from_distances(&distance_matrix(set, kind)?, gamma)
}

/// Number of references `k` and citers `k'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitationKnnConfig {
    pub k: usize,
    pub k_prime: usize,
}

impl Default for CitationKnnConfig {
    fn default() -> Self {
        CitationKnnConfig { k: 5, k_prime: 5 }
    }
}

/// Citation-kNN vote.
///
/// References are the `k` training bags nearest to the query. A training bag
/// cites the query when fewer than `k'` other training bags are strictly
/// closer to it than the query is. The label with most votes wins; ties go
/// to the smaller summed query distance of its voters, then to the
/// lexicographically smaller label.
pub fn citation_knn(
    train_labels: &[String],
    train_dist: &DMatrix<f64>,
    query_dist: &[f64],
    cfg: &CitationKnnConfig,
) -> Result<String> {
    let n = train_labels.len();
    if n == 0 {
        return invalid("empty training set");
    }
    if train_dist.shape() != (n, n) || query_dist.len() != n {
        return invalid("distance shapes do not match the training set");
    }
    if cfg.k == 0 || cfg.k > n {
        return invalid(format!("k = {} must lie in 1..={n}", cfg.k));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        query_dist[a]
            .total_cmp(&query_dist[b])
            .then_with(|| train_labels[a].cmp(&train_labels[b]))
    });
    let mut voters: Vec<usize> = order[..cfg.k].to_vec();
    if cfg.k_prime > 0 {
        for j in 0..n {
            let closer = (0..n)
                .filter(|&l| l != j && train_dist[(j, l)] < query_dist[j])
                .count();
            if closer < cfg.k_prime {
                voters.push(j);
            }
        }
    }
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &v in &voters {
        let e = tally.entry(train_labels[v].as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += query_dist[v];
    }
    // BTreeMap iterates labels in order, so the first strict winner is the
    // lexicographically smallest among exact ties
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (count, dsum)) in tally {
        let better = match best {
            None => true,
            Some((_, bc, bd)) => count > bc || (count == bc && dsum < bd),
        };
        if better {
            best = Some((label, count, dsum));
        }
    }
    Ok(best.expect("at least one voter").0.to_string())
}

/// Everything the classification pipeline needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub distance: DistanceKind,
    /// Output dimension of PCA; `None` skips PCA.
    pub pca_dim: Option<usize>,
    pub standardize: bool,
    pub m: usize,
    pub basis_seed: u64,
    /// Domain padding as a fraction of the training range per axis.
    pub domain_margin: f64,
    pub points_per_axis: usize,
    pub knn: CitationKnnConfig,
    pub newton: NewtonConfig,
    pub cmena: CmenaConfig,
    pub rmde: RmdeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            distance: DistanceKind::KlCmen,
            pca_dim: None,
            standardize: true,
            m: 20,
            basis_seed: 0,
            domain_margin: 0.1,
            points_per_axis: 64,
            knn: CitationKnnConfig::default(),
            newton: NewtonConfig::default(),
            cmena: CmenaConfig::default(),
            rmde: RmdeConfig::default(),
        }
    }
}

/// PCA and standardization fitted on training instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub pca: Option<PcaModel>,
    pub standardizer: Option<Standardizer>,
}

impl Preprocessing {
    pub fn fit(
        train: &LabeledBagDataset,
        pca_dim: Option<usize>,
        standardize: bool,
    ) -> Result<Self> {
        let mut pooled = train.pooled();
        let pca = match pca_dim {
            Some(r) => {
                let model = pca_fit(&pooled, r)?;
                pooled = model.apply(&pooled)?;
                Some(model)
            }
            None => None,
        };
        let standardizer = if standardize {
            Some(Standardizer::fit(&pooled)?)
        } else {
            None
        };
        Ok(Preprocessing { pca, standardizer })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut y = match &self.pca {
            Some(p) => p.apply(x)?,
            None => x.clone(),
        };
        if let Some(s) = &self.standardizer {
            y = s.apply(&y)?;
        }
        Ok(y)
    }
}

enum Trained {
    Instances(Vec<DMatrix<f64>>),
    Kde {
        tables: Vec<Vec<f64>>,
        grid: IntegrationGrid,
    },
    MaxEnt {
        basis: BasisSpec,
        fg: FeatureGrid,
        densities: Vec<MEDensity>,
        /// Reduced basis for new bags; absent for per-bag fits.
        psi: Option<(PsiBasis, FeatureGrid)>,
    },
}

/// A fitted bag classifier: preprocessing, per-bag representations of the
/// training set and its pairwise distances.
pub struct BagClassifier {
    cfg: PipelineConfig,
    preprocessing: Preprocessing,
    labels: Vec<String>,
    trained: Trained,
    train_dist: DMatrix<f64>,
    warnings: Vec<String>,
}

impl BagClassifier {
    pub fn fit(train: &LabeledBagDataset, cfg: &PipelineConfig) -> Result<Self> {
        let labels = train.labels()?;
        let preprocessing = Preprocessing::fit(train, cfg.pca_dim, cfg.standardize)?;
        let bags: Vec<DMatrix<f64>> = train
            .bags
            .iter()
            .map(|b| preprocessing.apply(&b.instances))
            .collect::<Result<_>>()?;
        let ids: Vec<String> = train.bags.iter().map(|b| b.bag_id.clone()).collect();
        let mut warnings = Vec::new();
        let (trained, train_dist) = match cfg.distance {
            DistanceKind::Hausdorff => {
                let dist = hausdorff_matrix(&bags)?;
                (Trained::Instances(bags), dist)
            }
            DistanceKind::KlKde => {
                let grid = Self::grid(&bags, cfg)?;
                let kdes: Vec<Kde> = bags.iter().map(kde_fit).collect::<Result<_>>()?;
                let tables: Vec<Vec<f64>> =
                    kdes.par_iter().map(|k| k.grid_log_density(&grid)).collect();
                let dist = pairwise(kdes.len(), |i, j| {
                    Ok(sym_kl_from_log_tables(
                        &tables[i],
                        &tables[j],
                        grid.weights(),
                    ))
                })?;
                (Trained::Kde { tables, grid }, dist)
            }
            DistanceKind::KlCmen | DistanceKind::KlRmde | DistanceKind::KlMde => {
                Self::fit_maxent(&bags, &ids, cfg, &mut warnings)?
            }
        };
        Ok(BagClassifier {
            cfg: cfg.clone(),
            preprocessing,
            labels,
            trained,
            train_dist,
            warnings,
        })
    }

    fn grid(bags: &[DMatrix<f64>], cfg: &PipelineConfig) -> Result<IntegrationGrid> {
        let d = bags[0].ncols();
        let domain = domain_from_data(&pool(bags.iter(), d), cfg.domain_margin)?;
        if d <= 3 {
            IntegrationGrid::tensor(&domain, cfg.points_per_axis)
        } else {
            IntegrationGrid::default_for(&domain, cfg.basis_seed ^ 0x9e37)
        }
    }

    fn fit_maxent(
        bags: &[DMatrix<f64>],
        ids: &[String],
        cfg: &PipelineConfig,
        warnings: &mut Vec<String>,
    ) -> Result<(Trained, DMatrix<f64>)> {
        let d = bags[0].ncols();
        let basis = BasisSpec::new(d, cfg.m, cfg.basis_seed)?;
        let grid = Self::grid(bags, cfg)?;
        let fg = FeatureGrid::new(&basis, &grid)?;
        let stats: Vec<SufficientStats> = bags
            .iter()
            .zip(ids)
            .map(|(b, id)| SufficientStats::from_instances(b, &basis, id.clone()))
            .collect::<Result<_>>()?;
        let lambda_hat = solvers::fit_mde(&stats, &fg, &cfg.newton)?;
        let joint: Option<LambdaMatrix> = match cfg.distance {
            DistanceKind::KlCmen => {
                let (l, report) = solvers::fit_cmen_from(&lambda_hat, &stats, &fg, &cfg.cmena)?;
                if let Some(w) = report.warning {
                    log::warn!("cmen: {w}");
                    warnings.push(format!("cmen: {w}"));
                }
                Some(l)
            }
            DistanceKind::KlRmde => {
                let (l, report) =
                    solvers::rmde_continuation_from(&lambda_hat, &stats, &fg, &cfg.rmde)?;
                if let Some(w) = report.warning {
                    log::warn!("rmde: {w}");
                    warnings.push(format!("rmde: {w}"));
                }
                Some(l)
            }
            _ => None,
        };
        let (densities, psi) = match joint {
            Some(l) => {
                let rank = lowrank::numeric_rank(&l.data, PSI_RANK_TOL)?;
                let psi = if rank == 0 {
                    let msg = "joint fit has rank 0; new bags are fitted on the full basis";
                    log::warn!("{msg}");
                    warnings.push(msg.to_string());
                    None
                } else {
                    let p = solvers::psi_basis(&l, rank)?;
                    let reduced = p.reduced_grid(&fg)?;
                    Some((p, reduced))
                };
                (l.densities(&fg)?, psi)
            }
            None => (lambda_hat.densities(&fg)?, None),
        };
        let dist = sym_kl_matrix(&densities)?;
        Ok((
            Trained::MaxEnt {
                basis,
                fg,
                densities,
                psi,
            },
            dist,
        ))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn train_distances(&self) -> &DMatrix<f64> {
        &self.train_dist
    }

    /// Solver warnings raised while fitting the training bags.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Fitted densities of the training bags (density-based distances only).
    pub fn densities(&self) -> Option<&[MEDensity]> {
        match &self.trained {
            Trained::MaxEnt { densities, .. } => Some(densities),
            _ => None,
        }
    }

    /// Distances from a raw (unpreprocessed) bag to every training bag.
    pub fn distances_to(&self, bag_id: &str, instances: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_bag(instances)?;
        let x = self.preprocessing.apply(instances)?;
        match &self.trained {
            Trained::Instances(bags) => bags.iter().map(|b| avg_hausdorff(&x, b)).collect(),
            Trained::Kde { tables, grid } => {
                let q = kde_fit(&x)?.grid_log_density(grid);
                Ok(tables
                    .iter()
                    .map(|t| sym_kl_from_log_tables(&q, t, grid.weights()))
                    .collect())
            }
            Trained::MaxEnt {
                basis,
                fg,
                densities,
                psi,
            } => {
                let stats = SufficientStats::from_instances(&x, basis, bag_id)?;
                let p = match psi {
                    Some((p, reduced)) => p.fit_density(&stats, fg, reduced, &self.cfg.newton)?,
                    None => maxent::fit_sde(&stats, fg, &self.cfg.newton)?,
                };
                densities
                    .iter()
                    .map(|q| Ok(maxent::sym_kl(&p, q)?.max(0.0)))
                    .collect()
            }
        }
    }

    pub fn predict(&self, bag_id: &str, instances: &DMatrix<f64>) -> Result<String> {
        let dq = self.distances_to(bag_id, instances)?;
        citation_knn(&self.labels, &self.train_dist, &dq, &self.cfg.knn)
    }
}

/// Stratified fold index for every bag: bags of each label (labels in sorted
/// order) are shuffled and dealt round-robin, continuing across labels.
pub fn stratified_folds(labels: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 || folds > labels.len() {
        return invalid(format!(
            "fold count {folds} must lie in 1..={}",
            labels.len()
        ));
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(l.as_str()).or_default().push(i);
    }
    let mut r = rng::seeded(seed);
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for idx in by_label.values_mut() {
        idx.shuffle(&mut r);
        for &i in idx.iter() {
            assign[i] = next % folds;
            next += 1;
        }
    }
    Ok(assign)
}

/// One held-out prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bag_id: String,
    #[serde(rename = "true")]
    pub truth: String,
    pub predicted: String,
    pub fold: usize,
}

/// Cross-validated accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldResult {
    pub mean_accuracy: f64,
    /// Population standard deviation over folds.
    pub std_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub predictions: Vec<Prediction>,
    pub warnings: Vec<String>,
}

/// Stratified k-fold evaluation with an arbitrary train-then-predict
/// function returning one label per test bag.
pub fn kfold_evaluate_with<F>(
    data: &LabeledBagDataset,
    folds: usize,
    seed: u64,
    classify: F,
) -> Result<KfoldResult>
where
    F: Fn(&LabeledBagDataset, &[&LabeledBag]) -> Result<Vec<String>>,
{
    let labels = data.labels()?;
    let assign = stratified_folds(&labels, folds, seed)?;
    let classes = data.classes();
    let mut predictions = Vec::with_capacity(data.len());
    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut warnings = Vec::new();
    for f in 0..folds {
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| assign[i] != f).collect();
        let test_idx: Vec<usize> = (0..data.len()).filter(|&i| assign[i] == f).collect();
        if test_idx.is_empty() {
            continue;
        }
        if train_idx.is_empty() {
            return invalid(format!("fold {f} leaves no training bags"));
        }
        let train = data.subset(&train_idx)?;
        let present: BTreeSet<String> = train.classes().into_iter().collect();
        for c in &classes {
            if !present.contains(c) {
                let msg = format!("fold {f}: class {c} absent from the training bags");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let test: Vec<&LabeledBag> = test_idx.iter().map(|&i| &data.bags[i]).collect();
        let predicted = classify(&train, &test)?;
        if predicted.len() != test.len() {
            return invalid("classifier returned the wrong number of labels");
        }
        let mut correct = 0;
        for (&i, p) in test_idx.iter().zip(predicted) {
            if p == labels[i] {
                correct += 1;
            }
            predictions.push(Prediction {
                bag_id: data.bags[i].bag_id.clone(),
                truth: labels[i].clone(),
                predicted: p,
                fold: f,
            });
        }
        fold_accuracies.push(correct as f64 / test_idx.len() as f64);
    }
    let k = fold_accuracies.len() as f64;
    let mean = fold_accuracies.iter().sum::<f64>() / k;
    let std = (fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    Ok(KfoldResult {
        mean_accuracy: mean,
        std_accuracy: std,
        fold_accuracies,
        predictions,
        warnings,
    })
}

/// Fits a [`BagClassifier`] on `train` and labels every test bag.
pub fn classify_split(
    train: &LabeledBagDataset,
    test: &[&LabeledBag],
    cfg: &PipelineConfig,
) -> Result<Vec<String>> {
    let clf = BagClassifier::fit(train, cfg)?;
    test.iter()
        .map(|b| clf.predict(&b.bag_id, &b.instances))
        .collect()
}

/// Stratified k-fold evaluation of the configured pipeline; preprocessing
/// and densities are fitted on the training folds only.
pub fn kfold_evaluate(
    data: &LabeledBagDataset,
    folds: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<KfoldResult> {
    let fit_warnings = Mutex::new(Vec::new());
    let mut result = kfold_evaluate_with(data, folds, seed, |train, test| {
        let clf = BagClassifier::fit(train, cfg)?;
        fit_warnings
            .lock()
            .expect("warning list poisoned")
            .extend(clf.warnings().iter().cloned());
        test.iter()
            .map(|b| clf.predict(&b.bag_id, &b.instances))
            .collect()
    })?;
    result
        .warnings
        .extend(fit_warnings.into_inner().expect("warning list poisoned"));
    Ok(result)
}

#[cfg(test)]
mod tests;
