//! Dataset, matrix and model files.
//!
//! Datasets are JSON Lines (one bag per line) or CSV (one instance per row,
//! columns `bag_id,label,x1..xd`). Parse errors carry the file name and the
//! 1-based line number.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use maxentmil::mil::{LabeledBag, LabeledBagDataset, Preprocessing};
use maxentmil::{
    BasisSpec, Domain, FeatureGrid, GridKind, IntegrationGrid, LambdaMatrix, MEDensity,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(DatasetFormat::Jsonl),
            Some("csv") => Ok(DatasetFormat::Csv),
            _ => bail!(
                "{}: cannot tell the dataset format; use a .jsonl or .csv extension",
                path.display()
            ),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    bag_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    instances: Vec<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Checks one bag as it is read, so that errors point at its line.
struct BagChecker {
    d: Option<usize>,
    seen: HashMap<String, usize>,
}

impl BagChecker {
    fn new() -> Self {
        BagChecker {
            d: None,
            seen: HashMap::new(),
        }
    }

    fn check(&mut self, where_: &str, id: &str, rows: &[Vec<f64>]) -> Result<()> {
        if id.is_empty() {
            bail!("{where_}: empty bag_id");
        }
        if let Some(first) = self.seen.get(id) {
            bail!("{where_}: duplicate bag_id {id} (first seen at line {first})");
        }
        if rows.is_empty() {
            bail!("{where_}: bag {id} has no instances");
        }
        let d = rows[0].len();
        if d == 0 {
            bag_err(where_, id, "zero-dimensional instances")?;
        }
        if rows.iter().any(|r| r.len() != d) {
            bag_err(where_, id, "instances of different lengths")?;
        }
        match self.d {
            Some(prev) if prev != d => {
                bail!("{where_}: bag {id} has {d}-dimensional instances, earlier bags have {prev}")
            }
            _ => self.d = Some(d),
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            bag_err(where_, id, "non-finite values")?;
        }
        Ok(())
    }
}

fn bag_err(where_: &str, id: &str, what: &str) -> Result<()> {
    bail!("{where_}: bag {id} has {what}")
}

pub fn read_dataset(path: &Path) -> Result<LabeledBagDataset> {
    match DatasetFormat::from_path(path)? {
        DatasetFormat::Jsonl => read_jsonl(path),
        DatasetFormat::Csv => read_csv(path),
    }
}

pub fn write_dataset(path: &Path, data: &LabeledBagDataset) -> Result<()> {
    match DatasetFormat::from_path(path)? {
        DatasetFormat::Jsonl => write_bags_jsonl(path, data),
        DatasetFormat::Csv => write_csv(path, data),
    }
}

fn read_jsonl(path: &Path) -> Result<LabeledBagDataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut checker = BagChecker::new();
    let mut bags = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let where_ = format!("{}:{lineno}", path.display());
        let line = line.with_context(|| where_.clone())?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BagRecord = serde_json::from_str(&line).map_err(|e| anyhow!("{where_}: {e}"))?;
        checker.check(&where_, &rec.bag_id, &rec.instances)?;
        checker.seen.insert(rec.bag_id.clone(), lineno);
        bags.push(LabeledBag {
            instances: rows_to_matrix(&rec.instances),
            bag_id: rec.bag_id,
            label: rec.label,
        });
    }
    if bags.is_empty() {
        bail!("{}: no bags", path.display());
    }
    Ok(LabeledBagDataset::new(bags)?)
}

fn write_bags_jsonl(path: &Path, data: &LabeledBagDataset) -> Result<()> {
    let mut w = create(path)?;
    for b in &data.bags {
        let rec = BagRecord {
            bag_id: b.bag_id.clone(),
            label: b.label.clone(),
            instances: b
                .instances
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<LabeledBagDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header = rdr
        .headers()
        .map_err(|e| anyhow!("{}:1: {e}", path.display()))?
        .clone();
    if header.len() < 3 || &header[0] != "bag_id" || &header[1] != "label" {
        bail!(
            "{}:1: header must be bag_id,label,x1,...,xd",
            path.display()
        );
    }
    let d = header.len() - 2;
    // bags in order of first appearance: (id, label, rows, first line)
    let mut order: Vec<(String, Option<String>, Vec<Vec<f64>>, usize)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{}:{line}: {e}", path.display())
        })?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let where_ = format!("{}:{line}", path.display());
        if rec.len() != d + 2 {
            bail!("{where_}: expected {} fields, got {}", d + 2, rec.len());
        }
        let id = rec[0].to_string();
        let label = (!rec[1].is_empty()).then(|| rec[1].to_string());
        let row: Vec<f64> = (0..d)
            .map(|j| {
                rec[j + 2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| anyhow!("{where_}: column {}: {e}", j + 3))
            })
            .collect::<Result<_>>()?;
        match index.get(&id) {
            Some(&k) => {
                if order[k].1 != label {
                    bail!("{where_}: bag {id} changes label");
                }
                order[k].2.push(row);
            }
            None => {
                index.insert(id.clone(), order.len());
                order.push((id, label, vec![row], line));
            }
        }
    }
    if order.is_empty() {
        bail!("{}: no bags", path.display());
    }
    let mut checker = BagChecker::new();
    let mut bags = Vec::with_capacity(order.len());
    for (id, label, rows, line) in order {
        let where_ = format!("{}:{line}", path.display());
        checker.check(&where_, &id, &rows)?;
        checker.seen.insert(id.clone(), line);
        bags.push(LabeledBag {
            bag_id: id,
            label,
            instances: rows_to_matrix(&rows),
        });
    }
    Ok(LabeledBagDataset::new(bags)?)
}

fn write_csv(path: &Path, data: &LabeledBagDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["bag_id".to_string(), "label".to_string()];
    header.extend((1..=data.d()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for b in &data.bags {
        for row in b.instances.row_iter() {
            let mut rec = vec![b.bag_id.clone(), b.label.clone().unwrap_or_default()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with a `bag_id` header row and first column.
pub fn write_matrix_csv(path: &Path, ids: &[String], m: &DMatrix<f64>) -> Result<()> {
    if m.shape() != (ids.len(), ids.len()) {
        bail!("matrix shape does not match {} bag ids", ids.len());
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["bag_id".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let header = rdr.headers()?.clone();
    if header.is_empty() || &header[0] != "bag_id" {
        bail!("{}:1: header must start with bag_id", path.display());
    }
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut m = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let where_ = format!("{}:{}", path.display(), i + 2);
        if i >= n || rec.len() != n + 1 || rec[0] != ids[i] {
            bail!("{where_}: row does not match the header");
        }
        for j in 0..n {
            m[(i, j)] = rec[j + 1]
                .parse()
                .map_err(|e| anyhow!("{where_}: column {}: {e}", j + 2))?;
        }
        rows += 1;
    }
    if rows != n {
        bail!("{}: expected {n} rows, got {rows}", path.display());
    }
    Ok((ids, m))
}

/// A joint fit on disk: everything needed to rebuild the densities.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    pub solver: String,
    pub basis: BasisSpec,
    pub domain: Domain,
    pub grid: GridKind,
    /// Applied to raw instances before the feature map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<Preprocessing>,
    pub lambda: LambdaMatrix,
    pub log_z: Vec<f64>,
}

impl ModelFile {
    pub fn new(
        solver: &str,
        basis: BasisSpec,
        grid: &IntegrationGrid,
        preprocessing: Option<Preprocessing>,
        lambda: LambdaMatrix,
        densities: &[MEDensity],
    ) -> Self {
        ModelFile {
            version: maxentmil::VERSION.to_string(),
            solver: solver.to_string(),
            basis,
            domain: grid.domain().clone(),
            grid: grid.kind(),
            preprocessing,
            lambda,
            log_z: densities.iter().map(|d| d.log_z).collect(),
        }
    }

    /// Rebuilds the grid and densities and checks the stored log-partitions.
    pub fn densities(&self) -> Result<(FeatureGrid, Vec<MEDensity>)> {
        if self.basis.m() != self.lambda.m() || self.basis.d() != self.domain.dim() {
            bail!("model basis, domain and parameters disagree in size");
        }
        if self.log_z.len() != self.lambda.num_bags() {
            bail!(
                "model has {} log-partitions for {} bags",
                self.log_z.len(),
                self.lambda.num_bags()
            );
        }
        let grid = IntegrationGrid::build(&self.domain, self.grid)?;
        let fg = FeatureGrid::new(&self.basis, &grid)?;
        let densities = self.lambda.densities(&fg)?;
        for (d, &z) in densities.iter().zip(&self.log_z) {
            if (d.log_z - z).abs() > 1e-8 * (1.0 + z.abs()) {
                bail!(
                    "bag {}: stored log-partition {z} does not match the rebuilt grid ({})",
                    d.bag_id,
                    d.log_z
                );
            }
        }
        Ok((fg, densities))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{}:{}: {e}", path.display(), e.line()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}
