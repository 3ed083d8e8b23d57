use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maxentmil::basis::domain_from_data;
use maxentmil::experiments::{
    self, synth_bags, synth_classification, synth_lowrank_lambda, PhaseCell, PhaseDiagramSpec,
    PhaseSolver,
};
use maxentmil::mil::{
    self, BagClassifier, DistanceKind, LabeledBag, LabeledBagDataset, Preprocessing,
};
use maxentmil::rng::derive_seed;
use maxentmil::{solvers, BasisSpec, FeatureGrid, FitReport, IntegrationGrid, SufficientStats};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{check_threads, parse_list, FitSolver, RunConfig, SynthKind};
use crate::io::{self, ModelFile};
use crate::{Cli, CliResult, Command, Outcome};

pub fn run(cli: Cli) -> CliResult {
    let common = match &cli.command {
        Command::Fit { common, .. }
        | Command::PhaseDiagram { common, .. }
        | Command::KlMatrix { common, .. }
        | Command::Classify { common, .. }
        | Command::BoundCheck { common, .. }
        | Command::Synth { common, .. }
        | Command::Bench { common, .. } => common,
    };
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    cfg.resolve_seed();
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    init_logging(&cli, &cfg)?;
    if let Some(n) = cfg.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(check_threads(n)?)
            .build_global();
    }
    let out = common.out.clone();
    match cli.command {
        Command::Fit {
            dataset,
            solver,
            m,
            eta,
            a,
            basis_from,
            standardize,
            ..
        } => {
            let f = &mut cfg.fit;
            set(&mut f.solver, solver);
            set(&mut f.m, m);
            if eta.is_some() {
                f.eta = eta;
            }
            set(&mut f.cmena.a, a);
            if basis_from.is_some() {
                f.basis_from = basis_from;
            }
            f.standardize |= standardize;
            start(&out, &cfg)?;
            fit(&dataset, &out, &cfg)
        }
        Command::PhaseDiagram {
            solver,
            m_values,
            t_values,
            reps,
            n,
            bags,
            ..
        } => {
            let p = &mut cfg.phase_diagram;
            if let Some(s) = m_values {
                p.m_values = parse_list(&s)?;
            }
            if let Some(s) = t_values {
                p.t_values = parse_list(&s)?;
            }
            set(&mut p.reps, reps);
            set(&mut p.n_per_bag, n);
            set(&mut p.n_bags, bags);
            let solvers = match solver.as_deref() {
                None => vec![p.solver],
                Some("both") => vec![PhaseSolver::Cmen, PhaseSolver::RmdeContinuation],
                Some(s) => {
                    let one = parse_enum::<PhaseSolver>(s)?;
                    p.solver = one;
                    vec![one]
                }
            };
            p.validate()?;
            start(&out, &cfg)?;
            phase_diagram(&out, &cfg.phase_diagram, &solvers)
        }
        Command::KlMatrix { model, gamma, .. } => {
            start(&out, &cfg)?;
            kl_matrix(&model, &out, gamma)
        }
        Command::Classify {
            train,
            test,
            distance,
            folds,
            m,
            pca_dim,
            k,
            k_prime,
            gamma,
            ..
        } => {
            let c = &mut cfg.classify;
            if let Some(d) = distance {
                c.pipeline.distance = parse_enum::<DistanceKind>(&d)?;
            }
            set(&mut c.folds, folds);
            set(&mut c.pipeline.m, m);
            if pca_dim.is_some() {
                c.pipeline.pca_dim = pca_dim;
            }
            set(&mut c.pipeline.knn.k, k);
            set(&mut c.pipeline.knn.k_prime, k_prime);
            if gamma.is_some() {
                c.gamma = gamma;
            }
            start(&out, &cfg)?;
            classify(&train, test.as_deref(), &out, &cfg)
        }
        Command::BoundCheck {
            trials,
            a_values,
            bags,
            m,
            n,
            ..
        } => {
            let b = &mut cfg.bound_check;
            set(&mut b.trials, trials);
            if let Some(s) = a_values {
                b.a_values = parse_list(&s)?;
            }
            set(&mut b.n_bags, bags);
            set(&mut b.m, m);
            set(&mut b.n_per_bag, n);
            start(&out, &cfg)?;
            bound_check(&out, &cfg)
        }
        Command::Synth {
            kind,
            bags,
            m,
            rank,
            n,
            ..
        } => {
            let s = &mut cfg.synth;
            set(&mut s.kind, kind);
            match s.kind {
                SynthKind::Lowrank => {
                    set(&mut s.n_bags, bags);
                    set(&mut s.m, m);
                    set(&mut s.rank, rank);
                    set(&mut s.n_per_bag, n);
                }
                SynthKind::Classification => {
                    let c = &mut s.classification;
                    set(&mut c.n_bags, bags);
                    set(&mut c.m, m);
                    set(&mut c.n_per_bag, n);
                }
            }
            start(&out, &cfg)?;
            synth(&out, &cfg)
        }
        Command::Bench {
            sizes, min_seconds, ..
        } => {
            if let Some(s) = sizes {
                cfg.bench.sizes = parse_list(&s)?;
            }
            set(&mut cfg.bench.min_seconds, min_seconds);
            start(&out, &cfg)?;
            bench(&out, &cfg)
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses a kebab-case name through the type's serde representation.
fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("unknown value {s:?}"))
}

fn init_logging(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => cfg.log_level()?,
            1 => log::LevelFilter::Info,
            2 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

/// Creates the output directory with the resolved configuration and the
/// tool version.
fn start(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    io::write_json(&out.join("config.json"), cfg)?;
    fs::write(
        out.join("VERSION"),
        format!("maxentmil {}\n", maxentmil::VERSION),
    )?;
    Ok(())
}

fn fit(dataset: &Path, out: &Path, cfg: &RunConfig) -> CliResult {
    let fc = &cfg.fit;
    let data = io::read_dataset(dataset)?;
    let preprocessing = if fc.standardize || fc.pca_dim.is_some() {
        Some(Preprocessing::fit(&data, fc.pca_dim, fc.standardize)?)
    } else {
        None
    };
    let bags: Vec<DMatrix<f64>> = data
        .bags
        .iter()
        .map(|b| match &preprocessing {
            Some(p) => p.apply(&b.instances),
            None => Ok(b.instances.clone()),
        })
        .collect::<maxentmil::Result<_>>()?;
    let d = bags[0].ncols();
    let (basis, grid) = match &fc.basis_from {
        Some(path) => {
            let mf: ModelFile = io::read_json(path)?;
            let grid = IntegrationGrid::build(&mf.domain, mf.grid)?;
            (mf.basis, grid)
        }
        None => {
            let basis = BasisSpec::new(d, fc.m, fc.basis_seed)?;
            let pooled = pool(&bags);
            let domain = domain_from_data(&pooled, fc.domain_margin)?;
            let grid = match fc.grid {
                Some(kind) => IntegrationGrid::build(&domain, kind)?,
                None => IntegrationGrid::default_for(&domain, fc.basis_seed)?,
            };
            (basis, grid)
        }
    };
    if basis.d() != d {
        bail!(
            "basis is {}-dimensional, instances are {d}-dimensional",
            basis.d()
        );
    }
    let fg = FeatureGrid::new(&basis, &grid)?;
    let stats: Vec<SufficientStats> = bags
        .iter()
        .zip(&data.bags)
        .map(|(x, b)| SufficientStats::from_instances(x, &basis, b.bag_id.clone()))
        .collect::<maxentmil::Result<_>>()?;
    let (lambda, report) = match fc.solver {
        FitSolver::Mde => {
            let l = solvers::fit_mde(&stats, &fg, &fc.newton)?;
            let report = FitReport {
                solver: "mde".to_string(),
                converged: true,
                ..FitReport::default()
            };
            (l, report)
        }
        FitSolver::Rmde => {
            let Some(eta) = fc.eta else {
                bail!("solver rmde needs fit.eta (or --eta)");
            };
            solvers::fit_rmde(&stats, &fg, eta, None, &fc.rmde)?
        }
        FitSolver::RmdeContinuation => {
            solvers::rmde_continuation(&stats, &fg, &fc.newton, &fc.rmde)?
        }
        FitSolver::Cmen => solvers::fit_cmen(&stats, &fg, &fc.newton, &fc.cmena)?,
    };
    let densities = lambda.densities(&fg)?;
    let model = ModelFile::new(
        fc.solver.name(),
        basis,
        &grid,
        preprocessing,
        lambda,
        &densities,
    );
    io::write_json(&out.join("model.json"), &model)?;
    io::write_json(&out.join("report.json"), &report)?;
    let mut outcome = Outcome::default();
    if let Some(w) = &report.warning {
        outcome.warnings.push(w.clone());
    } else if !report.converged {
        outcome
            .warnings
            .push(format!("{} did not converge", report.solver));
    }
    Ok(outcome)
}

fn pool(bags: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = bags[0].ncols();
    let n: usize = bags.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut r = 0;
    for b in bags {
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

fn kl_matrix(model: &Path, out: &Path, gamma: Option<f64>) -> CliResult {
    let mf: ModelFile = io::read_json(model)?;
    let (_, densities) = mf.densities()?;
    let dist = mil::sym_kl_matrix(&densities)?;
    let ids = &mf.lambda.bag_ids;
    io::write_matrix_csv(&out.join("kl_matrix.csv"), ids, &dist)?;
    if let Some(g) = gamma {
        let k = mil::kernel_from_distances(&dist, g)?;
        io::write_matrix_csv(&out.join("kernel.csv"), ids, &k)?;
    }
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct SplitPrediction<'a> {
    bag_id: &'a str,
    #[serde(rename = "true")]
    truth: Option<&'a str>,
    predicted: String,
}

#[derive(Serialize)]
struct ClassifySummary {
    mode: &'static str,
    distance: &'static str,
    train_bags: usize,
    test_bags: usize,
    /// Over labeled test bags (split) or the fold mean (k-fold).
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold_accuracies: Option<Vec<f64>>,
    warnings: Vec<String>,
}

fn classify(train_path: &Path, test_path: Option<&Path>, out: &Path, cfg: &RunConfig) -> CliResult {
    let c = &cfg.classify;
    let train = io::read_dataset(train_path)?;
    let distance = c.pipeline.distance.name();
    let export = |clf: &BagClassifier, data: &LabeledBagDataset| -> Result<()> {
        let ids: Vec<String> = data.bags.iter().map(|b| b.bag_id.clone()).collect();
        io::write_matrix_csv(
            &out.join("train_distances.csv"),
            &ids,
            clf.train_distances(),
        )?;
        if let Some(g) = c.gamma {
            let k = mil::kernel_from_distances(clf.train_distances(), g)?;
            io::write_matrix_csv(&out.join("kernel.csv"), &ids, &k)?;
        }
        Ok(())
    };
    let summary = match test_path {
        None => {
            let res = mil::kfold_evaluate(&train, c.folds, &c.pipeline, c.seed)?;
            io::write_jsonl(&out.join("predictions.jsonl"), &res.predictions)?;
            let mut warnings = res.warnings.clone();
            if c.gamma.is_some() {
                let clf = BagClassifier::fit(&train, &c.pipeline)?;
                warnings.extend(clf.warnings().iter().cloned());
                export(&clf, &train)?;
            }
            ClassifySummary {
                mode: "kfold",
                distance,
                train_bags: train.len(),
                test_bags: 0,
                accuracy: Some(res.mean_accuracy),
                std_accuracy: Some(res.std_accuracy),
                fold_accuracies: Some(res.fold_accuracies),
                warnings,
            }
        }
        Some(tp) => {
            let test = io::read_dataset(tp)?;
            if test.d() != train.d() {
                bail!(
                    "test bags are {}-dimensional, training bags {}",
                    test.d(),
                    train.d()
                );
            }
            let clf = BagClassifier::fit(&train, &c.pipeline)?;
            let preds: Vec<SplitPrediction> = test
                .bags
                .iter()
                .map(|b: &LabeledBag| {
                    Ok(SplitPrediction {
                        bag_id: &b.bag_id,
                        truth: b.label.as_deref(),
                        predicted: clf.predict(&b.bag_id, &b.instances)?,
                    })
                })
                .collect::<maxentmil::Result<_>>()?;
            io::write_jsonl(&out.join("predictions.jsonl"), &preds)?;
            export(&clf, &train)?;
            let labeled: Vec<&SplitPrediction> =
                preds.iter().filter(|p| p.truth.is_some()).collect();
            let accuracy = (!labeled.is_empty()).then(|| {
                let hits = labeled
                    .iter()
                    .filter(|p| p.truth == Some(p.predicted.as_str()))
                    .count();
                hits as f64 / labeled.len() as f64
            });
            ClassifySummary {
                mode: "split",
                distance,
                train_bags: train.len(),
                test_bags: test.len(),
                accuracy,
                std_accuracy: None,
                fold_accuracies: None,
                warnings: clf.warnings().to_vec(),
            }
        }
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(Outcome {
        warnings: summary.warnings,
    })
}

fn bound_check(out: &Path, cfg: &RunConfig) -> CliResult {
    let b = &cfg.bound_check;
    let res =
        experiments::markov_bound_trial(b.n_bags, b.m, b.n_per_bag, b.trials, &b.a_values, b.seed)?;
    io::write_json(&out.join("bound_check.json"), &res)?;
    let mut w = csv::Writer::from_path(out.join("bound_check.csv"))?;
    w.write_record(["a", "epsilon", "exceedance", "markov_limit"])?;
    for i in 0..res.a_values.len() {
        let a = res.a_values[i];
        w.write_record([
            a.to_string(),
            res.epsilons[i].to_string(),
            res.exceedance[i].to_string(),
            (1.0 / a).to_string(),
        ])?;
    }
    w.flush()?;
    let mut outcome = Outcome::default();
    if res.failed_trials > 0 {
        outcome.warnings.push(format!(
            "{} of {} trials failed",
            res.failed_trials, b.trials
        ));
    }
    Ok(outcome)
}

/// A finished phase-diagram cell and the settings that produced it.
#[derive(Serialize, Deserialize)]
struct CellFile {
    spec: PhaseDiagramSpec,
    cell: PhaseCell,
}

fn cell_path(out: &Path, solver: PhaseSolver, m: usize, t: usize) -> PathBuf {
    out.join("cells")
        .join(solver.name())
        .join(format!("m{m}_T{t}.json"))
}

/// The spec a cell of `solver` was computed under.
fn cell_spec(spec: &PhaseDiagramSpec, solver: PhaseSolver) -> PhaseDiagramSpec {
    PhaseDiagramSpec {
        solver,
        ..spec.clone()
    }
}

fn load_cell(path: &Path, spec: &PhaseDiagramSpec) -> Option<PhaseCell> {
    let text = fs::read_to_string(path).ok()?;
    let file: CellFile = serde_json::from_str(&text).ok()?;
    (file.spec == *spec).then_some(file.cell)
}

fn phase_diagram(out: &Path, spec: &PhaseDiagramSpec, wanted: &[PhaseSolver]) -> CliResult {
    let mut grids: Vec<Vec<PhaseCell>> = vec![Vec::new(); wanted.len()];
    for &m in &spec.m_values {
        for &t in &spec.t_values {
            let mut found: Vec<Option<PhaseCell>> = wanted
                .iter()
                .map(|&s| load_cell(&cell_path(out, s, m, t), &cell_spec(spec, s)))
                .collect();
            let missing: Vec<PhaseSolver> = wanted
                .iter()
                .zip(&found)
                .filter(|(_, c)| c.is_none())
                .map(|(&s, _)| s)
                .collect();
            if missing.is_empty() {
                log::info!("m = {m}, T = {t}: reusing finished cells");
            } else {
                log::info!("m = {m}, T = {t}: running {} solver(s)", missing.len());
                let cells = experiments::run_phase_cell(spec, m, t, &missing)?;
                for cell in cells {
                    let k = wanted
                        .iter()
                        .position(|&s| s == cell.solver)
                        .expect("requested");
                    let file = CellFile {
                        spec: cell_spec(spec, cell.solver),
                        cell,
                    };
                    io::write_json(&cell_path(out, file.cell.solver, m, t), &file)?;
                    found[k] = Some(file.cell);
                }
            }
            for (k, c) in found.into_iter().enumerate() {
                grids[k].push(c.expect("every solver computed"));
            }
        }
    }
    let mut outcome = Outcome::default();
    for (solver, cells) in wanted.iter().zip(&grids) {
        io::write_json(&out.join(format!("phase_{}.json", solver.name())), cells)?;
        let mut w = csv::Writer::from_path(out.join(format!("phase_{}.csv", solver.name())))?;
        w.write_record([
            "m",
            "T",
            "solver",
            "recovery_probability",
            "threshold",
            "ranks",
            "warnings",
        ])?;
        for c in cells {
            let ranks: Vec<String> = c
                .ranks
                .iter()
                .map(|r| r.map_or("failed".to_string(), |v| v.to_string()))
                .collect();
            w.write_record([
                c.m.to_string(),
                c.t.to_string(),
                solver.name().to_string(),
                c.recovery_probability.to_string(),
                c.threshold.to_string(),
                ranks.join(";"),
                c.warnings.len().to_string(),
            ])?;
            outcome.warnings.extend(
                c.warnings
                    .iter()
                    .map(|w| format!("{} m={} T={}: {w}", solver.name(), c.m, c.t)),
            );
        }
        w.flush()?;
    }
    Ok(outcome)
}

fn synth(out: &Path, cfg: &RunConfig) -> CliResult {
    let s = &cfg.synth;
    match s.kind {
        SynthKind::Lowrank => {
            let truth =
                synth_lowrank_lambda(s.m, s.n_bags, s.rank, derive_seed(s.seed, &[0]), s.scale)?;
            let data = synth_bags(
                truth,
                2,
                s.half_width,
                s.points_per_axis,
                s.n_per_bag,
                s.seed,
            )?;
            let bags = data
                .bags
                .iter()
                .zip(&data.truth.bag_ids)
                .map(|(x, id)| LabeledBag {
                    bag_id: id.clone(),
                    label: None,
                    instances: x.clone(),
                })
                .collect();
            io::write_dataset(&out.join("bags.jsonl"), &LabeledBagDataset::new(bags)?)?;
            let densities = data.truth.densities(&data.fg)?;
            let grid = IntegrationGrid::tensor(data.fg.domain(), s.points_per_axis)?;
            let model = ModelFile::new("truth", data.basis, &grid, None, data.truth, &densities);
            io::write_json(&out.join("truth.json"), &model)?;
        }
        SynthKind::Classification => {
            let data = synth_classification(&s.classification)?;
            io::write_dataset(&out.join("bags.jsonl"), &data)?;
        }
    }
    Ok(Outcome::default())
}

fn bench(out: &Path, cfg: &RunConfig) -> CliResult {
    let rows = experiments::runtime_benchmark(&cfg.bench)?;
    io::write_json(&out.join("bench.json"), &rows)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    w.write_record(["n", "suff_stats", "kl_matrix", "hausdorff"])?;
    for r in &rows {
        w.write_record([
            r.n.to_string(),
            r.suff_stats.to_string(),
            r.kl_matrix.to_string(),
            r.hausdorff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Outcome::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_names_parse() {
        assert_eq!(
            parse_enum::<DistanceKind>("kl-kde").unwrap(),
            DistanceKind::KlKde
        );
        assert_eq!(
            parse_enum::<PhaseSolver>("rmde-continuation").unwrap(),
            PhaseSolver::RmdeContinuation
        );
        assert!(parse_enum::<PhaseSolver>("cmena").is_err());
    }

    #[test]
    fn pool_stacks_rows() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let p = pool(&[a, b]);
        assert_eq!(p.column(0).as_slice(), &[1.0, 3.0, 5.0]);
    }
}
