use super::*;
use crate::basis::Domain;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn randn(r: &mut rng::Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn bag(id: &str, label: &str, x: DMatrix<f64>) -> LabeledBag {
    LabeledBag {
        bag_id: id.into(),
        label: Some(label.into()),
        instances: x,
    }
}

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Two classes of Gaussian bags with shifted means.
fn blobs(n_bags: usize, n: usize, shift: f64, seed: u64) -> LabeledBagDataset {
    let mut r = rng::seeded(seed);
    let bags = (0..n_bags)
        .map(|i| {
            let c = i % 2;
            let mut x = randn(&mut r, n, 2);
            x.column_mut(0).add_scalar_mut(c as f64 * shift);
            bag(&format!("b{i:02}"), &format!("c{c}"), x)
        })
        .collect();
    LabeledBagDataset::new(bags).unwrap()
}

#[test]
fn dataset_validation() {
    assert!(LabeledBagDataset::new(vec![]).is_err());
    let ok = bag("a", "x", DMatrix::zeros(3, 2));
    let empty = bag("b", "x", DMatrix::zeros(0, 2));
    let err = LabeledBagDataset::new(vec![ok.clone(), empty]).unwrap_err();
    assert!(err.to_string().contains('b'));
    let wide = bag("c", "x", DMatrix::zeros(3, 3));
    assert!(LabeledBagDataset::new(vec![ok.clone(), wide]).is_err());
    assert!(LabeledBagDataset::new(vec![ok.clone(), ok.clone()]).is_err());
    let mut nan = bag("d", "x", DMatrix::zeros(2, 2));
    nan.instances[(1, 1)] = f64::NAN;
    assert!(LabeledBagDataset::new(vec![nan]).is_err());

    let data = blobs(6, 4, 1.0, 0);
    assert_eq!(data.d(), 2);
    assert_eq!(data.classes(), labels(&["c0", "c1"]));
    assert_eq!(data.pooled().nrows(), 24);
    let sub = data.subset(&[1, 3]).unwrap();
    assert_eq!(sub.classes(), labels(&["c1"]));
    let mut unlabeled = data.bags.clone();
    unlabeled[2].label = None;
    assert!(LabeledBagDataset::new(unlabeled).unwrap().labels().is_err());
}

#[test]
fn pca_components_orthonormal_and_ordered() {
    let mut r = rng::seeded(1);
    let scale = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.3, 2.0, 1.0, 0.1]));
    let x = randn(&mut r, 400, 5) * scale;
    let model = pca_fit(&x, 3).unwrap();
    assert_eq!(model.r(), 3);
    let gram = model.components.tr_mul(&model.components);
    assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
    for k in 0..3 {
        let c = model.components.column(k);
        assert!(c[c.iamax()] > 0.0);
    }
    // projected covariance is diagonal with the top eigenvalues in order
    let y = model.apply(&x).unwrap();
    let cov = y.tr_mul(&y) / 400.0;
    let mean_y = DVector::from_fn(3, |j, _| y.column(j).mean());
    assert!(mean_y.amax() < 1e-10);
    let eig = {
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= model.mean.transpose();
        }
        let mut e: Vec<f64> = (c.tr_mul(&c) / 400.0)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        e.sort_by(|a, b| b.total_cmp(a));
        e
    };
    for i in 0..3 {
        assert!((cov[(i, i)] - eig[i]).abs() < 1e-8);
        for j in 0..3 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-8);
            }
        }
    }
    assert!(cov[(0, 0)] >= cov[(1, 1)] && cov[(1, 1)] >= cov[(2, 2)]);
}

#[test]
fn pca_full_rank_preserves_distances() {
    let mut r = rng::seeded(2);
    let x = randn(&mut r, 50, 3);
    let y = pca_fit(&x, 3).unwrap().apply(&x).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            let dx = (x.row(i) - x.row(j)).norm();
            let dy = (y.row(i) - y.row(j)).norm();
            assert!((dx - dy).abs() < 1e-10);
        }
    }
}

#[test]
fn pca_rank_one_reconstructs() {
    let mut r = rng::seeded(3);
    let dir = DVector::from_vec(vec![1.0, -2.0, 0.5]).normalize();
    let offset = DVector::from_vec(vec![4.0, 1.0, -1.0]);
    let t = randn(&mut r, 30, 1);
    let x = DMatrix::from_fn(30, 3, |i, j| offset[j] + t[(i, 0)] * dir[j]);
    let model = pca_fit(&x, 1).unwrap();
    let y = model.apply(&x).unwrap();
    let back = &y * model.components.transpose();
    for i in 0..30 {
        for j in 0..3 {
            assert!((back[(i, j)] + model.mean[j] - x[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn pca_errors() {
    let x = DMatrix::from_element(5, 3, 1.0);
    assert!(pca_fit(&x, 0).is_err());
    assert!(pca_fit(&x, 4).is_err());
    assert!(pca_fit(&DMatrix::zeros(2, 3), 2).is_err());
    let model = pca_fit(&randn(&mut rng::seeded(4), 10, 3), 2).unwrap();
    assert!(model.apply(&DMatrix::zeros(2, 4)).is_err());

    let data = blobs(4, 5, 1.0, 1);
    let m = pca_fit(&data.pooled(), 1).unwrap();
    let out = pca_apply(&m, &data).unwrap();
    assert_eq!(out.d(), 1);
    assert_eq!(out.bags[3].bag_id, "b03");
}

#[test]
fn standardizer_moments_and_constant_axis() {
    let mut r = rng::seeded(5);
    let mut x = randn(&mut r, 200, 3) * 4.0;
    x.column_mut(1).add_scalar_mut(7.0);
    x.column_mut(2).fill(2.5);
    let s = Standardizer::fit(&x).unwrap();
    assert_eq!(s.scale[2], 1.0);
    let y = s.apply(&x).unwrap();
    for j in 0..2 {
        let c = y.column(j);
        let var = c.iter().map(|v| v * v).sum::<f64>() / 200.0;
        assert!(c.mean().abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
    assert!(y.column(2).amax() < 1e-15);
    assert!(s.apply(&DMatrix::zeros(1, 2)).is_err());
    assert!(Standardizer::fit(&DMatrix::zeros(0, 2)).is_err());
}

#[test]
fn hausdorff_basics() {
    let a = DMatrix::from_row_slice(1, 1, &[0.0]);
    let b = DMatrix::from_row_slice(1, 1, &[3.0]);
    assert_eq!(avg_hausdorff(&a, &b).unwrap(), 3.0);
    assert!(avg_hausdorff(&DMatrix::zeros(0, 1), &b).is_err());
    assert!(avg_hausdorff(&a, &DMatrix::zeros(1, 2)).is_err());
    // {0, 1} vs {1}: mins 1, 0 and 0 over 3 points
    let c = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let d = DMatrix::from_row_slice(1, 1, &[1.0]);
    assert!((avg_hausdorff(&c, &d).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn hausdorff_matches_brute_force() {
    let mut r = rng::seeded(6);
    for trial in 0..20 {
        let a = randn(&mut r, 3 + trial % 5, 3);
        let b = randn(&mut r, 2 + trial % 7, 3);
        let directed = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> f64 {
            x.row_iter()
                .map(|p| {
                    y.row_iter()
                        .map(|q| (p - q).norm())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        };
        let want = (directed(&a, &b) + directed(&b, &a)) / (a.nrows() + b.nrows()) as f64;
        let got = avg_hausdorff(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
        assert_eq!(got, avg_hausdorff(&b, &a).unwrap());
        assert_eq!(avg_hausdorff(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn maximal_smoothing_rate() {
    let h1 = maximal_smoothing_bandwidth(1.0, 10);
    let h32 = maximal_smoothing_bandwidth(1.0, 320);
    assert!((h1 / h32 - 2.0).abs() < 1e-12);
    assert!((maximal_smoothing_bandwidth(2.0, 1) - 2.288).abs() < 1e-12);
}

#[test]
fn kde_single_instance_is_one_bump() {
    let x = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
    let k = kde_fit(&x).unwrap();
    let h = maximal_smoothing_bandwidth(1.0, 1);
    assert_eq!(k.bandwidth, vec![h, h]);
    let p = [1.0, 0.0];
    let want = -((0.5f64 / h).powi(2) + (1.0f64 / h).powi(2)) / 2.0
        - 2.0 * h.ln()
        - (2.0 * std::f64::consts::PI).ln();
    assert!((k.log_density(&p) - want).abs() < 1e-12);
    assert!(kde_fit(&DMatrix::zeros(0, 2)).is_err());
}

#[test]
fn kde_sym_kl_properties() {
    let mut r = rng::seeded(7);
    let grid = IntegrationGrid::tensor(&Domain::cube(2, 5.0).unwrap(), 48).unwrap();
    let a = kde_fit(&randn(&mut r, 40, 2)).unwrap();
    let mut shifted = randn(&mut r, 40, 2);
    shifted.column_mut(0).add_scalar_mut(1.5);
    let b = kde_fit(&shifted).unwrap();
    assert!(kde_sym_kl(&a, &a, &grid).unwrap() < 1e-8);
    let ab = kde_sym_kl(&a, &b, &grid).unwrap();
    assert!(ab > 0.5);
    assert!((ab - kde_sym_kl(&b, &a, &grid).unwrap()).abs() < 1e-12);
    let grid3 = IntegrationGrid::tensor(&Domain::cube(3, 5.0).unwrap(), 4).unwrap();
    assert!(kde_sym_kl(&a, &b, &grid3).is_err());
    let m = kde_sym_kl_matrix(&[a.clone(), b.clone()], &grid).unwrap();
    assert_eq!(m[(0, 0)], 0.0);
    assert!((m[(0, 1)] - ab).abs() < 1e-12);
}

fn densities(m: usize, count: usize, seed: u64) -> (Vec<MEDensity>, FeatureGrid) {
    let basis = BasisSpec::new(2, m, 3).unwrap();
    let grid = IntegrationGrid::tensor(&Domain::cube(2, 2.0).unwrap(), 24).unwrap();
    let fg = FeatureGrid::new(&basis, &grid).unwrap();
    let mut r = rng::seeded(seed);
    let ds = (0..count)
        .map(|i| {
            let l = randn(&mut r, m, 1).column(0) * 0.8;
            MEDensity::from_lambda(format!("d{i}"), l, &fg).unwrap()
        })
        .collect();
    (ds, fg)
}

#[test]
fn kernel_matrix_properties() {
    let (ds, _) = densities(6, 5, 8);
    let set = BagSet::Densities(&ds);
    let dist = distance_matrix(&set, DistanceKind::KlCmen).unwrap();
    let k = kernel_matrix(&set, DistanceKind::KlMde, 0.7).unwrap();
    for i in 0..5 {
        assert_eq!(k[(i, i)], 1.0);
        for j in 0..5 {
            assert_eq!(k[(i, j)], k[(j, i)]);
            assert!(k[(i, j)] > 0.0 && k[(i, j)] <= 1.0);
            assert!((k[(i, j)] - (-0.7 * dist[(i, j)]).exp()).abs() < 1e-15);
            let want = maxent::sym_kl(&ds[i], &ds[j]).unwrap().max(0.0);
            assert!((dist[(i, j)] - want).abs() < 1e-12);
        }
    }
    let sharp = kernel_from_distances(&dist, 1e6).unwrap();
    assert!((sharp.clone() - DMatrix::identity(5, 5)).amax() < 1e-12);
    for g in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(kernel_from_distances(&dist, g).is_err());
    }
    let bags = vec![DMatrix::zeros(2, 2)];
    assert!(distance_matrix(&BagSet::Instances(&bags), DistanceKind::KlCmen).is_err());
    assert!(distance_matrix(&set, DistanceKind::Hausdorff).is_err());
    let same = vec![
        DMatrix::from_element(3, 2, 1.0),
        DMatrix::from_element(3, 2, 1.0),
    ];
    let hk = kernel_matrix(&BagSet::Instances(&same), DistanceKind::Hausdorff, 2.0).unwrap();
    assert_eq!(hk, DMatrix::from_element(2, 2, 1.0));
}

#[test]
fn citation_knn_reduces_to_nearest_neighbor() {
    let mut r = rng::seeded(9);
    let pts = randn(&mut r, 12, 2);
    let train_labels: Vec<String> = (0..12).map(|i| format!("l{}", i % 3)).collect();
    let train_dist = DMatrix::from_fn(12, 12, |i, j| (pts.row(i) - pts.row(j)).norm());
    let cfg = CitationKnnConfig { k: 1, k_prime: 0 };
    for _ in 0..20 {
        let q = randn(&mut r, 1, 2);
        let dq: Vec<f64> = (0..12).map(|i| (pts.row(i) - &q).norm()).collect();
        let nearest = (0..12).min_by(|&a, &b| dq[a].total_cmp(&dq[b])).unwrap();
        let got = citation_knn(&train_labels, &train_dist, &dq, &cfg).unwrap();
        assert_eq!(got, train_labels[nearest]);
    }
    // a query identical to a training bag takes its label
    let dq: Vec<f64> = (0..12).map(|i| train_dist[(4, i)]).collect();
    let cfg = CitationKnnConfig { k: 1, k_prime: 1 };
    assert_eq!(
        citation_knn(&train_labels, &train_dist, &dq, &cfg).unwrap(),
        "l1"
    );
}

#[test]
fn citation_knn_hand_built() {
    // Points on a line: A at 0 (label x), B at 1 (y), C at 5 (y); query at 2.
    // k = 1 reference: B. With k' = 1, citers are bags whose nearest
    // neighbor in {others, query} is the query: B (query at 1, A at 1 does
    // not beat it strictly) and C (query at 3 < B at 4). A's nearest is B
    // at 1 < 2. Votes: y ×3, so y.
    let train_labels = labels(&["x", "y", "y"]);
    let pos = [0.0, 1.0, 5.0];
    let td = DMatrix::from_fn(3, 3, |i, j| f64::abs(pos[i] - pos[j]));
    let dq: Vec<f64> = pos.iter().map(|p| f64::abs(p - 2.0)).collect();
    let cfg = CitationKnnConfig { k: 1, k_prime: 1 };
    assert_eq!(citation_knn(&train_labels, &td, &dq, &cfg).unwrap(), "y");

    // Query at -0.9: reference A (x). Citers with k' = 1: A (query 0.9 <
    // B at 1); B's nearest is A (1 < 1.9); C's nearest is B. Votes: x ×2.
    let dq: Vec<f64> = pos.iter().map(|p| f64::abs(p + 0.9)).collect();
    assert_eq!(citation_knn(&train_labels, &td, &dq, &cfg).unwrap(), "x");

    // Tie on counts: k = 2 references A and B, no citers; equal counts fall
    // to the smaller summed distance (A at 0.4 beats B at 0.6).
    let dq = vec![0.4, 0.6, 4.6];
    let cfg = CitationKnnConfig { k: 2, k_prime: 0 };
    assert_eq!(citation_knn(&train_labels, &td, &dq, &cfg).unwrap(), "x");
    // exact tie: lexicographic
    let dq = vec![0.5, 0.5, 4.5];
    assert_eq!(citation_knn(&train_labels, &td, &dq, &cfg).unwrap(), "x");
}

#[test]
fn citation_knn_errors() {
    let l = labels(&["a", "b"]);
    let td = DMatrix::zeros(2, 2);
    let cfg = CitationKnnConfig { k: 3, k_prime: 0 };
    assert!(citation_knn(&l, &td, &[0.0, 1.0], &cfg).is_err());
    let cfg = CitationKnnConfig { k: 0, k_prime: 0 };
    assert!(citation_knn(&l, &td, &[0.0, 1.0], &cfg).is_err());
    let cfg = CitationKnnConfig::default();
    assert!(citation_knn(&[], &DMatrix::zeros(0, 0), &[], &cfg).is_err());
    let cfg = CitationKnnConfig { k: 1, k_prime: 0 };
    assert!(citation_knn(&l, &td, &[0.0], &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn citation_knn_ignores_train_order(seed in 0u64..1000, k in 1usize..6, kp in 0usize..6) {
        let mut r = rng::seeded(seed);
        let n = 9;
        let pts = randn(&mut r, n, 2);
        let lab: Vec<String> = (0..n).map(|i| format!("c{}", i % 3)).collect();
        let td = DMatrix::from_fn(n, n, |i, j| (pts.row(i) - pts.row(j)).norm());
        let q = randn(&mut r, 1, 2);
        let dq: Vec<f64> = (0..n).map(|i| (pts.row(i) - &q).norm()).collect();
        let cfg = CitationKnnConfig { k, k_prime: kp };
        let want = citation_knn(&lab, &td, &dq, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let lab_p: Vec<String> = perm.iter().map(|&i| lab[i].clone()).collect();
        let td_p = DMatrix::from_fn(n, n, |i, j| td[(perm[i], perm[j])]);
        let dq_p: Vec<f64> = perm.iter().map(|&i| dq[i]).collect();
        prop_assert_eq!(citation_knn(&lab_p, &td_p, &dq_p, &cfg).unwrap(), want);
    }

    #[test]
    fn hausdorff_symmetric_nonnegative(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let a = randn(&mut r, 4, 2);
        let b = randn(&mut r, 6, 2);
        let ab = avg_hausdorff(&a, &b).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert_eq!(ab, avg_hausdorff(&b, &a).unwrap());
    }
}

#[test]
fn stratified_folds_partition() {
    let l: Vec<String> = (0..23)
        .map(|i| if i % 3 == 0 { "a" } else { "b" }.to_string())
        .collect();
    let folds = stratified_folds(&l, 5, 3).unwrap();
    assert_eq!(folds.len(), 23);
    let mut sizes = [0usize; 5];
    let mut per_class = [[0usize; 5]; 2];
    for (i, &f) in folds.iter().enumerate() {
        sizes[f] += 1;
        per_class[usize::from(l[i] == "b")][f] += 1;
    }
    assert!(sizes.iter().all(|&s| s == 4 || s == 5));
    for counts in per_class {
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }
    assert_eq!(folds, stratified_folds(&l, 5, 3).unwrap());
    assert!(stratified_folds(&l, 0, 0).is_err());
    assert!(stratified_folds(&l, 24, 0).is_err());
}

#[test]
fn kfold_majority_classifier() {
    let bags: Vec<LabeledBag> = (0..20)
        .map(|i| {
            let label = if i < 14 { "major" } else { "minor" };
            bag(
                &format!("b{i}"),
                label,
                DMatrix::from_element(2, 1, i as f64),
            )
        })
        .collect();
    let data = LabeledBagDataset::new(bags).unwrap();
    let res = kfold_evaluate_with(&data, 10, 4, |_, test| {
        Ok(vec!["major".to_string(); test.len()])
    })
    .unwrap();
    assert_eq!(res.predictions.len(), 20);
    let seen: BTreeSet<&str> = res.predictions.iter().map(|p| p.bag_id.as_str()).collect();
    assert_eq!(seen.len(), 20);
    let correct = res
        .predictions
        .iter()
        .filter(|p| p.truth == p.predicted)
        .count();
    assert_eq!(correct, 14);
    // equal-sized folds, so the fold mean is the overall accuracy
    assert!((res.mean_accuracy - 0.7).abs() < 1e-12);
    assert_eq!(res.fold_accuracies.len(), 10);

    let err = kfold_evaluate_with(&data, 10, 4, |_, _| Ok(vec![]));
    assert!(err.is_err());
}

#[test]
fn kfold_warns_on_missing_class() {
    let bags: Vec<LabeledBag> = (0..6)
        .map(|i| {
            let label = if i == 0 { "rare" } else { "common" };
            bag(
                &format!("b{i}"),
                label,
                DMatrix::from_element(2, 1, i as f64),
            )
        })
        .collect();
    let data = LabeledBagDataset::new(bags).unwrap();
    let res = kfold_evaluate_with(&data, 3, 0, |_, test| {
        Ok(vec!["common".to_string(); test.len()])
    })
    .unwrap();
    assert_eq!(res.warnings.len(), 1);
    assert!(res.warnings[0].contains("rare"));
    assert_eq!(res.fold_accuracies.len(), 3);
}

#[test]
fn hausdorff_pipeline_separates_blobs() {
    let data = blobs(20, 15, 4.0, 10);
    let cfg = PipelineConfig {
        distance: DistanceKind::Hausdorff,
        knn: CitationKnnConfig { k: 3, k_prime: 3 },
        ..PipelineConfig::default()
    };
    let a = kfold_evaluate(&data, 5, &cfg, 1).unwrap();
    assert!(a.mean_accuracy >= 0.95, "{}", a.mean_accuracy);
    let b = kfold_evaluate(&data, 5, &cfg, 1).unwrap();
    assert_eq!(a, b);
}

fn small_maxent_cfg(distance: DistanceKind) -> PipelineConfig {
    PipelineConfig {
        distance,
        m: 8,
        points_per_axis: 24,
        knn: CitationKnnConfig { k: 3, k_prime: 3 },
        ..PipelineConfig::default()
    }
}

#[test]
fn maxent_and_kde_pipelines_classify() {
    let data = blobs(16, 60, 3.0, 11);
    for kind in [
        DistanceKind::KlMde,
        DistanceKind::KlKde,
        DistanceKind::KlCmen,
    ] {
        let res = kfold_evaluate(&data, 4, &small_maxent_cfg(kind), 2).unwrap();
        assert!(
            res.mean_accuracy >= 0.85,
            "{}: {}",
            kind.name(),
            res.mean_accuracy
        );
    }
}

#[test]
fn classifier_exposes_training_state() {
    let data = blobs(8, 40, 3.0, 12);
    let clf = BagClassifier::fit(&data, &small_maxent_cfg(DistanceKind::KlMde)).unwrap();
    assert_eq!(clf.labels().len(), 8);
    assert_eq!(clf.densities().unwrap().len(), 8);
    let d = clf.train_distances();
    for i in 0..8 {
        assert_eq!(d[(i, i)], 0.0);
    }
    // a training bag sits at its own density up to the refit
    let dq = clf.distances_to("q", &data.bags[5].instances).unwrap();
    let nearest = (0..8).min_by(|&a, &b| dq[a].total_cmp(&dq[b])).unwrap();
    assert_eq!(nearest, 5);
    assert!(clf.distances_to("q", &DMatrix::zeros(0, 2)).is_err());
    assert!(clf.distances_to("q", &DMatrix::zeros(3, 3)).is_err());

    let h = BagClassifier::fit(&data, &small_maxent_cfg(DistanceKind::Hausdorff)).unwrap();
    assert!(h.densities().is_none());
}

#[test]
fn predictions_invariant_to_instance_scale() {
    let data = blobs(12, 50, 3.0, 13);
    let scaled = LabeledBagDataset::new(
        data.bags
            .iter()
            .map(|b| LabeledBag {
                instances: &b.instances * 37.5,
                ..b.clone()
            })
            .collect(),
    )
    .unwrap();
    for kind in [DistanceKind::KlMde, DistanceKind::Hausdorff] {
        let cfg = small_maxent_cfg(kind);
        let a = kfold_evaluate(&data, 3, &cfg, 5).unwrap();
        let b = kfold_evaluate(&scaled, 3, &cfg, 5).unwrap();
        let pa: Vec<&str> = a.predictions.iter().map(|p| p.predicted.as_str()).collect();
        let pb: Vec<&str> = b.predictions.iter().map(|p| p.predicted.as_str()).collect();
        assert_eq!(pa, pb, "{}", kind.name());
    }
}

#[test]
fn pipeline_config_serde() {
    let cfg = PipelineConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: PipelineConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: PipelineConfig =
        serde_json::from_str(r#"{"distance":"kl-kde","pca_dim":3}"#).unwrap();
    assert_eq!(partial.distance, DistanceKind::KlKde);
    assert_eq!(partial.pca_dim, Some(3));
    assert!(serde_json::from_str::<PipelineConfig>(r#"{"gamma":1}"#).is_err());
}
