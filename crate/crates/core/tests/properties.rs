use std::collections::BTreeSet;

use mom_core::anchors::{local_maxima, power_iteration, select_anchors, StationaryConfig};
use mom_core::diffusion::{dense_oracle, solve_column, solve_column_traced, DiffusionConfig};
use mom_core::eval::{mean_average_precision, nmi, recall_at_k};
use mom_core::features::{
    decode_features, encode_features, generate_synthetic, l2_normalize, pca_whiten_fit, FeatureSet, ManifoldKind,
    SyntheticSpec,
};
use mom_core::graph::{build_reciprocal_graph, knn_search, normalize, similarity_from_dot, OperatorKind};
use mom_core::trainer::{contrastive_loss, triplet_loss_with, EmbeddingModel, ModelKind, TripletForm};
use mom_core::Embeddings;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn unit_features(n: usize, d: usize, seed: u64) -> FeatureSet {
    let rows: Vec<Vec<f32>> = gaussian_rows(n, d, seed)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v as f32).collect())
        .collect();
    l2_normalize(&FeatureSet::from_rows(&rows).unwrap()).unwrap()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn tight(alpha: f64) -> DiffusionConfig {
    DiffusionConfig {
        alpha,
        tolerance: 1e-12,
        max_iterations: 2000,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn l2_normalize_is_idempotent(n in 1usize..40, d in 1usize..12, seed in any::<u64>()) {
        let rows: Vec<Vec<f32>> = gaussian_rows(n, d, seed)
            .into_iter()
            .map(|r| r.into_iter().map(|v| (v * 3.0) as f32).collect())
            .collect();
        let once = l2_normalize(&FeatureSet::from_rows(&rows).unwrap()).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() as f64 <= 1e-7);
        }
    }

    #[test]
    fn feature_files_round_trip_bitwise(n in 1usize..30, d in 1usize..8, seed in any::<u64>()) {
        let f = unit_features(n, d, seed).with_labels((0..n as i64).collect()).unwrap();
        let back = decode_features(&encode_features(&f)).unwrap();
        prop_assert_eq!(back.data(), f.data());
        prop_assert_eq!(back.dim(), f.dim());
    }

    #[test]
    fn synthetic_data_depends_only_on_spec_and_seed(seed in any::<u64>(), classes in 2usize..5) {
        let spec = SyntheticSpec::new(ManifoldKind::GaussianClusters, classes, 20, 8).noise(0.1);
        let a = generate_synthetic(&spec, seed).unwrap();
        let b = generate_synthetic(&spec, seed).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn graph_is_symmetric_without_self_loops(n in 5usize..80, k in 1usize..10, seed in any::<u64>()) {
        let f = unit_features(n, 6, seed);
        let g = build_reciprocal_graph(&f, k.min(n - 1)).unwrap();
        for i in 0..n {
            prop_assert_eq!(g.weight(i, i), 0.0);
            for (j, w) in g.neighbors(i) {
                prop_assert_eq!(g.weight(j, i), w);
            }
        }
    }

    #[test]
    fn knn_matches_exhaustive_scan(n in 2usize..120, k in 1usize..12, seed in any::<u64>()) {
        let f = unit_features(n, 5, seed);
        let k = k.min(n - 1);
        let got = knn_search(&f, k).unwrap();
        for (i, row) in got.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (-similarity_from_dot(f.dot(i, j)), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(row, &want);
        }
    }

    #[test]
    fn symmetric_operator_does_not_amplify(n in 5usize..80, seed in any::<u64>()) {
        let g = build_reciprocal_graph(&unit_features(n, 6, seed), 6.min(n - 1)).unwrap();
        let (op, _) = normalize(&g, OperatorKind::Symmetric);
        let mut x: Vec<f64> = gaussian_rows(1, n, seed ^ 1).remove(0);
        let mut y = vec![0.0; n];
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for _ in 0..50 {
            op.matvec(&x, &mut y);
            let (nx, ny) = (norm(&x), norm(&y));
            if nx == 0.0 {
                break;
            }
            prop_assert!(ny <= nx * (1.0 + 1e-9));
            x = y.iter().map(|v| v / ny.max(1e-300)).collect();
        }
    }

    #[test]
    fn cg_energy_error_is_non_increasing(n in 10usize..120, seed in any::<u64>(), a in 0usize..3) {
        // the 2-norm residual of CG may oscillate; the error in the norm of
        // the system matrix may not
        let alpha = [0.5, 0.9, 0.99][a];
        let g = build_reciprocal_graph(&unit_features(n, 6, seed), 8.min(n - 1)).unwrap();
        let (op, _) = normalize(&g, OperatorKind::Symmetric);
        let anchor = seed as usize % n;
        let exact: Vec<f64> = dense_oracle(&op, alpha).unwrap().iter().map(|row| row[anchor]).collect();
        let (_, history) = solve_column_traced(&op, anchor, &tight(alpha)).unwrap();
        let mut last = f64::INFINITY;
        let mut m_e = vec![0.0; n];
        for t in 1..=history.len() {
            let cfg = DiffusionConfig { alpha, tolerance: 1e-300, max_iterations: t };
            let col = solve_column(&op, anchor, &cfg).unwrap();
            let e: Vec<f64> = col.values.iter().zip(&exact).map(|(x, y)| x - y).collect();
            op.matvec(&e, &mut m_e);
            let energy: f64 = e.iter().zip(&m_e).map(|(ei, mi)| ei * (ei - alpha * mi)).sum();
            prop_assert!(energy <= last * (1.0 + 1e-9) + 1e-24, "energy grew {last} -> {energy} at {t}");
            last = energy;
        }
    }

    #[test]
    fn diffusion_columns_are_non_negative(n in 10usize..150, seed in any::<u64>()) {
        let g = build_reciprocal_graph(&unit_features(n, 6, seed), 8.min(n - 1)).unwrap();
        let (op, _) = normalize(&g, OperatorKind::Symmetric);
        for i in 0..n.min(10) {
            let (col, _) = solve_column_traced(&op, i, &DiffusionConfig::default()).unwrap();
            if col.converged {
                prop_assert!(col.values.iter().all(|&v| v >= -1e-10));
            }
        }
    }

    #[test]
    fn degree_weighted_mass_is_conserved(n in 10usize..150, seed in any::<u64>()) {
        // sqrt(d) is a fixed point of the symmetric operator, so
        // sum_j sqrt(d_j) f_i(j) = sqrt(d_i) on the anchor's component
        let g = build_reciprocal_graph(&unit_features(n, 6, seed), 8.min(n - 1)).unwrap();
        let (op, _) = normalize(&g, OperatorKind::Symmetric);
        let d = g.degrees();
        for i in 0..n.min(10) {
            let (col, _) = solve_column_traced(&op, i, &tight(0.99)).unwrap();
            let mass: f64 = col.values.iter().zip(d).map(|(f, dj)| f * dj.sqrt()).sum();
            if d[i] > 0.0 {
                prop_assert!((mass - d[i].sqrt()).abs() <= 1e-8 * d[i].sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn anchors_are_undominated_and_repeatable(n in 10usize..120, seed in any::<u64>(), count in 1usize..20) {
        let g = build_reciprocal_graph(&unit_features(n, 4, seed), 6.min(n - 1)).unwrap();
        let (p, _) = normalize(&g, OperatorKind::Stochastic);
        let Ok(stat) = power_iteration(&p, &StationaryConfig::default()) else { return Ok(()) };
        let set = select_anchors(&g, &stat.pi, count).unwrap();
        prop_assert_eq!(&set, &select_anchors(&g, &stat.pi, count).unwrap());
        prop_assert!(set.len() <= count);
        let maxima: BTreeSet<usize> = local_maxima(&g, &stat.pi).unwrap().into_iter().collect();
        for &a in &set.anchor_ids {
            prop_assert!(maxima.contains(&a));
            for (j, _) in g.neighbors(a) {
                prop_assert!(stat.pi[j] <= stat.pi[a]);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), margin in 0.01f64..2.0) {
        let rows = gaussian_rows(3, 5, seed);
        let (r, p, n) = (unit(rows[0].clone()), unit(rows[1].clone()), unit(rows[2].clone()));
        prop_assert!(contrastive_loss(&r, &p, &n, margin).loss >= 0.0);
        prop_assert!(triplet_loss_with(&r, &p, &n, margin, TripletForm::Standard).loss >= 0.0);
        prop_assert!(triplet_loss_with(&r, &p, &n, margin, TripletForm::Literal).loss >= 0.0);
    }

    #[test]
    fn contrastive_hinge_is_flat_beyond_margin(seed in any::<u64>(), shift in -0.05f64..0.05) {
        // negative farther than the margin: moving it slightly changes nothing
        let rows = gaussian_rows(2, 4, seed);
        let r = unit(rows[0].clone());
        let p = unit(rows[1].clone());
        let n: Vec<f64> = r.iter().map(|v| -v).collect();
        let n2 = unit(n.iter().enumerate().map(|(i, v)| v + if i == 0 { shift } else { 0.0 }).collect());
        let margin = 0.7;
        prop_assume!(dist(&r, &n2) > margin + 0.1);
        let a = contrastive_loss(&r, &p, &n, margin);
        let b = contrastive_loss(&r, &p, &n2, margin);
        prop_assert_eq!(a.loss, b.loss);
        prop_assert!(a.negative.iter().chain(&b.negative).all(|&g| g == 0.0));
    }

    #[test]
    fn model_outputs_stay_unit_norm(seed in any::<u64>(), mlp in any::<bool>()) {
        let kind = if mlp { ModelKind::Mlp } else { ModelKind::Linear };
        let m = EmbeddingModel::random(kind, 7, 3, 9, seed).unwrap();
        for x in gaussian_rows(20, 7, seed ^ 7) {
            if let Ok(z) = m.forward(&x) {
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn nmi_is_symmetric_and_label_agnostic(
        a in prop::collection::vec(0i64..5, 2..60),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<i64> = a.iter().map(|_| rng.random_range(0..4)).collect();
        prop_assert_eq!(nmi(&a, &b).unwrap(), nmi(&b, &a).unwrap());
        // relabel b by a fixed permutation of its ids
        let perm = [3i64, 0, 2, 1];
        let b2: Vec<i64> = b.iter().map(|&x| perm[x as usize] + 10).collect();
        prop_assert_eq!(nmi(&a, &b).unwrap(), nmi(&a, &b2).unwrap());
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn recall_is_monotone_in_k(n in 4usize..40, seed in any::<u64>()) {
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        let emb = Embeddings::from_rows(&gaussian_rows(n, 3, seed));
        let ks: Vec<usize> = (1..n).collect();
        let r = recall_at_k(&emb, &labels, &ks).unwrap();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn map_is_invariant_under_rotation(n in 4usize..40, d in 2usize..6, seed in any::<u64>()) {
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        let rows = gaussian_rows(n, d, seed);
        let q = DMatrix::from_fn(d, d, |i, j| gaussian_rows(d, d, seed ^ 3)[i][j]).qr().q();
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| (0..d).map(|i| (0..d).map(|j| q[(i, j)] * r[j]).sum()).collect())
            .collect();
        let a = mean_average_precision(&Embeddings::from_rows(&rows), &labels).unwrap();
        let b = mean_average_precision(&Embeddings::from_rows(&rotated), &labels).unwrap();
        prop_assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn whitening_gives_identity_covariance() {
    let f = unit_features(400, 6, 5);
    let w = pca_whiten_fit(&f, 4, 1e-9).unwrap();
    let out = w.apply(&f).unwrap();
    let (n, d) = (out.len(), out.dim());
    for a in 0..d {
        for b in 0..d {
            let cov: f64 = (0..n).map(|i| out.row(i)[a] as f64 * out.row(i)[b] as f64).sum::<f64>() / (n - 1) as f64;
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((cov - want).abs() <= 1e-3, "cov[{a}][{b}] = {cov}");
        }
    }
}

/// Fraction of positives sharing the anchor's label and of negatives not
/// sharing it, pooled over every anchor.
fn purity(seed: u64) -> (f64, f64) {
    let cfg = mom_core::config::RunConfig::from_json(
        &serde_json::json!({
            "seed": seed, "data.kind": "gaussian-clusters", "data.classes": 4, "data.per_class": 60,
            "data.noise": 0.35, "graph.k": 30, "diffusion.alpha": 0.9, "anchors.mode": "all",
        })
        .to_string(),
    )
    .unwrap();
    let raw = mom_core::pipeline::load_data(&cfg).unwrap();
    let labels = raw.labels().unwrap().to_vec();
    let features = mom_core::pipeline::prepare_features(&raw, &cfg).unwrap();
    let round = mom_core::pipeline::mine_round(&features, None, &cfg).unwrap();
    let (mut pos, mut pos_ok, mut neg, mut neg_ok) = (0, 0, 0, 0);
    for p in &round.pool.pools {
        pos += p.positives.len();
        pos_ok += p.positives.iter().filter(|x| labels[x.0] == labels[p.anchor]).count();
        neg += p.negatives.len();
        neg_ok += p.negatives.iter().filter(|x| labels[x.0] != labels[p.anchor]).count();
    }
    (pos_ok as f64 / pos as f64, neg_ok as f64 / neg as f64)
}

// Thresholds frozen from the first measured run (0.67-0.76 and 0.84-0.87).
// Random negatives on four balanced classes are pure 75% of the time.
#[test]
fn mined_pools_are_mostly_pure_on_clusters() {
    for seed in 1..=4 {
        let (p, n) = purity(seed);
        assert!(p >= 0.60, "seed {seed}: positive purity {p:.3}");
        assert!(n >= 0.80, "seed {seed}: negative purity {n:.3}");
    }
}
