use hilearn::crossval::*;
use hilearn::datagen::{coarsen_dataset, gen_syn1, syn1_hierarchy};
use hilearn::dataset::{DomainDataset, LabelLevel};
use hilearn::diffcore::Tensor;
use hilearn::hierarchy::HierarchyMap;
use hilearn::models::{Architecture, ModelBundle};
use hilearn::objective::{BatchMode, TrainConfig};
use hilearn::theory::random_hierarchy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    Tensor::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect())
}

/// A bundle whose target head outputs a fixed distribution: every weight is
/// zero and the last bias holds the logits.
fn constant_bundle(probs: &[f64], coarse: usize) -> ModelBundle {
    let arch = Architecture::new(1, vec![], None, probs.len(), coarse).unwrap();
    let mut b = ModelBundle::zeros(arch);
    let n = b.theta.len();
    let k = probs.len();
    for (i, p) in probs.iter().enumerate() {
        b.theta.values_mut()[n - k + i] = p.ln();
    }
    b
}

fn fine(labels: Vec<usize>) -> DomainDataset {
    let n = labels.len();
    DomainDataset::new("t", LabelLevel::Fine, Tensor::zeros(n, 1), labels).unwrap()
}

fn coarse(name: &str, labels: Vec<usize>) -> DomainDataset {
    let n = labels.len();
    DomainDataset::new(name, LabelLevel::Coarse, Tensor::zeros(n, 1), labels).unwrap()
}

#[test]
fn empirical_identity_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let fine_count = rng.random_range(2..=6);
        let coarse_count = rng.random_range(2..=fine_count);
        let h = random_hierarchy(&mut rng, fine_count, coarse_count);
        let n = rng.random_range(5..40);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..fine_count)).collect();
        let data = DomainDataset::new("t", LabelLevel::Fine, random_inputs(&mut rng, n, 2), labels).unwrap();
        let arch = Architecture::new(2, vec![5], Some(2), fine_count, coarse_count).unwrap();
        let bundle = ModelBundle::init(arch, trial);
        let as_coarse = coarsen_dataset(&data, &h).unwrap();
        let mut rhs = coarse_risk_via_target(&as_coarse, &bundle, &h).unwrap();
        for z in h.ambiguous_labels() {
            let prior = coarse_prior(&as_coarse, z);
            if prior > 0.0 {
                rhs += prior * correction_term(&data, &bundle, &h, z).unwrap();
            }
        }
        let lhs = fine_risk(&data, &bundle).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "trial {trial}: {lhs} vs {rhs}");
    }
}

#[test]
fn correction_term_examples() {
    let h = HierarchyMap::new(vec![0, 1, 1]).unwrap();
    // Renormalized probabilities over {1, 2} are 0.6 and 0.4.
    let b = constant_bundle(&[0.5, 0.3, 0.2], 2);
    let c = correction_term(&fine(vec![1, 2]), &b, &h, 1).unwrap();
    assert!((c - (-(0.6f64.ln() + 0.4f64.ln()) / 2.0)).abs() < 1e-12);
    assert!((c - 0.713558).abs() < 1e-6);

    let uniform = constant_bundle(&[1.0 / 3.0; 3], 2);
    let c = correction_term(&fine(vec![1, 2, 2]), &uniform, &h, 1).unwrap();
    assert!((c - 2f64.ln()).abs() < 1e-12);

    let sure = constant_bundle(&[0.5, 0.5 - 1e-300, 1e-300], 2);
    assert!(correction_term(&fine(vec![1, 1]), &sure, &h, 1).unwrap().abs() < 1e-12);

    assert!(correction_term(&fine(vec![0, 0]), &b, &h, 1).is_err());
}

#[test]
fn fold_estimate_examples() {
    let bij = HierarchyMap::new(vec![1, 0, 2]).unwrap();
    let b = constant_bundle(&[0.2, 0.5, 0.3], 3);
    let target = fine(vec![0, 1, 2, 1]);
    let ad = vec![coarse("a", vec![0, 1, 1]), coarse("b", vec![2, 2, 0])];
    let priors: Vec<Vec<f64>> = ad.iter().map(|d| coarse_priors(d, 3)).collect();
    let view = FoldView {
        target: &target,
        ad: &ad,
        priors: &priors,
        hierarchy: &bij,
        full_target: &target,
    };
    let mut w = Vec::new();
    let one = fold_ood_estimate(&b, Method::I, &view, &mut w).unwrap();
    let two = fold_ood_estimate(&b, Method::II, &view, &mut w).unwrap();
    assert_eq!(one, two);

    // Only the target domain.
    let h = HierarchyMap::new(vec![0, 1, 1]).unwrap();
    let view = FoldView {
        target: &target,
        ad: &[],
        priors: &[],
        hierarchy: &h,
        full_target: &target,
    };
    let want = fine_risk(&target, &b).unwrap();
    for m in [Method::I, Method::II] {
        assert_eq!(fold_ood_estimate(&b, m, &view, &mut w).unwrap().value, want);
    }
}

#[test]
fn method_two_matches_the_identity_on_a_toy() {
    let h = HierarchyMap::new(vec![0, 1, 1]).unwrap();
    let probs = [0.2, 0.5, 0.3];
    let b = constant_bundle(&probs, 2);
    let target = fine(vec![0, 1, 2, 2, 1]);
    // The auxiliary domain is a fine sample seen through g.
    let ad_fine = vec![1, 2, 2, 0, 2, 1, 1];
    let ad = vec![coarse("a", ad_fine.iter().map(|&y| h.table()[y]).collect())];
    let priors = vec![coarse_priors(&ad[0], 2)];
    let view = FoldView {
        target: &target,
        ad: &ad,
        priors: &priors,
        hierarchy: &h,
        full_target: &target,
    };
    let mut w = Vec::new();
    let est = fold_ood_estimate(&b, Method::II, &view, &mut w).unwrap();
    // Direct computation: coarse risk of the auxiliary sample plus its share
    // of the ambiguous label times the target's renormalized NLL.
    let l = |p: f64| -p.ln();
    let ad_coarse = (1.0 * l(0.2) + 6.0 * l(0.8)) / 7.0;
    let c1 = (2.0 * l(0.5 / 0.8) + 2.0 * l(0.3 / 0.8)) / 4.0;
    let want_ad = ad_coarse + (6.0 / 7.0) * c1;
    let want_target = (l(0.2) + 2.0 * l(0.5) + 2.0 * l(0.3)) / 5.0;
    assert!((est.per_domain[0] - want_ad).abs() < 1e-12);
    assert!((est.per_domain[1] - want_target).abs() < 1e-12);
    assert!((est.value - want_ad.max(want_target)).abs() < 1e-12);
}

#[test]
fn degenerate_validation_fold_falls_back_to_the_full_target() {
    let h = HierarchyMap::new(vec![0, 1, 1]).unwrap();
    let b = constant_bundle(&[0.2, 0.5, 0.3], 2);
    let part = fine(vec![0, 0]);
    let full = fine(vec![0, 1, 2]);
    let ad = vec![coarse("a", vec![0, 1])];
    let priors = vec![coarse_priors(&ad[0], 2)];
    let view = FoldView {
        target: &part,
        ad: &ad,
        priors: &priors,
        hierarchy: &h,
        full_target: &full,
    };
    let mut w = Vec::new();
    assert!(fold_ood_estimate(&b, Method::II, &view, &mut w).is_ok());
    assert_eq!(w.len(), 1);
}

fn tiny_setup(max_epoch: usize) -> CvSetup {
    CvSetup {
        arch: Architecture::new(2, vec![6], Some(1), 3, 2).unwrap(),
        base: TrainConfig {
            learning_rate: 0.02,
            l2_coef: 0.01,
            max_epoch,
            t_threshold: 0,
            lambda_after: 0.0,
            batch_mode: BatchMode::Full,
            seed: 1,
            aux_coarse_weight: 0.0,
        },
        k: 3,
        fold_seed: 9,
    }
}

fn syn1_data(n: usize) -> (DomainDataset, Vec<DomainDataset>) {
    let h = syn1_hierarchy();
    let target = gen_syn1(50.0, n, 1).unwrap();
    let ad = [-100.0, 0.0, 100.0]
        .iter()
        .enumerate()
        .map(|(i, &e)| coarsen_dataset(&gen_syn1(e, n, 2 + i as u64).unwrap(), &h).unwrap())
        .collect();
    (target, ad)
}

#[test]
fn single_point_and_duplicate_grids() {
    let h = syn1_hierarchy();
    let (target, ad) = syn1_data(60);
    let data = CvData {
        target: &target,
        ad: &ad,
        hierarchy: &h,
    };
    let setup = tiny_setup(5);
    let one = grid(&[0], &[10.0]);
    let r = select_hyperparams(&one, &data, &setup, Method::I).unwrap();
    assert_eq!(r.selected, 0);
    assert_eq!(r.selected_point, one[0]);

    let dup = vec![one[0], one[0]];
    let r = select_hyperparams(&dup, &data, &setup, Method::II).unwrap();
    assert_eq!(r.scores[0], r.scores[1]);
    assert_eq!(r.selected, 0);
    assert!(!r.oracle_selection);
    assert!(select_hyperparams(&[], &data, &setup, Method::I).is_err());
}

#[test]
fn lodcv_scores_average_the_held_out_risks() {
    let h = syn1_hierarchy();
    let (target, mut ad) = syn1_data(40);
    ad.truncate(2);
    let data = CvData {
        target: &target,
        ad: &ad,
        hierarchy: &h,
    };
    let setup = tiny_setup(5);
    let g = grid(&[0], &[1.0, 100.0]);
    let r = lodcv_select(&g, &data, &setup).unwrap();
    for (i, score) in r.scores.iter().enumerate() {
        let per = &r.fold_risks[i][0];
        assert_eq!(per.len(), 2);
        assert!((score.unwrap() - (per[0] + per[1]) / 2.0).abs() < 1e-15);
    }
    let one_domain = &ad[..1];
    let data = CvData {
        target: &target,
        ad: one_domain,
        hierarchy: &h,
    };
    assert!(lodcv_select(&g, &data, &setup).is_err());
}

#[test]
fn tdv_picks_the_most_accurate_point_and_is_flagged() {
    let h = syn1_hierarchy();
    let (target, ad) = syn1_data(60);
    let data = CvData {
        target: &target,
        ad: &ad,
        hierarchy: &h,
    };
    let setup = tiny_setup(10);
    let g = grid(&[0, 5], &[1.0, 100.0]);
    let models = train_full_models(&g, &data, &setup);
    let test = gen_syn1(-50.0, 200, 77).unwrap();
    let r = tdv_select(&g, &models, &test).unwrap();
    assert!(r.oracle_selection);
    let accs: Vec<f64> = models.iter().map(|m| accuracy(m.as_ref().unwrap(), &test).unwrap()).collect();
    assert!(accs.iter().all(|&a| a <= accs[r.selected]));
}

#[test]
fn trcv_ties_go_to_the_first_grid_point() {
    // Two clusters far apart: every point reaches the same fold risks.
    let h = HierarchyMap::new(vec![0, 1, 1]).unwrap();
    let n = 30;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let label = i % 3;
        x.extend([label as f64 * 50.0, 0.0]);
        y.push(label);
    }
    let target = DomainDataset::new("t", LabelLevel::Fine, Tensor::from_vec(n, 2, x), y).unwrap();
    let ad: Vec<DomainDataset> = Vec::new();
    let data = CvData {
        target: &target,
        ad: &ad,
        hierarchy: &h,
    };
    let setup = tiny_setup(5);
    // Without auxiliary data the penalty is zero, so all points train alike.
    let g = grid(&[0], &[1.0, 10.0, 100.0]);
    let fm = train_fold_models(&g, &data, &setup).unwrap();
    let r = score_fold_models(SelectorKind::TrCv, &g, &data, &fm).unwrap();
    assert_eq!(r.scores[0], r.scores[2]);
    assert_eq!(r.selected, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kfold_is_a_balanced_partition(sizes in prop::collection::vec(10usize..60, 1..4), k in 2usize..10, seed in any::<u64>()) {
        let a = kfold_split(&sizes, k, seed).unwrap();
        prop_assert_eq!(&a, &kfold_split(&sizes, k, seed).unwrap());
        for (d, &n) in sizes.iter().enumerate() {
            let counts: Vec<usize> = (0..k).map(|f| a.held_out(d, f).len()).collect();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            for f in 0..k {
                let mut all = a.held_out(d, f);
                all.extend(a.complement(d, f));
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn priors_sum_to_one(labels in prop::collection::vec(0usize..4, 1..50)) {
        let d = coarse("a", labels);
        let total: f64 = coarse_priors(&d, 4).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmin_first_picks_the_earliest_minimum(scores in prop::collection::vec(prop::option::of(0u8..5), 1..10)) {
        let s: Vec<Option<f64>> = scores.iter().map(|o| o.map(f64::from)).collect();
        let want = scores
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|v| (v, i)))
            .min()
            .map(|(_, i)| i);
        prop_assert_eq!(argmin_first(&s), want);
    }
}
