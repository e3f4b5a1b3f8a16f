use hilearn::diffcore::Tensor;
use hilearn::models::{Architecture, ModelBundle};
use proptest::prelude::*;

#[test]
fn checkpoint_survives_a_file_round_trip() {
    let arch = Architecture::new(2, vec![20, 20], Some(1), 3, 2).unwrap();
    let bundle = ModelBundle::init(arch, 42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.save_checkpoint(&path).unwrap();
    let back = ModelBundle::load_checkpoint(&path).unwrap();
    assert_eq!(back, bundle);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(ModelBundle::load_checkpoint(&path).is_err());
}

#[test]
fn syn1_architecture_has_a_scalar_feature() {
    let arch = Architecture::new(2, vec![20, 20], Some(1), 3, 2).unwrap();
    let bundle = ModelBundle::init(arch, 1);
    assert_eq!(bundle.feature_forward(&[3.0, -4.0]).unwrap().len(), 1);
    assert!(bundle.feature_forward(&[3.0]).is_err());
}

#[test]
fn predict_is_the_argmax_of_the_target_head() {
    let arch = Architecture::new(2, vec![5], None, 4, 2).unwrap();
    let bundle = ModelBundle::init(arch, 3);
    let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0], vec![-4.0, 0.1]]);
    let pred = bundle.predict(&x).unwrap();
    for (r, p) in pred.iter().enumerate() {
        let lp = bundle.target_log_probs(x.row(r)).unwrap();
        let best = (0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap();
        assert_eq!(*p, best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heads_output_distributions(
        seed in any::<u64>(),
        fine in 2usize..6,
        linear in any::<bool>(),
        x in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let coarse = 2 + (seed as usize % (fine - 1));
        let arch = Architecture::new(3, vec![7, 4], linear.then_some(2), fine, coarse).unwrap();
        let bundle = ModelBundle::init(arch, seed);
        let fine_lp = bundle.target_log_probs(&x).unwrap();
        let coarse_lp = bundle.coarse_log_probs(&x).unwrap();
        prop_assert_eq!(fine_lp.len(), fine);
        prop_assert_eq!(coarse_lp.len(), coarse);
        for lp in [fine_lp, coarse_lp] {
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
