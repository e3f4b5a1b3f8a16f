use hilearn::datagen::*;
use hilearn::dataset::{DomainDataset, LabelLevel};
use hilearn::hierarchy::HierarchyMap;
use proptest::prelude::*;

fn class_stats(ds: &DomainDataset, class: usize, coord: usize) -> (f64, usize) {
    let vals: Vec<f64> = (0..ds.len())
        .filter(|&i| ds.labels[i] == class)
        .map(|i| ds.inputs.get(i, coord))
        .collect();
    (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
}

#[test]
fn syn2_class_ten_mean_at_e20() {
    let ds = gen_syn2(20.0, 20000, 3).unwrap();
    let (mean, n) = class_stats(&ds, 9, 1);
    assert!((mean - 100.0).abs() < 3.0 * 30.0 / (n as f64).sqrt(), "{mean} from {n}");
}

#[test]
fn syn2_zero_domain_has_centred_second_coordinate() {
    let ds = gen_syn2(0.0, 20000, 4).unwrap();
    for class in 0..10 {
        let (mean, n) = class_stats(&ds, class, 1);
        assert!(mean.abs() < 3.0 * 30.0 / (n as f64).sqrt(), "class {class}: {mean}");
    }
}

#[test]
fn syn1_class_means_follow_the_domain() {
    let e = 50.0;
    let ds = gen_syn1(e, 6000, 5).unwrap();
    for (class, want) in [(0, [0.0, e]), (1, [30.0, -4.0 * e]), (2, [-30.0, -e])] {
        for coord in 0..2 {
            let (mean, n) = class_stats(&ds, class, coord);
            assert!((mean - want[coord]).abs() < 3.0 * 10.0 / (n as f64).sqrt());
        }
    }
}

#[test]
fn labels_are_roughly_uniform() {
    let ds = gen_syn2(5.0, 10000, 6).unwrap();
    // Chi-square with 9 degrees of freedom; 27.88 is the 0.999 quantile.
    let expected = 1000.0;
    let chi: f64 = (0..10)
        .map(|c| {
            let obs = ds.labels.iter().filter(|&&l| l == c).count() as f64;
            (obs - expected).powi(2) / expected
        })
        .sum();
    assert!(chi < 27.88, "chi-square {chi}");
}

#[test]
fn coarsening_maps_labels_and_keeps_inputs() {
    let ds = gen_syn2(1.0, 200, 7).unwrap();
    let h = syn2_hierarchy();
    let c = coarsen_dataset(&ds, &h).unwrap();
    assert_eq!(c.level, LabelLevel::Coarse);
    assert_eq!(c.inputs, ds.inputs);
    for (f, z) in ds.labels.iter().zip(&c.labels) {
        assert_eq!(*z, f % 2);
    }
    // 1-based class 5 is odd.
    assert_eq!(h.coarsen(4).unwrap(), 0);
    assert_eq!(h.coarsen(5).unwrap(), 1);
    let id = coarsen_dataset(&ds, &HierarchyMap::identity(10).unwrap()).unwrap();
    assert_eq!(id.labels, ds.labels);
    assert!(coarsen_dataset(&c, &h).is_err());
}

#[test]
fn zero_samples_are_rejected() {
    assert!(gen_syn1(0.0, 0, 1).is_err());
}

#[test]
fn gen_request_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let req = GenRequest {
        which: Benchmark::Syn1,
        seed: 10,
        out_dir: dir.path().join("data"),
        domains: vec![
            GenDomain {
                e: 50.0,
                sample_count: 30,
                level: LabelLevel::Fine,
            },
            GenDomain {
                e: -100.0,
                sample_count: 20,
                level: LabelLevel::Coarse,
            },
        ],
    };
    let manifest = req.run().unwrap();
    assert_eq!(manifest.hierarchy, syn1_hierarchy());
    assert_eq!(manifest.domains.len(), 2);
    let on_disk: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    let first = load_csv(&dir.path().join("data").join(&manifest.domains[0].path)).unwrap();
    assert_eq!(first, gen_syn1(50.0, 30, 10).unwrap());
    let second = load_csv(&dir.path().join("data").join(&manifest.domains[1].path)).unwrap();
    assert_eq!(second.level, LabelLevel::Coarse);
    assert_eq!(second, coarsen_dataset(&gen_syn1(-100.0, 20, 11).unwrap(), &syn1_hierarchy()).unwrap());
}

#[test]
fn csv_rejects_empty_and_nan_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_csv(&empty).is_err());
    let nan = dir.path().join("nan.csv");
    std::fs::write(&nan, "x1,x2,y,domain,level\n1.0,NaN,0,e=0,fine\n").unwrap();
    assert!(load_csv(&nan).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_is_lossless(e in -100.0f64..100.0, n in 1usize..40, seed in any::<u64>(), coarse in any::<bool>()) {
        let mut ds = gen_syn2(e, n, seed).unwrap();
        if coarse {
            ds = coarsen_dataset(&ds, &syn2_hierarchy()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        prop_assert_eq!(load_csv(&path).unwrap(), ds);
    }

    #[test]
    fn generation_depends_only_on_its_arguments(e in -50.0f64..50.0, n in 1usize..100, seed in any::<u64>()) {
        prop_assert_eq!(gen_syn1(e, n, seed).unwrap(), gen_syn1(e, n, seed).unwrap());
        let spec = SynSpec { which: Benchmark::Syn2, e, sample_count: n, seed };
        prop_assert_eq!(spec.generate().unwrap(), gen_syn2(e, n, seed).unwrap());
    }
}
