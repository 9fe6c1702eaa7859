use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tvae_core::data::{
    generate_split, generate_synthetic, mask_labels, read_dataset, temporal_median_downsample, write_dataset, Dataset,
    Normalizer, PixelParcel, StatSeries, SyntheticConfig,
};
use tvae_core::Error;

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig { n_parcels: 60, timesteps: 12, num_classes: 3, seed, ..Default::default() }
}

#[test]
fn same_seed_gives_identical_datasets() {
    let a = generate_synthetic(&small(5)).unwrap();
    let b = generate_synthetic(&small(5)).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&small(6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn noiseless_parcels_of_a_class_are_identical() {
    let cfg = SyntheticConfig { noise_sigma: 0.0, parcel_jitter: 0.0, pixels_per_parcel: (1, 1), ..small(2) };
    let ds = generate_synthetic(&cfg).unwrap();
    let b = cfg.bands;
    let mut first: Vec<Option<&StatSeries>> = vec![None; cfg.num_classes];
    for r in &ds.records {
        for row in r.features.chunks_exact(2 * b) {
            assert!(row[b..].iter().all(|&s| s == 0.0));
        }
        let l = r.eval_label().unwrap();
        match first[l] {
            Some(f) => assert_eq!(f.features, r.features),
            None => first[l] = Some(r),
        }
    }
    assert!(first.iter().all(Option::is_some));
}

/// Least-squares one-vs-all fit on time-averaged features.
fn least_squares_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let f = train.features;
    let design = |ds: &Dataset| {
        let rows: Vec<f64> = ds
            .records
            .iter()
            .flat_map(|r| {
                let mut m = vec![0.0; f + 1];
                for row in r.features.chunks_exact(f) {
                    for (a, &v) in m.iter_mut().zip(row) {
                        *a += v as f64 / ds.timesteps as f64;
                    }
                }
                m[f] = 1.0;
                m
            })
            .collect();
        DMatrix::from_row_slice(ds.len(), f + 1, &rows)
    };
    let (x, xt) = (design(train), design(test));
    let k = train.num_classes;
    let mut y = DMatrix::zeros(train.len(), k);
    for (i, r) in train.records.iter().enumerate() {
        y[(i, r.eval_label().unwrap())] = 1.0;
    }
    let w = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
    let scores = xt * w;
    let hits = test
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            let row: DVector<f64> = scores.row(*i).transpose();
            row.argmax().0 == r.eval_label().unwrap()
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn default_task_is_linearly_separable() {
    let (train, test) = generate_split(&SyntheticConfig::default(), 500).unwrap();
    assert_eq!((train.len(), test.len(), train.num_classes, train.timesteps), (2000, 500, 5, 64));
    let acc = least_squares_accuracy(&train, &test);
    assert!(acc > 0.8, "accuracy {acc}");
}

#[test]
fn split_streams_are_disjoint() {
    let (train, test) = generate_split(&small(1), 30).unwrap();
    assert_eq!(test.len(), 30);
    assert!(test.records.iter().all(|t| train.records.iter().all(|r| r.features != t.features)));
    assert!(test.records.iter().all(|r| r.parcel_id >= 60));
}

#[test]
fn imbalanced_masking_keeps_rounded_fraction_per_class() {
    let mut ds = Dataset::new(1, 1, 3, Dataset::default_class_names(3));
    for (c, n) in [(0, 100), (1, 10), (2, 5)] {
        for i in 0..n {
            ds.records.push(StatSeries::new(i, vec![0.0], Some(c)));
        }
    }
    let masked = mask_labels(&ds, 0.2, 3).unwrap();
    let mut visible = [0; 3];
    for r in &masked.records {
        if let Some(l) = r.train_label() {
            visible[l] += 1;
        }
        assert!(r.eval_label().is_some());
    }
    assert_eq!(visible, [20, 2, 1]);
    assert_eq!(mask_labels(&ds, 1.0, 3).unwrap(), ds);
    assert_eq!(mask_labels(&ds, 0.2, 3).unwrap(), masked);
    for bad in [0.0, -0.1, 1.01] {
        assert!(matches!(mask_labels(&ds, bad, 0), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn truncated_file_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.sits");
    let ds = generate_synthetic(&small(3)).unwrap();
    write_dataset(&ds, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let record = 8 + 1 + 2 + 4 * ds.timesteps * ds.features;
    let cut = 21 + 2 * record + record / 2;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    match read_dataset(&path) {
        Err(Error::Format { message, .. }) => assert!(message.contains("record 2"), "{message}"),
        other => panic!("expected format error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes;
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn normalizer_standardizes_training_features() {
    let ds = generate_synthetic(&small(4)).unwrap();
    let norm = Normalizer::fit(&ds);
    let f = ds.features;
    let mut sum = vec![0.0f64; f];
    let mut sq = vec![0.0f64; f];
    let mut n = 0.0;
    for r in &ds.records {
        for row in norm.apply(&r.features).chunks_exact(f) {
            for j in 0..f {
                sum[j] += row[j] as f64;
                sq[j] += (row[j] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    for j in 0..f {
        assert!((sum[j] / n).abs() < 1e-4);
        assert!((sq[j] / n - 1.0).abs() < 1e-3);
    }
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..4, 2usize..5, 0usize..6).prop_flat_map(|(t, f, k, n)| {
        let rec = (any::<i64>(), prop::collection::vec(-1e6f32..1e6, t * f), prop::option::of(0..k), any::<bool>())
            .prop_map(|(id, feats, label, hidden)| {
                if hidden {
                    StatSeries::with_hidden_label(id, feats, label)
                } else {
                    StatSeries::new(id, feats, label)
                }
            });
        prop::collection::vec(rec, n)
            .prop_map(move |records| Dataset { records, ..Dataset::new(t, f, k, Dataset::default_class_names(k)) })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sits_round_trip_is_lossless(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sits");
        write_dataset(&ds, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn masking_is_proportional_and_deterministic(
        labels in prop::collection::vec(0usize..4, 1..80),
        fraction in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut ds = Dataset::new(1, 1, 4, Dataset::default_class_names(4));
        ds.records = labels.iter().enumerate().map(|(i, &l)| StatSeries::new(i as i64, vec![0.0], Some(l))).collect();
        let a = mask_labels(&ds, fraction, seed).unwrap();
        prop_assert_eq!(&a, &mask_labels(&ds, fraction, seed).unwrap());
        for c in 0..4 {
            let n = labels.iter().filter(|&&l| l == c).count() as f64;
            let kept = a.records.iter().filter(|r| r.train_label() == Some(c)).count() as f64;
            prop_assert!((kept - fraction * n).abs() <= 1.0);
        }
    }

    #[test]
    fn median_window_ignores_order_and_unit_window_is_identity(
        values in prop::collection::vec(-10f64..10.0, 6..30),
        window in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let t = values.len();
        let parcel = PixelParcel::new(0, 1, t, 1, values.clone(), None).unwrap();
        let same = temporal_median_downsample(&parcel, 1, 1).unwrap();
        prop_assert_eq!(&same.pixels, &values);
        let base = temporal_median_downsample(&parcel, window, window).unwrap();
        let mut shuffled = values.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for chunk in shuffled.chunks_mut(window) {
            chunk.shuffle(&mut rng);
        }
        let other = PixelParcel::new(0, 1, t, 1, shuffled, None).unwrap();
        prop_assert_eq!(base.pixels, temporal_median_downsample(&other, window, window).unwrap().pixels);
    }
}
