use std::collections::HashSet;

use dcdg::data::*;
use dcdg::{CenterId, Error};
use proptest::prelude::*;

fn flat(fg: f64, bg: f64) -> CenterSpec {
    CenterSpec {
        fg_intensity_range: (fg, fg),
        bg_intensity_range: (bg, bg),
        noise_sigma: 0.0,
        bias_field_amplitude: 0.0,
        ..CenterSpec::default_c1(6, 2)
    }
}

fn ids(ds: &Dataset) -> Vec<&str> {
    ds.cases.iter().map(|c| c.case_id.as_str()).collect()
}

#[test]
fn generation_is_deterministic() {
    let spec = CenterSpec::default_c1(10, 1);
    assert_eq!(generate_center(&spec).unwrap(), generate_center(&spec).unwrap());
}

#[test]
fn degenerate_ranges_paint_exact_intensities_matching_the_mask() {
    for case in generate_center(&flat(0.8, 0.2)).unwrap().cases {
        let mask = case.mask.unwrap();
        for (&v, &m) in case.image.iter().zip(mask.iter()) {
            assert_eq!(v, if m == 1.0 { 0.8 } else { 0.2 });
        }
    }
}

#[test]
fn default_centers_differ_in_foreground_intensity() {
    let mean_fg = |ds: &Dataset| {
        let (mut s, mut n) = (0.0, 0.0);
        for c in &ds.cases {
            for (&v, &m) in c.image.iter().zip(c.mask.as_ref().unwrap().iter()) {
                if m == 1.0 {
                    s += v as f64;
                    n += 1.0;
                }
            }
        }
        s / n
    };
    let c1 = generate_center(&CenterSpec::default_c1(30, 1)).unwrap();
    let c2 = generate_center(&CenterSpec::default_c2(30, 1)).unwrap();
    assert!((mean_fg(&c1) - mean_fg(&c2)).abs() >= 0.1);
}

#[test]
fn clipping_is_rare_under_default_specs() {
    for spec in [CenterSpec::default_c1(20, 3), CenterSpec::default_c2(20, 3)] {
        let ds = generate_center(&spec).unwrap();
        let (mut clipped, mut total) = (0usize, 0usize);
        for c in &ds.cases {
            clipped += c.image.iter().filter(|&&v| v == 0.0 || v == 1.0).count();
            total += c.image.len();
            let frac = c.mask.as_ref().unwrap().sum() as f64 / c.image.len() as f64;
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac));
        }
        assert!((clipped as f64) < 0.05 * total as f64);
    }
}

#[test]
fn invalid_spec_is_a_config_error() {
    let bad = CenterSpec {
        image_size: (60, 64),
        ..CenterSpec::default_c1(2, 0)
    };
    assert!(matches!(generate_center(&bad), Err(Error::Config { ref field, .. }) if field == "image_size"));
}

#[test]
fn load_round_trip_with_optional_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = generate_center(&CenterSpec::default_c2(3, 5)).unwrap();
    ds.cases[2].mask = None;
    let manifest = write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(ids(&back), ids(&ds));
    assert!(back.cases[2].mask.is_none());
    assert_eq!(back.cases[0].mask, ds.cases[0].mask);
    assert_eq!(back.cases[1].center, CenterId::C2);
    for (a, b) in back.cases.iter().zip(&ds.cases) {
        let lo = b.image.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = b.image.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        for (&x, &y) in a.image.iter().zip(b.image.iter()) {
            let expect = (y as f64 - lo) / (hi - lo);
            assert!((x as f64 - expect).abs() < 1e-3);
        }
    }
}

#[test]
fn relocated_dataset_still_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_center(&CenterSpec::default_c1(2, 5)).unwrap();
    write_dataset(&ds, dir.path().join("a")).unwrap();
    std::fs::rename(dir.path().join("a"), dir.path().join("b")).unwrap();
    assert_eq!(load_dataset(dir.path().join("b/manifest.json")).unwrap().len(), 2);
}

#[test]
fn constant_image_normalizes_to_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_center(&flat(0.5, 0.5)).unwrap();
    let back = load_dataset(write_dataset(&ds, dir.path()).unwrap()).unwrap();
    assert!(back.cases[0].image.iter().all(|&v| v == 0.0));
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_center(&CenterSpec::default_c1(2, 5)).unwrap();
    let manifest = write_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join("masks/C1_0001.png");
    std::fs::remove_file(&victim).unwrap();
    match load_dataset(&manifest) {
        Err(Error::Io { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected I/O error, got {other:?}"),
    }
}

#[test]
fn malformed_manifest_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.json");
    std::fs::write(&p, "{\n  \"cases\": [\n    {\"case_id\": 3}\n  ]\n}\n").unwrap();
    let err = load_dataset(&p).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn split_examples() {
    let ds = generate_center(&CenterSpec::default_c1(50, 9)).unwrap();
    let (train, val, test) = split_dataset(&ds, 5, 10, 1).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (35, 5, 10));
    let mut all = HashSet::new();
    for part in [&train, &val, &test] {
        for id in ids(part) {
            assert!(all.insert(id.to_string()));
        }
    }
    assert_eq!(all.len(), 50);
    let again = split_dataset(&ds, 5, 10, 1).unwrap();
    assert_eq!((ids(&again.0), ids(&again.1)), (ids(&train), ids(&val)));
    assert!(matches!(split_dataset(&ds, 25, 25, 1), Err(Error::Data(_))));
}

#[test]
fn semi_split_examples() {
    let ds = generate_center(&CenterSpec {
        image_size: (16, 16),
        ..CenterSpec::default_c1(140, 2)
    })
    .unwrap();
    let (l, u) = make_semi_split(&ds, 0.25, 3).unwrap();
    assert_eq!((l.len(), u.len()), (35, 105));
    assert!(l.has_all_masks());
    assert!(u.cases.iter().all(|c| c.mask.is_none()));
    let (l, u) = make_semi_split(&ds, 1.0, 3).unwrap();
    assert_eq!((l.len(), u.len()), (140, 0));
    let seven = Dataset::new(ds.cases[..7].to_vec()).unwrap();
    let (l, u) = make_semi_split(&seven, 0.5, 3).unwrap();
    assert_eq!((l.len(), u.len()), (4, 3));
    for r in [0.0, 1.5, f64::NAN] {
        assert!(matches!(make_semi_split(&ds, r, 3), Err(Error::Config { .. })));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 3usize..40, v in 0usize..10, t in 0usize..10, seed in any::<u64>()) {
        prop_assume!(v + t < n);
        let ds = generate_center(&CenterSpec { image_size: (8, 8), ..CenterSpec::default_c1(n, 1) }).unwrap();
        let (a, b, c) = split_dataset(&ds, v, t, seed).unwrap();
        prop_assert_eq!((b.len(), c.len(), a.len()), (v, t, n - v - t));
        let mut seen: HashSet<String> = HashSet::new();
        for part in [&a, &b, &c] {
            for id in ids(part) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        let r = (seed % 100 + 1) as f64 / 100.0;
        let (l, u) = make_semi_split(&a, r, seed).unwrap();
        prop_assert_eq!(l.len() + u.len(), a.len());
        prop_assert_eq!(l.len(), labeled_count(a.len(), r));
        prop_assert!(u.cases.iter().all(|c| c.mask.is_none()));
    }
}
