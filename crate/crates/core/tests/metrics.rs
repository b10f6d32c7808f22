use approx::assert_abs_diff_eq;
use dcdg::data::{generate_center, CenterSpec};
use dcdg::metrics::*;
use dcdg::{init_model, ArchConfig, Error, ProbabilityBatch};
use ndarray::{Array2, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<f32> {
    let mut m = Array2::zeros((h, w));
    for &p in on {
        m[p] = 1.0;
    }
    m
}

/// All-pairs oracle with its own 4-neighbour surface rule.
fn brute_msd(p: &Array2<f32>, g: &Array2<f32>) -> Option<f64> {
    let surf = |m: &Array2<f32>| {
        let (h, w) = m.dim();
        let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[[y as usize, x as usize]] == 1.0;
        let mut s = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let interior = at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1);
                if at(y, x) && !interior {
                    s.push((y as f64, x as f64));
                }
            }
        }
        s
    };
    let (a, b) = (surf(p), surf(g));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(&a, &b) + directed(&b, &a)))
}

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Array2<f32> {
    Array2::from_shape_fn((16, 16), |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

#[test]
fn binarize_examples() {
    let half = ProbabilityBatch::new(Array4::from_elem((1, 1, 3, 3), 0.5)).unwrap();
    assert!(binarize(&half, 0.5).unwrap().data.iter().all(|&v| v == 1.0));
    let low = ProbabilityBatch::new(Array4::from_elem((1, 1, 1, 1), 0.49)).unwrap();
    assert_eq!(binarize(&low, 0.5).unwrap().data[[0, 0, 0, 0]], 0.0);
    // A binary map thresholded again is unchanged (0/1 nudged inside (0,1)).
    let bin = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| if (i + j) % 2 == 0 { 0.999 } else { 0.001 });
    let once = binarize(&ProbabilityBatch::new(bin).unwrap(), 0.5).unwrap();
    let again = once.data.mapv(|v| if v == 1.0 { 0.999 } else { 0.001 });
    let twice = binarize(&ProbabilityBatch::new(again).unwrap(), 0.5).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn dice_and_iou_examples() {
    let a = mask(3, 3, &[(0, 0), (1, 1)]);
    assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
    assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
    let p = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    let g = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert_eq!(dice(p.view(), g.view()).unwrap(), 0.5);
    assert_eq!(iou(p.view(), g.view()).unwrap(), 1.0 / 3.0);
    let empty = Array2::<f32>::zeros((4, 4));
    assert_eq!(dice(empty.view(), g.view()).unwrap(), 0.0);
    assert_eq!(dice(empty.view(), empty.view()).unwrap(), 1.0);
    assert_eq!(iou(empty.view(), empty.view()).unwrap(), 1.0);
    let disjoint = mask(4, 4, &[(3, 3)]);
    assert_eq!(iou(disjoint.view(), g.view()).unwrap(), 0.0);
    let other = Array2::<f32>::zeros((4, 5));
    assert!(matches!(iou(other.view(), g.view()), Err(Error::Shape(_))));
}

#[test]
fn surface_examples() {
    let square: Vec<_> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
    let s = extract_surface(mask(5, 5, &square).view());
    assert_eq!(s.len(), 8);
    assert!(!s.contains(&(2, 2)));
    assert_eq!(extract_surface(mask(5, 5, &[(4, 0)]).view()), vec![(4, 0)]);
    assert!(extract_surface(Array2::<f32>::zeros((5, 5)).view()).is_empty());
}

#[test]
fn msd_examples() {
    let a = mask(6, 6, &[(1, 1), (1, 2), (2, 1)]);
    assert_eq!(msd(a.view(), a.view(), (1.0, 1.0)).unwrap(), 0.0);
    let p = mask(5, 8, &[(2, 1)]);
    let g = mask(5, 8, &[(2, 4)]);
    assert_abs_diff_eq!(msd(p.view(), g.view(), (1.0, 1.0)).unwrap(), 3.0, epsilon = 1e-12);
    let p = mask(3, 3, &[(0, 0)]);
    let g = mask(3, 3, &[(0, 2), (2, 0)]);
    assert_abs_diff_eq!(msd(p.view(), g.view(), (1.0, 1.0)).unwrap(), 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(brute_msd(&p, &g).unwrap(), 2.0, epsilon = 1e-12);
    let empty = Array2::<f32>::zeros((3, 3));
    assert!(matches!(msd(empty.view(), g.view(), (1.0, 1.0)), Err(Error::UndefinedMetric(_))));
}

#[test]
fn msd_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let dp = rng.random_range(0.05..0.6);
        let dg = rng.random_range(0.05..0.6);
        let p = random_mask(&mut rng, dp);
        let g = random_mask(&mut rng, dg);
        match (msd(p.view(), g.view(), (1.0, 1.0)), brute_msd(&p, &g)) {
            (Ok(fast), Some(slow)) => {
                assert!((fast - slow).abs() <= 1e-9, "{fast} vs {slow}");
                let (d, i) = (dice(p.view(), g.view()).unwrap(), iou(p.view(), g.view()).unwrap());
                assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
                checked += 1;
            }
            (Err(Error::UndefinedMetric(_)), None) => {}
            other => panic!("disagreement on definedness: {other:?}"),
        }
    }
}

#[test]
fn msd_respects_spacing() {
    let p = mask(5, 5, &[(0, 0)]);
    let g = mask(5, 5, &[(3, 4)]);
    let d = msd(p.view(), g.view(), (2.0, 0.5)).unwrap();
    assert_abs_diff_eq!(d, (36.0f64 + 4.0).sqrt(), epsilon = 1e-12);
}

fn bits() -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(any::<bool>(), 64)
        .prop_map(|v| Array2::from_shape_fn((8, 8), |(i, j)| if v[i * 8 + j] { 1.0 } else { 0.0 }))
}

proptest! {
    #[test]
    fn metrics_are_symmetric_with_identity(p in bits(), g in bits()) {
        prop_assert_eq!(dice(p.view(), g.view()).unwrap(), dice(g.view(), p.view()).unwrap());
        prop_assert_eq!(iou(p.view(), g.view()).unwrap(), iou(g.view(), p.view()).unwrap());
        if let (Ok(a), Ok(b)) = (msd(p.view(), g.view(), (1.0, 1.0)), msd(g.view(), p.view(), (1.0, 1.0))) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let i = iou(p.view(), g.view()).unwrap();
        let d = dice(p.view(), g.view()).unwrap();
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        prop_assert!(i <= d);
        if p.sum() > 0.0 {
            prop_assert_eq!(dice(p.view(), p.view()).unwrap(), 1.0);
            prop_assert_eq!(iou(p.view(), p.view()).unwrap(), 1.0);
            prop_assert_eq!(msd(p.view(), p.view(), (1.0, 1.0)).unwrap(), 0.0);
        }
    }
}

#[test]
fn single_perfect_case_reports_zero_std() {
    let ds = generate_center(&CenterSpec::default_c1(1, 3)).unwrap();
    let report = evaluate_with(&ds, |_| Ok(ds.cases[0].mask.as_ref().unwrap().index_axis(Axis(0), 0).to_owned()))
        .unwrap();
    let c = &report.cases[0];
    assert_eq!((c.dice, c.iou, c.msd), (1.0, 1.0, Some(0.0)));
    assert_eq!(report.summary.dice.std, 0.0);
    assert_eq!(report.summary.n_cases, 1);
}

#[test]
fn empty_test_set_is_a_data_error() {
    let st = init_model(&ArchConfig::default(), 0).unwrap();
    let empty = dcdg::data::Dataset::default();
    assert!(matches!(evaluate_model(&st, &empty), Err(Error::Data(_))));
}

#[test]
fn report_matches_independent_recomputation_and_csv_round_trip() {
    let test = generate_center(&CenterSpec::default_c2(20, 8)).unwrap();
    let st = init_model(
        &ArchConfig {
            channels: vec![4, 8, 8],
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let report = evaluate_model(&st, &test).unwrap();
    assert_eq!(report.cases.len(), 20);

    // Scripted recomputation: forward, threshold, count overlaps.
    let mut sum = 0.0;
    for case in &test.cases {
        let p = st.model.predict(case.image.clone());
        let g = case.mask.as_ref().unwrap();
        let (mut i, mut np, mut ng) = (0.0, 0.0, 0.0);
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            let pb = if pv >= 0.5 { 1.0 } else { 0.0 };
            i += pb * gv as f64;
            np += pb;
            ng += gv as f64;
        }
        sum += if np + ng == 0.0 { 1.0 } else { 2.0 * i / (np + ng) };
    }
    assert!((report.summary.dice.mean - sum / 20.0).abs() <= 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cases.csv");
    report.write_case_csv(&csv).unwrap();
    let back = MetricsReport::from_cases(MetricsReport::read_case_csv(&csv).unwrap()).unwrap();
    assert_eq!(back.summary, report.summary);
    report.write_summary_json(dir.path().join("s.json")).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(v["n_cases"], 20);
}
