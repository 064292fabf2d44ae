use opsurv::evalmetrics::{
    brier_score, curve_error, default_upper, integrated_brier, kfold_split, km_censoring, quantile,
};
use opsurv::survloss::{StepPath, SurvivalCurve, SurvivalRecord, TimeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rec(y: f64, d: bool) -> SurvivalRecord {
    SurvivalRecord::new("s", y, d, StepPath::empty(), vec![]).unwrap()
}

fn flat(grid: &TimeGrid, s: f64) -> SurvivalCurve {
    let mut v = vec![s; grid.m() + 1];
    v[0] = 1.0;
    SurvivalCurve::new(grid.knots().to_vec(), v).unwrap()
}

#[test]
fn censoring_estimate_small_cases() {
    let g = km_censoring(&[rec(1.0, true), rec(2.0, true), rec(3.0, true)]);
    assert_eq!(g.at(10.0), 1.0);
    let g = km_censoring(&[rec(5.0, false)]);
    assert_eq!(g.at(4.9), 1.0);
    assert_eq!(g.at(5.0), 0.0);
    assert_eq!(g.left_limit(5.0), 1.0);

    let g = km_censoring(&[rec(1.0, true), rec(2.0, false), rec(3.0, false), rec(3.0, true)]);
    assert_eq!(g.at(1.5), 1.0);
    assert!((g.at(2.0) - 2.0 / 3.0).abs() < 1e-12);
    // the failure at 3 stays at risk for the censoring at 3
    assert!((g.at(3.0) - 1.0 / 3.0).abs() < 1e-12);
    assert!((g.left_limit(3.0) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn censoring_and_event_estimates_multiply_to_survivor_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<_> = (0..25).map(|i| rec(i as f64 + rng.random::<f64>() * 0.5, rng.random_bool(0.6))).collect();
    let g = km_censoring(&records);
    let n = records.len();
    let mut s = 1.0;
    let mut sorted = records.clone();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    for (i, r) in sorted.iter().enumerate() {
        if r.event {
            s *= 1.0 - 1.0 / (n - i) as f64;
        }
        let beyond = sorted.iter().filter(|q| q.time > r.time).count() as f64 / n as f64;
        assert!((s * g.at(r.time) - beyond).abs() < 1e-12);
    }
}

#[test]
fn hand_weighted_brier() {
    let grid = TimeGrid::even(5.0, 5).unwrap();
    let records = [rec(1.0, true), rec(2.0, false), rec(4.0, true)];
    let curves = [flat(&grid, 0.2), flat(&grid, 0.5), flat(&grid, 0.7)];
    let g = km_censoring(&records);
    let bs = brier_score(&curves, &records, 3.0, &g).unwrap();
    let want = (0.2 * 0.2 / 1.0 + 0.0 + 0.3 * 0.3 / 0.5) / 3.0;
    assert!((bs - want).abs() < 1e-15);
}

fn oracle_curves(grid: &TimeGrid, records: &[SurvivalRecord]) -> Vec<SurvivalCurve> {
    records
        .iter()
        .map(|r| {
            let v = grid.knots().iter().map(|&t| if r.time > t { 1.0 } else { 0.0 }).collect();
            SurvivalCurve::new(grid.knots().to_vec(), v).unwrap()
        })
        .collect()
}

#[test]
fn perfect_and_constant_predictors_on_uncensored_data() {
    let grid = TimeGrid::even(100.0, 250).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<_> = (0..300).map(|_| rec(rng.random_range(0.1..100.0), true)).collect();
    let upper = default_upper(&records).unwrap();
    let perfect = integrated_brier(&oracle_curves(&grid, &records), &records, &grid, upper).unwrap();
    assert_eq!(perfect.ibs, 0.0);
    let half: Vec<_> = records
        .iter()
        .map(|_| SurvivalCurve::new(grid.knots().to_vec(), vec![0.5; grid.m() + 1]).unwrap())
        .collect();
    let constant = integrated_brier(&half, &records, &grid, upper).unwrap();
    assert_eq!(constant.ibs, 0.25);
    assert!(!constant.truncated);
}

#[test]
fn linear_brier_integrates_exactly() {
    // one uncensored subject past tau with (1 - S(t))^2 = a + b t
    let grid = TimeGrid::even(8.0, 16).unwrap();
    let (a, b) = (0.01, 0.05);
    let v: Vec<f64> = grid.knots().iter().map(|&t| 1.0 - (a + b * t).sqrt()).collect();
    let curve = SurvivalCurve::new(grid.knots().to_vec(), v).unwrap();
    let records = [rec(9.0, true)];
    let r = integrated_brier(&[curve], &records, &grid, 6.0).unwrap();
    assert!((r.ibs - (a + b * 3.0)).abs() < 1e-12);
    assert_eq!(r.upper, 6.0);
}

#[test]
fn censoring_tail_does_not_cut_the_range() {
    // G reaches 0 only once nobody remains at risk, so every knot stays usable
    let grid = TimeGrid::even(10.0, 10).unwrap();
    let records = [rec(2.0, true), rec(6.0, false), rec(3.0, true)];
    let curves: Vec<_> = records.iter().map(|_| flat(&grid, 0.5)).collect();
    let r = integrated_brier(&curves, &records, &grid, 9.5).unwrap();
    assert!(!r.truncated);
    assert_eq!(r.upper, 9.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brier_bounds_and_order_invariance(seed in 0u64..100_000, t in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::even(10.0, 20).unwrap();
        let n = 12;
        let records: Vec<_> = (0..n).map(|_| rec(rng.random_range(0.1..9.0), rng.random_bool(0.8))).collect();
        let curves: Vec<_> = (0..n).map(|_| flat(&grid, rng.random_range(0.0..1.0))).collect();
        let g = km_censoring(&records);
        let Ok(bs) = brier_score(&curves, &records, t, &g) else { return Ok(()) };
        prop_assert!((0.0..=1.0 + 1e-12).contains(&bs));
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let rc: Vec<_> = order.iter().map(|&i| records[i].clone()).collect();
        let cc: Vec<_> = order.iter().map(|&i| curves[i].clone()).collect();
        let bs2 = brier_score(&cc, &rc, t, &km_censoring(&rc)).unwrap();
        prop_assert!((bs - bs2).abs() < 1e-14);
    }

    #[test]
    fn uncensored_brier_is_unweighted(seed in 0u64..100_000, t in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::even(10.0, 20).unwrap();
        let records: Vec<_> = (0..15).map(|_| rec(rng.random_range(0.1..9.0), true)).collect();
        let curves: Vec<_> = (0..15).map(|_| flat(&grid, rng.random_range(0.0..1.0))).collect();
        let bs = brier_score(&curves, &records, t, &km_censoring(&records)).unwrap();
        let plain: f64 = records.iter().zip(&curves).map(|(r, c)| {
            let o = if r.time > t { 1.0 } else { 0.0 };
            (o - c.at(t)).powi(2)
        }).sum::<f64>() / 15.0;
        prop_assert!((bs - plain).abs() < 1e-14);
    }
}

#[test]
fn curve_error_cases() {
    let grid = TimeGrid::even(4.0, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut v: Vec<f64> = (0..=8).map(|_| rng.random_range(0.2..0.8)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let c = SurvivalCurve::new(grid.knots().to_vec(), v.clone()).unwrap();
    assert_eq!(curve_error(&c, &c), 0.0);
    let up = SurvivalCurve::new(grid.knots().to_vec(), v.iter().map(|x| x + 0.1).collect()).unwrap();
    assert!((curve_error(&up, &c) - 0.1).abs() < 1e-12);

    let fine = TimeGrid::even(4.0, 40).unwrap();
    let fv: Vec<f64> = (0..=40).map(|i| 1.0 - i as f64 / 50.0).collect();
    let truth = SurvivalCurve::new(fine.knots().to_vec(), fv.clone()).unwrap();
    let mut total = 0.0;
    for (j, &s) in v.iter().enumerate() {
        total += (s - fv[j * 5]).abs();
    }
    assert!((curve_error(&c, &truth) - total / 9.0).abs() < 1e-12);
}

#[test]
fn fold_sizes_and_determinism() {
    let a = kfold_split(849, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut sizes = a.sizes();
    sizes.sort();
    assert_eq!(sizes, vec![169, 170, 170, 170, 170]);
    let b = kfold_split(849, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
    let (train, test) = a.split(2);
    assert_eq!(train.len() + test.len(), 849);
    assert!(test.iter().all(|&i| a.fold[i] == 2));

    let loo = kfold_split(6, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(loo.sizes(), vec![1; 6]);
    assert!(kfold_split(3, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn type_seven_quantile() {
    assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.5);
    assert!((quantile(&(1..=11).map(f64::from).collect::<Vec<_>>(), 0.9).unwrap() - 10.0).abs() < 1e-12);
}
