mod common;

use common::oracles::{ks_d, lcg, permutation_p, welch_reference};
use ratematch::balance::{ks_test, smd, t_test, Weighted};

#[test]
fn ks_matches_enumerated_permutation_p() {
    let mut state = 7;
    for trial in 0..300 {
        let m = 1 + trial % 6;
        let n = 1 + (trial / 6) % 6;
        // Coarse grid so ties are common.
        let draw = |s: &mut u64| (lcg(s) * 5.0).floor();
        let a: Vec<f64> = (0..m).map(|_| draw(&mut state)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut state) + (trial % 3) as f64 * 0.5).collect();
        let r = ks_test(&Weighted::unweighted(a.clone()), &Weighted::unweighted(b.clone())).unwrap();
        assert!((r.statistic - ks_d(&a, &b)).abs() < 1e-12, "{a:?} {b:?}");
        let exact = permutation_p(&a, &b);
        assert!((r.p_value - exact).abs() < 1e-9, "{a:?} {b:?}: {} vs {exact}", r.p_value);
    }
}

#[test]
fn welch_matches_quadrature() {
    let mut state = 99;
    for trial in 0..40 {
        let m = 3 + trial % 9;
        let n = 2 + (trial * 7) % 13;
        let a: Vec<f64> = (0..m).map(|_| lcg(&mut state) * 3.0).collect();
        let b: Vec<f64> = (0..n).map(|_| lcg(&mut state) * (1.0 + trial as f64 / 10.0) + 0.4).collect();
        let (t, p) = welch_reference(&a, &b);
        let r = t_test(&Weighted::unweighted(a), &Weighted::unweighted(b)).unwrap();
        assert!((r.statistic - t).abs() < 1e-10);
        assert!((r.p_value - p).abs() < 1e-6, "{} vs {p}", r.p_value);
    }
}

#[test]
fn integer_weights_equal_row_expansion() {
    let values = vec![1.0, 4.0, 2.5, 7.0, 3.0];
    let weights = vec![2.0, 1.0, 3.0, 1.0, 2.0];
    let expanded: Vec<f64> = values
        .iter()
        .zip(&weights)
        .flat_map(|(v, w)| std::iter::repeat(*v).take(*w as usize))
        .collect();
    let other = Weighted::unweighted(vec![2.0, 3.5, 5.0, 6.0]);
    let weighted = Weighted::new(values, weights).unwrap();
    let plain = Weighted::unweighted(expanded);
    assert!((weighted.mean() - plain.mean()).abs() < 1e-12);
    let (kw, kp) = (ks_test(&weighted, &other).unwrap(), ks_test(&plain, &other).unwrap());
    assert!((kw.statistic - kp.statistic).abs() < 1e-12);
    assert!((smd(&weighted, &other).unwrap() - smd(&plain, &other).unwrap()).abs() < 1e-12);
}
