//! Independent reference computations used as test oracles.

/// Two-sample KS statistic by brute force over every pooled value.
pub fn ks_d(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// Permutation p-value by enumerating every split of the pooled sample.
pub fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let d_obs = ks_d(a, b);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                x.push(*v)
            } else {
                y.push(*v)
            }
        }
        total += 1;
        if ks_d(&x, &y) >= d_obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

pub fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

/// Adaptive Simpson quadrature.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = (a + b) / 2.0;
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, fc: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let c = (a + b) / 2.0;
        let (d, e) = ((a + c) / 2.0, (c + b) / 2.0);
        let (fd, fe) = (f(d), f(e));
        let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
        let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1) + rec(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
    }
    rec(f, a, b, fa, fb, fc, whole, tol, depth)
}

/// Two-sided Student t tail via the substitution x = tan θ, self-normalized.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    let g = |th: f64| {
        let x = th.tan();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / th.cos().powi(2)
    };
    let half = std::f64::consts::FRAC_PI_2 - 1e-9;
    let inner = simpson(&g, -t.abs().atan(), t.abs().atan(), 1e-13, 40);
    let all = simpson(&g, -half, half, 1e-13, 40);
    1.0 - inner / all
}

pub fn welch_reference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let var = |s: &[f64]| {
        let m = mean(s);
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
    };
    let (qa, qb) = (var(a) / a.len() as f64, var(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    (t, t_two_sided(t, df))
}


/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..k {
            if r != col {
                let f = m[r][col];
                let src = m[col].clone();
                for (v, s) in m[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    m.into_iter().map(|r| r[k..].to_vec()).collect()
}

/// Quadratic form dᵀ A d.
pub fn quadratic(a: &[Vec<f64>], d: &[f64]) -> f64 {
    a.iter()
        .zip(d)
        .map(|(row, di)| di * row.iter().zip(d).map(|(x, dj)| x * dj).sum::<f64>())
        .sum()
}
