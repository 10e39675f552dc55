//! Small weighted-sample summaries shared across modules.

/// Weighted mean; `None` weights mean equal weights.
pub fn mean(v: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        Some(w) => {
            let tw: f64 = w.iter().sum();
            v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tw
        }
        None => v.iter().sum::<f64>() / v.len() as f64,
    }
}

/// Weighted standard deviation (population form).
pub fn std_dev(v: &[f64], w: Option<&[f64]>) -> f64 {
    let m = mean(v, w);
    let sq: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
    mean(&sq, w).sqrt()
}

/// Quantile with linear interpolation between order statistics
/// (`(n-1)p` positioning).
pub fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

pub fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    assert!(!s.is_empty());
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Weighted quantile: smallest value whose cumulative normalised weight
/// reaches `p`.
pub fn weighted_quantile(v: &[f64], w: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..v.len()).filter(|&i| w[i] > 0.0).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let tw: f64 = idx.iter().map(|&i| w[i]).sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += w[i];
        if acc >= p * tw {
            return v[i];
        }
    }
    idx.last().map_or(f64::NAN, |&i| v[i])
}

/// Linear interpolation of `(xs, ys)` at `x`, clamped to the end values.
/// `xs` must be increasing.
pub fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&g| g <= x).clamp(1, n - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let t = (x - x0) / (x1 - x0);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

/// Ordinary least-squares slope and its standard error.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = mean(x, None);
    let my = mean(y, None);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    (slope, se)
}

/// Evenly spaced grid of `n` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
