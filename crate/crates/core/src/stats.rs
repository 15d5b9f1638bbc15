//! Small numerical helpers shared across the crate: moments, quantiles,
//! normal distribution functions, and stable log-space reductions.

use statrs::distribution::{ContinuousCDF, Normal};

/// Arithmetic mean. Returns NaN on an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n-1). Returns 0 for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linearly interpolated sample quantile (the common "type 7" rule:
/// h = (n-1)p, interpolate between floor(h) and ceil(h)).
///
/// `sorted` must be ascending and non-empty; `p` is clamped to [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = h - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Quantile of an unsorted sample (sorts a copy).
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, p)
}

/// Empirical CDF value of `x` in a sorted sample, defined as the exact
/// inverse of [`quantile_sorted`] on the sample's range: piecewise-linear
/// through the points (k/(n-1), sorted[k]), clamped to [0, 1] outside.
///
/// With this definition, `x` lies outside the central `level` interval
/// (quantiles at (1±level)/2) exactly when `|2 F(x) - 1| > level`, so
/// interval flags and CDF-based scores agree.
pub fn ecdf_sorted(sorted: &[f64], x: f64) -> f64 {
    assert!(!sorted.is_empty(), "ecdf of empty sample");
    let n = sorted.len();
    if n == 1 {
        // Degenerate sample: step CDF.
        return if x < sorted[0] {
            0.0
        } else if x > sorted[0] {
            1.0
        } else {
            0.5
        };
    }
    if x < sorted[0] {
        return 0.0;
    }
    if x > sorted[n - 1] {
        return 1.0;
    }
    // Find the segment [sorted[k], sorted[k+1]] containing x.
    let k = match sorted.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(mut i) => {
            // Ties: take the midpoint of the tied index range so the value is
            // treated symmetrically.
            let mut j = i;
            while i > 0 && sorted[i - 1] == x {
                i -= 1;
            }
            while j + 1 < n && sorted[j + 1] == x {
                j += 1;
            }
            return (i + j) as f64 / 2.0 / (n - 1) as f64;
        }
        Err(i) => i - 1,
    };
    let x0 = sorted[k];
    let x1 = sorted[k + 1];
    let frac = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
    (k as f64 + frac) / (n - 1) as f64
}

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.cdf(x)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.inverse_cdf(p)
}

/// Log-density of N(mean, sd^2) at x.
pub fn norm_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / denom
}

/// Natural cubic spline through (xs, ys), evaluated at `at`.
///
/// `xs` must be strictly increasing with at least two points; outside the
/// knot range the spline is extended linearly with the boundary slope.
pub fn natural_cubic_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    assert!(n >= 2, "spline needs at least two knots");
    // Second derivatives from the tridiagonal natural-spline system.
    let mut m2 = vec![0.0; n];
    if n > 2 {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            a[i] = h0;
            b[i] = 2.0 * (h0 + h1);
            c[i] = h1;
            d[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        }
        // Thomas algorithm on the interior rows.
        for i in 2..n - 1 {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            d[i] -= w * d[i - 1];
        }
        for i in (1..n - 1).rev() {
            m2[i] = (d[i] - c[i] * m2[i + 1]) / b[i];
        }
    }
    at.iter()
        .map(|&x| {
            if x <= xs[0] {
                let h = xs[1] - xs[0];
                let slope = (ys[1] - ys[0]) / h - h / 6.0 * m2[1];
                return ys[0] + slope * (x - xs[0]);
            }
            if x >= xs[n - 1] {
                let h = xs[n - 1] - xs[n - 2];
                let slope = (ys[n - 1] - ys[n - 2]) / h + h / 6.0 * m2[n - 2];
                return ys[n - 1] + slope * (x - xs[n - 1]);
            }
            let j = xs.partition_point(|&k| k <= x) - 1;
            let j = j.min(n - 2);
            let h = xs[j + 1] - xs[j];
            let u = xs[j + 1] - x;
            let v = x - xs[j];
            (m2[j] * u * u * u + m2[j + 1] * v * v * v) / (6.0 * h)
                + (ys[j] / h - m2[j] * h / 6.0) * u
                + (ys[j + 1] / h - m2[j + 1] * h / 6.0) * v
        })
        .collect()
}
