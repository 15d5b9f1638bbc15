//! Multivariate gap filling for sensor level data.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::ImpaleError;
use crate::stats::{mean, variance};

const EM_MAX_ITER: usize = 200;
const EM_TOL: f64 = 1e-8;

/// Fill missing cells (NaN) of an S×T level matrix.
///
/// Cross-site structure is estimated by EM on a per-time multivariate normal:
/// each missing cell gets its conditional expectation given the sites
/// observed at the same tick. That estimate is blended with a per-site
/// temporal trend — a natural cubic spline through the site's observed
/// values after a three-point moving average — with weight `blend` on the
/// cross-site part (0.5 for an even split). Ticks where no site is observed
/// fall back to per-site linear interpolation. Observed cells pass through
/// unchanged, so a completed matrix is a fixed point.
pub fn impute_multivariate(
    series: &DMatrix<f64>,
    blend: f64,
) -> Result<DMatrix<f64>, ImpaleError> {
    let (s, t_len) = series.shape();
    if s == 0 || t_len == 0 {
        return Err(ImpaleError::InsufficientData("empty matrix".into()));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(ImpaleError::InvalidInput("blend must lie in [0, 1]".into()));
    }
    if series.iter().any(|v| v.is_infinite()) {
        return Err(ImpaleError::InvalidInput(
            "series must be finite or NaN".into(),
        ));
    }
    for i in 0..s {
        let observed = (0..t_len).filter(|&t| !series[(i, t)].is_nan()).count();
        if observed < 2 {
            return Err(ImpaleError::InsufficientData(format!(
                "site {i} has {observed} observed values; need at least 2"
            )));
        }
    }
    if series.iter().all(|v| !v.is_nan()) {
        return Ok(series.clone());
    }

    // Ticks with at least one observation feed the EM model; fully
    // unobserved ticks are filled by per-site linear interpolation alone.
    let em_cols: Vec<usize> = (0..t_len)
        .filter(|&t| (0..s).any(|i| !series[(i, t)].is_nan()))
        .collect();
    let (mu, cov) = fit_columns_em(series, &em_cols);

    let mut out = series.clone();
    for i in 0..s {
        if (0..t_len).all(|t| !series[(i, t)].is_nan()) {
            continue;
        }
        let trend = smoothed_spline_trend(series, i);
        let interp = linear_interp_row(series, i);
        for t in 0..t_len {
            if !series[(i, t)].is_nan() {
                continue;
            }
            out[(i, t)] = if em_cols.binary_search(&t).is_ok() {
                let cond = conditional_mean(series, t, i, &mu, &cov);
                blend * cond + (1.0 - blend) * trend[t]
            } else {
                interp[t]
            };
        }
    }
    Ok(out)
}

/// EM for the per-tick cross-site normal: mean vector and covariance from
/// columns with arbitrary missingness, via expected sufficient statistics.
fn fit_columns_em(series: &DMatrix<f64>, cols: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let s = series.nrows();
    let mut mu = DVector::zeros(s);
    let mut cov = DMatrix::zeros(s, s);
    for i in 0..s {
        let vals: Vec<f64> = cols
            .iter()
            .map(|&t| series[(i, t)])
            .filter(|v| !v.is_nan())
            .collect();
        mu[i] = mean(&vals);
        cov[(i, i)] = variance(&vals).max(1e-8 * (1.0 + mu[i].abs()));
    }

    let n = cols.len() as f64;
    for _ in 0..EM_MAX_ITER {
        let mut sum = DVector::zeros(s);
        let mut sum_sq = DMatrix::zeros(s, s);
        for &t in cols {
            let (obs, miss): (Vec<usize>, Vec<usize>) =
                (0..s).partition(|&i| !series[(i, t)].is_nan());
            let mut e = DVector::zeros(s);
            for &i in &obs {
                e[i] = series[(i, t)];
            }
            let mut v_mm = DMatrix::zeros(miss.len(), miss.len());
            if !miss.is_empty() {
                let (m, v) = conditional_block(series, t, &obs, &miss, &mu, &cov);
                for (k, &i) in miss.iter().enumerate() {
                    e[i] = m[k];
                }
                v_mm = v;
            }
            sum += &e;
            sum_sq += &e * e.transpose();
            for (a, &i) in miss.iter().enumerate() {
                for (b, &j) in miss.iter().enumerate() {
                    sum_sq[(i, j)] += v_mm[(a, b)];
                }
            }
        }
        let new_mu = &sum / n;
        let mut new_cov = &sum_sq / n - &new_mu * new_mu.transpose();
        new_cov = (&new_cov + new_cov.transpose()) * 0.5;
        let ridge = 1e-10 * (new_cov.trace() / s as f64 + 1.0);
        for i in 0..s {
            new_cov[(i, i)] += ridge;
        }

        let delta = (&new_mu - &mu).norm() / (1.0 + mu.norm())
            + (&new_cov - &cov).norm() / (1.0 + cov.norm());
        mu = new_mu;
        cov = new_cov;
        if delta < EM_TOL {
            break;
        }
    }
    (mu, cov)
}

/// Conditional mean and covariance of the missing block given the observed
/// sites at tick `t`.
fn conditional_block(
    series: &DMatrix<f64>,
    t: usize,
    obs: &[usize],
    miss: &[usize],
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let c_oo = DMatrix::from_fn(obs.len(), obs.len(), |a, b| cov[(obs[a], obs[b])]);
    let c_mo = DMatrix::from_fn(miss.len(), obs.len(), |a, b| cov[(miss[a], obs[b])]);
    let c_mm = DMatrix::from_fn(miss.len(), miss.len(), |a, b| cov[(miss[a], miss[b])]);
    let resid = DVector::from_fn(obs.len(), |a, _| series[(obs[a], t)] - mu[obs[a]]);

    let mut ridge = 1e-10 * (c_oo.trace() / obs.len() as f64 + 1.0);
    let chol = loop {
        let mut m = c_oo.clone();
        for a in 0..obs.len() {
            m[(a, a)] += ridge;
        }
        match Cholesky::new(m) {
            Some(c) => break c,
            None => ridge *= 100.0,
        }
    };
    let gain = chol.solve(&c_mo.transpose()).transpose();
    let m = DVector::from_fn(miss.len(), |a, _| mu[miss[a]]) + &gain * resid;
    let v = c_mm - &gain * c_mo.transpose();
    (m, v)
}

fn conditional_mean(
    series: &DMatrix<f64>,
    t: usize,
    site: usize,
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> f64 {
    let s = series.nrows();
    let (obs, miss): (Vec<usize>, Vec<usize>) = (0..s).partition(|&i| !series[(i, t)].is_nan());
    if obs.is_empty() {
        return mu[site];
    }
    let (m, _) = conditional_block(series, t, &obs, &miss, mu, cov);
    let k = miss.iter().position(|&i| i == site).expect("site missing");
    m[k]
}

/// Per-site temporal trend: three-point moving average of the observed
/// values, then a natural cubic spline through those knots, held constant
/// beyond the first/last observation.
fn smoothed_spline_trend(series: &DMatrix<f64>, site: usize) -> Vec<f64> {
    let t_len = series.ncols();
    let knots: Vec<(f64, f64)> = (0..t_len)
        .filter(|&t| !series[(site, t)].is_nan())
        .map(|t| (t as f64, series[(site, t)]))
        .collect();
    let k = knots.len();
    let smoothed: Vec<f64> = (0..k)
        .map(|j| {
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(k - 1);
            let window: Vec<f64> = (lo..=hi).map(|u| knots[u].1).collect();
            mean(&window)
        })
        .collect();
    let xs: Vec<f64> = knots.iter().map(|p| p.0).collect();
    let spline = NaturalCubic::fit(&xs, &smoothed);
    (0..t_len).map(|t| spline.eval(t as f64)).collect()
}

/// Per-site linear interpolation over observed values, constant beyond the
/// ends. Used as the fallback for fully unobserved ticks and as the
/// benchmark baseline.
pub(crate) fn linear_interp_row(series: &DMatrix<f64>, site: usize) -> Vec<f64> {
    let t_len = series.ncols();
    let obs: Vec<(usize, f64)> = (0..t_len)
        .filter(|&t| !series[(site, t)].is_nan())
        .map(|t| (t, series[(site, t)]))
        .collect();
    (0..t_len)
        .map(|t| {
            match obs.binary_search_by_key(&t, |p| p.0) {
                Ok(k) => obs[k].1,
                Err(k) if k == 0 => obs[0].1,
                Err(k) if k == obs.len() => obs[obs.len() - 1].1,
                Err(k) => {
                    let (t0, y0) = obs[k - 1];
                    let (t1, y1) = obs[k];
                    let w = (t - t0) as f64 / (t1 - t0) as f64;
                    y0 + w * (y1 - y0)
                }
            }
        })
        .collect()
}

/// Natural cubic spline through strictly increasing knots; two knots give a
/// straight line. Evaluation clamps to the boundary values outside the knot
/// range.
struct NaturalCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    m2: Vec<f64>,
}

impl NaturalCubic {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let k = xs.len();
        let mut m2 = vec![0.0; k];
        if k > 2 {
            // Thomas algorithm on the interior tridiagonal system.
            let n = k - 2;
            let h: Vec<f64> = (0..k - 1).map(|j| xs[j + 1] - xs[j]).collect();
            let mut diag: Vec<f64> = (0..n).map(|j| 2.0 * (h[j] + h[j + 1])).collect();
            let mut rhs: Vec<f64> = (0..n)
                .map(|j| {
                    6.0 * ((ys[j + 2] - ys[j + 1]) / h[j + 1] - (ys[j + 1] - ys[j]) / h[j])
                })
                .collect();
            for j in 1..n {
                let w = h[j] / diag[j - 1];
                diag[j] -= w * h[j];
                rhs[j] -= w * rhs[j - 1];
            }
            m2[n] = rhs[n - 1] / diag[n - 1];
            for j in (1..n).rev() {
                m2[j] = (rhs[j - 1] - h[j] * m2[j + 1]) / diag[j - 1];
            }
        }
        Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m2,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let k = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[k - 1] {
            return self.ys[k - 1];
        }
        let j = self.xs.partition_point(|&t| t <= x) - 1;
        let h = self.xs[j + 1] - self.xs[j];
        let a = (self.xs[j + 1] - x) / h;
        let b = (x - self.xs[j]) / h;
        a * self.ys[j]
            + b * self.ys[j + 1]
            + ((a.powi(3) - a) * self.m2[j] + (b.powi(3) - b) * self.m2[j + 1]) * h * h / 6.0
    }
}
