//! Finite Gaussian mixture detector on model residuals: components are
//! ordered by mean, the largest-weight component is declared normal, and
//! observations whose most probable component is any other one are flagged.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{AnomalyLabels, CellFlag, DetectorError, DetectorMethod};
use crate::model::ResidualSeries;
use crate::stats;

const EM_MAX_ITER: usize = 1000;
const EM_TOL: f64 = 1e-6;
const EM_RESTARTS: usize = 20;
const EM_SEED: u64 = 29;

/// Fitted Gaussian mixture with per-observation memberships.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    /// Component means, strictly ascending.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Component weights, summing to one.
    pub weights: Vec<f64>,
    /// Observed cells in column-major (site, time) order; one membership
    /// row per entry.
    pub cells: Vec<(usize, usize)>,
    /// n_obs × K posterior membership probabilities, rows summing to one.
    pub memberships: DMatrix<f64>,
    /// Indices of components treated as anomalous (every component except
    /// the largest-weight one).
    pub anomalous: Vec<usize>,
    pub loglik: f64,
}

/// Flags residuals via a K-component Gaussian mixture fit by EM.
///
/// With `iterations = 2`, flagged residuals are removed, the mixture refit
/// on the remainder, all residuals re-scored under the new fit, and the two
/// flag sets unioned. Scores are summed anomalous-component memberships;
/// a cell is flagged when its most probable component is anomalous, which
/// forces its score to at least 1/K.
pub fn detect_mixture(
    residuals: &ResidualSeries,
    k: usize,
    iterations: u8,
) -> Result<(MixtureFit, AnomalyLabels), DetectorError> {
    if k < 2 {
        return Err(DetectorError::InvalidInput(format!(
            "mixture needs at least two components, got {k}"
        )));
    }
    if !(iterations == 1 || iterations == 2) {
        return Err(DetectorError::InvalidInput(format!(
            "iterations must be 1 or 2, got {iterations}"
        )));
    }

    let (s, t_len) = residuals.resid.shape();
    let mut cells = Vec::new();
    let mut values = Vec::new();
    for t in 0..t_len {
        for i in 0..s {
            if !residuals.missing[(i, t)] {
                let e = residuals.resid[(i, t)];
                if !e.is_finite() {
                    return Err(DetectorError::InvalidInput(format!(
                        "non-finite residual at observed cell ({i},{t})"
                    )));
                }
                cells.push((i, t));
                values.push(e);
            }
        }
    }
    if values.len() < k {
        return Err(DetectorError::InvalidInput(format!(
            "{} residuals cannot support {k} components",
            values.len()
        )));
    }

    let threshold = 1.0 / k as f64;
    let fit1 = fit_em(&values, k)?;
    let flags1 = flag_under(&fit1);
    let scores1 = scores_under(&fit1);
    if iterations == 1 {
        return assemble(residuals, cells, fit1, &flags1, &scores1, threshold, 1);
    }

    let kept: Vec<f64> = values
        .iter()
        .zip(&flags1)
        .filter(|(_, &f)| !f)
        .map(|(v, _)| *v)
        .collect();
    if flags1.iter().all(|&f| !f) || kept.len() < k {
        // Nothing removed (refit would reproduce the first fit) or too few
        // residuals left to refit; first-pass result stands.
        return assemble(residuals, cells, fit1, &flags1, &scores1, threshold, 2);
    }

    let mut fit2 = fit_em(&kept, k)?;
    // Re-score every residual under the second-pass parameters.
    fit2.memberships = memberships_under(&values, &fit2);
    let flags2 = flag_under(&fit2);
    let scores2 = scores_under(&fit2);
    // Union of flags; per observation the stronger of the two scores, so a
    // first-pass flag stays at or above the threshold.
    let flags: Vec<bool> = flags1.iter().zip(&flags2).map(|(a, b)| *a || *b).collect();
    let scores: Vec<f64> = scores1
        .iter()
        .zip(&scores2)
        .map(|(a, b)| a.max(*b))
        .collect();
    assemble(residuals, cells, fit2, &flags, &scores, threshold, 2)
}

/// Builds labels from per-observation flags and scores.
fn assemble(
    residuals: &ResidualSeries,
    cells: Vec<(usize, usize)>,
    mut fit: MixtureFit,
    flags: &[bool],
    scores: &[f64],
    threshold: f64,
    iteration: u8,
) -> Result<(MixtureFit, AnomalyLabels), DetectorError> {
    let (s, t_len) = residuals.resid.shape();
    let mut flag_m = DMatrix::from_element(s, t_len, CellFlag::Normal);
    let mut score_m = DMatrix::from_element(s, t_len, f64::NAN);
    for t in 0..t_len {
        for i in 0..s {
            if residuals.missing[(i, t)] {
                flag_m[(i, t)] = CellFlag::Missing;
            }
        }
    }
    for (n, &(i, t)) in cells.iter().enumerate() {
        score_m[(i, t)] = scores[n];
        if flags[n] {
            flag_m[(i, t)] = CellFlag::Anomalous;
        }
    }
    fit.cells = cells;
    let labels = AnomalyLabels {
        flags: flag_m,
        scores: score_m,
        method: DetectorMethod::Mixture,
        iteration,
        threshold,
    };
    labels.validate()?;
    Ok((fit, labels))
}

/// Summed anomalous-component memberships, one per observation. The sum is
/// clamped to 1: memberships sum to one only up to rounding, and with many
/// anomalous components the accumulated error can poke above it.
fn scores_under(fit: &MixtureFit) -> Vec<f64> {
    (0..fit.memberships.nrows())
        .map(|n| {
            fit.anomalous
                .iter()
                .map(|&j| fit.memberships[(n, j)])
                .sum::<f64>()
                .min(1.0)
        })
        .collect()
}

/// True where the most probable component is anomalous.
fn flag_under(fit: &MixtureFit) -> Vec<bool> {
    (0..fit.memberships.nrows())
        .map(|n| {
            let mut best = 0;
            for j in 1..fit.means.len() {
                if fit.memberships[(n, j)] > fit.memberships[(n, best)] {
                    best = j;
                }
            }
            fit.anomalous.contains(&best)
        })
        .collect()
}

fn memberships_under(values: &[f64], fit: &MixtureFit) -> DMatrix<f64> {
    let k = fit.means.len();
    let mut m = DMatrix::zeros(values.len(), k);
    for (n, &x) in values.iter().enumerate() {
        let lp: Vec<f64> = (0..k)
            .map(|j| fit.weights[j].ln() + stats::norm_logpdf(x, fit.means[j], fit.sds[j]))
            .collect();
        let lse = stats::logsumexp(&lp);
        for j in 0..k {
            m[(n, j)] = (lp[j] - lse).exp();
        }
    }
    m
}

struct EmState {
    means: Vec<f64>,
    vars: Vec<f64>,
    weights: Vec<f64>,
    loglik: f64,
    converged: bool,
    degenerate: bool,
    iters: usize,
    last_delta: f64,
}

/// EM over restarts; converged, non-degenerate restarts outrank the rest,
/// likelihood breaks ties.
fn fit_em(values: &[f64], k: usize) -> Result<MixtureFit, DetectorError> {
    let n = values.len();
    let sample_var = stats::variance(values);
    let var_floor = (1e-6 * sample_var).max(1e-300);
    let sd = sample_var.sqrt().max(1e-6);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best: Option<EmState> = None;
    for restart in 0..EM_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(EM_SEED);
        rng.set_stream(restart as u64);
        // Extreme components start narrow in the far tails so EM can reach
        // the dominant-bulk-plus-outlier-bucket optimum instead of tiling
        // the sample into equal slices.
        let mut means = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        for j in 0..k {
            let edge = j == 0 || j == k - 1;
            let frac = if j == 0 {
                0.01
            } else if j == k - 1 {
                0.99
            } else {
                (j as f64 + 0.5) / k as f64
            };
            let q = stats::quantile_sorted(&sorted, frac);
            means.push(if restart == 0 {
                q
            } else {
                q + sd * rng.random_range(-0.7..0.7)
            });
            vars.push(if edge {
                (sample_var / 16.0).max(var_floor)
            } else {
                sample_var.max(var_floor)
            });
        }
        let mut weights = vec![1.0 / k as f64; k];

        let mut prev_ll = f64::NEG_INFINITY;
        let mut converged = false;
        let mut iters = 0;
        let mut last_delta = f64::INFINITY;
        let mut resp = DMatrix::zeros(n, k);
        for iter in 0..EM_MAX_ITER {
            iters = iter + 1;
            // E-step.
            let mut ll = 0.0;
            for (i, &x) in values.iter().enumerate() {
                let lp: Vec<f64> = (0..k)
                    .map(|j| weights[j].ln() + stats::norm_logpdf(x, means[j], vars[j].sqrt()))
                    .collect();
                let lse = stats::logsumexp(&lp);
                ll += lse;
                for j in 0..k {
                    resp[(i, j)] = (lp[j] - lse).exp();
                }
            }
            // EM never decreases the likelihood; a material drop means a
            // numerical fault worth failing loudly on.
            assert!(
                ll >= prev_ll - 1e-8 * (1.0 + prev_ll.abs()),
                "EM log-likelihood decreased: {prev_ll} -> {ll}"
            );
            last_delta = ll - prev_ll;
            if last_delta.abs() < EM_TOL * (1.0 + ll.abs()) {
                prev_ll = ll;
                converged = true;
                break;
            }
            prev_ll = ll;

            // M-step.
            for j in 0..k {
                let wj: f64 = (0..n).map(|i| resp[(i, j)]).sum();
                weights[j] = wj / n as f64;
                if wj > 1e-300 {
                    let mj: f64 = (0..n).map(|i| resp[(i, j)] * values[i]).sum::<f64>() / wj;
                    let vj: f64 =
                        (0..n).map(|i| resp[(i, j)] * (values[i] - mj).powi(2)).sum::<f64>() / wj;
                    means[j] = mj;
                    vars[j] = vj.max(var_floor);
                }
            }
        }

        // Ascending means for identifiability.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap());
        let means: Vec<f64> = order.iter().map(|&j| means[j]).collect();
        let vars: Vec<f64> = order.iter().map(|&j| vars[j]).collect();
        let weights: Vec<f64> = order.iter().map(|&j| weights[j]).collect();
        let degenerate = weights.iter().any(|&w| w < 1e-8)
            || means.windows(2).any(|m| m[1] <= m[0]);

        let cand = EmState {
            means,
            vars,
            weights,
            loglik: prev_ll,
            converged,
            degenerate,
            iters,
            last_delta,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                (cand.converged && !cand.degenerate, cand.loglik)
                    > (b.converged && !b.degenerate, b.loglik)
            }
        };
        if better {
            best = Some(cand);
        }
    }

    let best = best.expect("at least one EM restart ran");
    if !best.converged {
        return Err(DetectorError::EmNotConverged {
            iters: best.iters,
            delta: best.last_delta,
        });
    }
    if best.degenerate {
        return Err(DetectorError::DegenerateComponent);
    }

    let mut bulk = 0;
    for j in 1..k {
        if best.weights[j] > best.weights[bulk] {
            bulk = j;
        }
    }
    let anomalous: Vec<usize> = (0..k).filter(|&j| j != bulk).collect();
    let fit = MixtureFit {
        sds: best.vars.iter().map(|v| v.sqrt()).collect(),
        memberships: DMatrix::zeros(0, k),
        cells: Vec::new(),
        anomalous,
        loglik: best.loglik,
        means: best.means,
        weights: best.weights,
    };
    let memberships = memberships_under(values, &fit);
    Ok(MixtureFit {
        memberships,
        ..fit
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn series(resid: DMatrix<f64>) -> ResidualSeries {
        let missing = resid.map(|v| v.is_nan());
        ResidualSeries { resid, missing }
    }

    #[test]
    fn clean_residuals_leave_bulk_dominant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let resid = DMatrix::from_fn(20, 100, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (fit, labels) = detect_mixture(&series(resid), 3, 1).unwrap();
        let w_max = fit.weights.iter().cloned().fold(0.0, f64::max);
        assert!(w_max > 0.9, "dominant weight {w_max}");
        assert!(labels.flag_rate() <= 0.10, "flag rate {}", labels.flag_rate());
        assert_eq!(fit.anomalous.len(), 2);
        let sum_w: f64 = fit.weights.iter().sum();
        assert!((sum_w - 1.0).abs() < 1e-9);
        assert!(fit.means.windows(2).all(|m| m[1] > m[0]));
    }

    #[test]
    fn two_separated_points_split_cleanly() {
        let resid = DMatrix::from_row_slice(1, 2, &[-10.0, 10.0]);
        let (fit, labels) = detect_mixture(&series(resid), 2, 1).unwrap();
        assert!((fit.means[0] + 10.0).abs() < 1e-6);
        assert!((fit.means[1] - 10.0).abs() < 1e-6);
        // Each point belongs to its own component with near certainty.
        assert!(fit.memberships[(0, 0)] > 0.999);
        assert!(fit.memberships[(1, 1)] > 0.999);
        labels.validate().unwrap();
    }

    #[test]
    fn injected_spikes_are_flagged_and_second_pass_unions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut resid = DMatrix::from_fn(10, 80, |_, _| rng.sample::<f64, _>(StandardNormal));
        let spikes = [(0usize, 5usize), (3, 40), (7, 79)];
        for &(i, t) in &spikes {
            resid[(i, t)] = 9.0;
        }
        resid[(2, 2)] = f64::NAN; // one missing cell
        let series = series(resid);
        let (_, one) = detect_mixture(&series, 3, 1).unwrap();
        let (_, two) = detect_mixture(&series, 3, 2).unwrap();
        for &(i, t) in &spikes {
            assert!(one.is_anomalous(i, t), "spike ({i},{t}) missed in pass 1");
            assert!(two.is_anomalous(i, t), "spike ({i},{t}) missed in pass 2");
        }
        // Union property: every first-pass flag survives the second pass.
        for (i, t) in one.flagged_cells() {
            assert!(two.is_anomalous(i, t));
        }
        assert_eq!(two.iteration, 2);
        assert_eq!(two.flags[(2, 2)], CellFlag::Missing);
        assert!(two.scores[(2, 2)].is_nan());
    }

    #[test]
    fn rejects_tiny_k_and_bad_iterations() {
        let resid = DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 2.0, 3.0]);
        assert!(detect_mixture(&series(resid.clone()), 1, 1).is_err());
        assert!(detect_mixture(&series(resid), 3, 3).is_err());
    }
}
