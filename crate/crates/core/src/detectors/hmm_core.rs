//! Scaled forward–backward recursions and Baum–Welch fitting for Gaussian
//! hidden Markov chains. Shared by the residual HMM detector (univariate,
//! several sequences with pooled parameters) and the multivariate event
//! model (one sequence of diagonal-Gaussian vectors).

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::DetectorError;
use crate::stats;

/// Smoothed quantities from one forward–backward pass.
pub(crate) struct ForwardBackward {
    pub loglik: f64,
    /// T×L smoothed state probabilities; every row sums to 1.
    pub gamma: DMatrix<f64>,
    /// L×L expected transition counts summed over time.
    pub xi_sum: DMatrix<f64>,
}

/// Scaled forward–backward over a T×L log-emission matrix.
///
/// Rows of zeros encode "no observation at this tick" (emission likelihood
/// one), which keeps state beliefs propagating across gaps.
pub(crate) fn forward_backward(
    init: &[f64],
    trans: &DMatrix<f64>,
    log_emit: &DMatrix<f64>,
) -> Result<ForwardBackward, DetectorError> {
    let t_len = log_emit.nrows();
    let l = log_emit.ncols();
    assert_eq!(init.len(), l);
    assert_eq!(trans.shape(), (l, l));
    if t_len == 0 {
        return Err(DetectorError::InvalidInput("empty sequence".into()));
    }

    // Per-tick rescaling of emissions guards against underflow; the factored
    // maxima re-enter the log-likelihood at the end.
    let mut emit = DMatrix::zeros(t_len, l);
    let mut emit_max = vec![0.0f64; t_len];
    for t in 0..t_len {
        let m = (0..l).map(|j| log_emit[(t, j)]).fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(DetectorError::SingularEmission);
        }
        emit_max[t] = m;
        for j in 0..l {
            emit[(t, j)] = (log_emit[(t, j)] - m).exp();
        }
    }

    let mut alpha = DMatrix::zeros(t_len, l);
    let mut scale = vec![0.0f64; t_len];
    for j in 0..l {
        alpha[(0, j)] = init[j] * emit[(0, j)];
    }
    scale[0] = (0..l).map(|j| alpha[(0, j)]).sum();
    if scale[0] <= 0.0 {
        return Err(DetectorError::SingularEmission);
    }
    for j in 0..l {
        alpha[(0, j)] /= scale[0];
    }
    for t in 1..t_len {
        for j in 0..l {
            let mut a = 0.0;
            for k in 0..l {
                a += alpha[(t - 1, k)] * trans[(k, j)];
            }
            alpha[(t, j)] = a * emit[(t, j)];
        }
        scale[t] = (0..l).map(|j| alpha[(t, j)]).sum();
        if scale[t] <= 0.0 {
            return Err(DetectorError::SingularEmission);
        }
        for j in 0..l {
            alpha[(t, j)] /= scale[t];
        }
    }

    let mut beta = DMatrix::from_element(t_len, l, 1.0);
    for t in (0..t_len - 1).rev() {
        for k in 0..l {
            let mut b = 0.0;
            for j in 0..l {
                b += trans[(k, j)] * emit[(t + 1, j)] * beta[(t + 1, j)];
            }
            beta[(t, k)] = b / scale[t + 1];
        }
    }

    let mut gamma = DMatrix::zeros(t_len, l);
    for t in 0..t_len {
        let mut row_sum = 0.0;
        for j in 0..l {
            gamma[(t, j)] = alpha[(t, j)] * beta[(t, j)];
            row_sum += gamma[(t, j)];
        }
        // Scaled recursions make each row sum to 1 up to roundoff.
        for j in 0..l {
            gamma[(t, j)] /= row_sum;
        }
    }

    let mut xi_sum = DMatrix::zeros(l, l);
    for t in 0..t_len - 1 {
        for k in 0..l {
            for j in 0..l {
                xi_sum[(k, j)] += alpha[(t, k)] * trans[(k, j)] * emit[(t + 1, j)]
                    * beta[(t + 1, j)]
                    / scale[t + 1];
            }
        }
    }

    let loglik = scale.iter().map(|c| c.ln()).sum::<f64>() + emit_max.iter().sum::<f64>();
    Ok(ForwardBackward {
        loglik,
        gamma,
        xi_sum,
    })
}

/// Log-likelihood of a sequence under an HMM, from the scaled forward pass.
///
/// `log_emit` is T×L: per-tick, per-state emission log-densities (rows of
/// zeros mean "unobserved tick"). Exposed so the recursion can be validated
/// against direct enumeration of state paths.
pub fn forward_log_likelihood(init: &[f64], trans: &DMatrix<f64>, log_emit: &DMatrix<f64>) -> f64 {
    forward_backward(init, trans, log_emit)
        .map(|fb| fb.loglik)
        .unwrap_or(f64::NEG_INFINITY)
}

pub(crate) struct BaumWelchConfig {
    pub states: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for BaumWelchConfig {
    fn default() -> Self {
        Self {
            states: 2,
            max_iter: 300,
            tol: 1e-7,
            restarts: 20,
            seed: 11,
        }
    }
}

/// Pooled univariate Gaussian HMM over several sequences: one chain per
/// sequence, shared initial/transition/emission parameters.
pub(crate) struct PooledHmm {
    pub init: Vec<f64>,
    pub trans: DMatrix<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    /// Smoothed state probabilities per sequence (T×L each).
    pub gammas: Vec<DMatrix<f64>>,
}

/// Fits a pooled Gaussian HMM by Baum–Welch with seeded restarts, keeping
/// the best converged fit. `None` entries are unobserved ticks.
pub(crate) fn fit_pooled_gaussian(
    seqs: &[Vec<Option<f64>>],
    cfg: &BaumWelchConfig,
) -> Result<PooledHmm, DetectorError> {
    let l = cfg.states;
    if l < 2 {
        return Err(DetectorError::InvalidInput(
            "need at least two hidden states".into(),
        ));
    }
    let observed: Vec<f64> = seqs
        .iter()
        .flatten()
        .filter_map(|v| v.as_ref().cloned())
        .collect();
    if observed.len() < l {
        return Err(DetectorError::InvalidInput(format!(
            "{} observations cannot support {l} states",
            observed.len()
        )));
    }
    let pooled_var = stats::variance(&observed);
    let var_floor = (1e-6 * pooled_var).max(1e-12);
    let sd = pooled_var.sqrt().max(1e-6);
    let mut sorted = observed.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best: Option<PooledHmm> = None;
    let mut last_iters = 0;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        // Quantile-spread means; later restarts jitter them.
        let mut means: Vec<f64> = (0..l)
            .map(|j| {
                let q = stats::quantile_sorted(&sorted, (j as f64 + 0.5) / l as f64);
                if restart == 0 {
                    q
                } else {
                    q + sd * rng.random_range(-0.7..0.7)
                }
            })
            .collect();
        let mut vars = vec![pooled_var.max(var_floor); l];
        let mut init = vec![1.0 / l as f64; l];
        let mut trans = DMatrix::from_element(l, l, 0.2 / (l as f64 - 1.0).max(1.0));
        for j in 0..l {
            trans[(j, j)] = 0.8;
        }

        let mut prev_ll = f64::NEG_INFINITY;
        let mut converged = false;
        let mut gammas: Vec<DMatrix<f64>> = Vec::new();
        let mut iters_done = 0;
        let mut em_failed = false;
        for iter in 0..cfg.max_iter {
            iters_done = iter + 1;
            // E-step over all sequences.
            let mut total_ll = 0.0;
            let mut init_acc = vec![0.0f64; l];
            let mut xi_acc = DMatrix::<f64>::zeros(l, l);
            let mut w_sum = vec![0.0f64; l];
            let mut wx_sum = vec![0.0f64; l];
            let mut wxx_sum = vec![0.0f64; l];
            gammas.clear();
            for seq in seqs {
                let log_emit = emission_matrix(seq, &means, &vars);
                let fb = match forward_backward(&init, &trans, &log_emit) {
                    Ok(fb) => fb,
                    Err(_) => {
                        em_failed = true;
                        break;
                    }
                };
                total_ll += fb.loglik;
                for j in 0..l {
                    init_acc[j] += fb.gamma[(0, j)];
                }
                xi_acc += &fb.xi_sum;
                for (t, v) in seq.iter().enumerate() {
                    if let Some(e) = v {
                        for j in 0..l {
                            let g = fb.gamma[(t, j)];
                            w_sum[j] += g;
                            wx_sum[j] += g * e;
                            wxx_sum[j] += g * e * e;
                        }
                    }
                }
                gammas.push(fb.gamma);
            }
            if em_failed {
                break;
            }

            if (total_ll - prev_ll).abs() < cfg.tol * (1.0 + total_ll.abs()) {
                prev_ll = total_ll;
                converged = true;
                break;
            }
            prev_ll = total_ll;

            // M-step.
            let init_total: f64 = init_acc.iter().sum();
            for j in 0..l {
                init[j] = (init_acc[j] / init_total).max(1e-12);
            }
            let s: f64 = init.iter().sum();
            init.iter_mut().for_each(|v| *v /= s);
            for k in 0..l {
                let row: f64 = (0..l).map(|j| xi_acc[(k, j)]).sum();
                if row > 0.0 {
                    for j in 0..l {
                        trans[(k, j)] = (xi_acc[(k, j)] / row).max(1e-12);
                    }
                    let rs: f64 = (0..l).map(|j| trans[(k, j)]).sum();
                    for j in 0..l {
                        trans[(k, j)] /= rs;
                    }
                }
            }
            for j in 0..l {
                if w_sum[j] > 1e-12 {
                    means[j] = wx_sum[j] / w_sum[j];
                    let v = wxx_sum[j] / w_sum[j] - means[j] * means[j];
                    vars[j] = v.max(var_floor);
                }
            }
        }
        if em_failed {
            continue;
        }

        last_iters = iters_done;
        let candidate = PooledHmm {
            init: init.clone(),
            trans: trans.clone(),
            means,
            vars,
            loglik: prev_ll,
            converged,
            gammas,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                // Converged fits outrank unconverged ones; likelihood breaks
                // ties.
                (candidate.converged, candidate.loglik) > (b.converged, b.loglik)
            }
        };
        if better {
            best = Some(candidate);
        }
    }

    let best = best.ok_or(DetectorError::SingularEmission)?;
    if !best.converged {
        return Err(DetectorError::BaumWelchNotConverged { iters: last_iters });
    }
    Ok(best)
}

fn emission_matrix(seq: &[Option<f64>], means: &[f64], vars: &[f64]) -> DMatrix<f64> {
    let l = means.len();
    DMatrix::from_fn(seq.len(), l, |t, j| match seq[t] {
        Some(e) => stats::norm_logpdf(e, means[j], vars[j].sqrt()),
        None => 0.0,
    })
}

/// Multivariate (diagonal-covariance) Gaussian HMM over one complete
/// sequence of D-dimensional observations, columns of `y` (D×T).
pub(crate) struct DiagMvnHmm {
    // The full fitted parameter set is kept together even though event
    // detection only consumes `means` and `gamma`.
    #[allow(dead_code)]
    pub init: Vec<f64>,
    #[allow(dead_code)]
    pub trans: DMatrix<f64>,
    pub means: Vec<DVector<f64>>,
    #[allow(dead_code)]
    pub vars: Vec<DVector<f64>>,
    pub loglik: f64,
    pub converged: bool,
    /// T×L smoothed state probabilities.
    pub gamma: DMatrix<f64>,
}

pub(crate) fn fit_diag_gaussian(
    y: &DMatrix<f64>,
    cfg: &BaumWelchConfig,
) -> Result<DiagMvnHmm, DetectorError> {
    let (d, t_len) = y.shape();
    let l = cfg.states;
    if l < 2 {
        return Err(DetectorError::InvalidInput(
            "need at least two hidden states".into(),
        ));
    }
    if t_len < l {
        return Err(DetectorError::InvalidInput(format!(
            "{t_len} ticks cannot support {l} states"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::InvalidInput(
            "event model requires complete data; impute first".into(),
        ));
    }
    // Per-dimension variance floors.
    let dim_vars: Vec<f64> = (0..d)
        .map(|i| {
            let row: Vec<f64> = (0..t_len).map(|t| y[(i, t)]).collect();
            stats::variance(&row)
        })
        .collect();
    let floors: Vec<f64> = dim_vars.iter().map(|v| (1e-6 * v).max(1e-12)).collect();

    let mut best: Option<DiagMvnHmm> = None;
    let mut last_iters = 0;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + restart as u64);
        // Initial means from randomly chosen ticks.
        let picks = rand::seq::index::sample(&mut rng, t_len, l);
        let mut means: Vec<DVector<f64>> = picks
            .iter()
            .map(|t| DVector::from_fn(d, |i, _| y[(i, t)]))
            .collect();
        let mut vars: Vec<DVector<f64>> =
            vec![DVector::from_fn(d, |i, _| dim_vars[i].max(floors[i])); l];
        let mut init = vec![1.0 / l as f64; l];
        let mut trans = DMatrix::from_element(l, l, 0.2 / (l as f64 - 1.0).max(1.0));
        for j in 0..l {
            trans[(j, j)] = 0.8;
        }

        let mut prev_ll = f64::NEG_INFINITY;
        let mut converged = false;
        let mut gamma = DMatrix::zeros(t_len, l);
        let mut iters_done = 0;
        let mut failed = false;
        for iter in 0..cfg.max_iter {
            iters_done = iter + 1;
            let mut log_emit = DMatrix::zeros(t_len, l);
            for t in 0..t_len {
                for j in 0..l {
                    let mut lp = 0.0;
                    for i in 0..d {
                        lp += stats::norm_logpdf(y[(i, t)], means[j][i], vars[j][i].sqrt());
                    }
                    log_emit[(t, j)] = lp;
                }
            }
            let fb = match forward_backward(&init, &trans, &log_emit) {
                Ok(fb) => fb,
                Err(_) => {
                    failed = true;
                    break;
                }
            };
            gamma = fb.gamma;
            if (fb.loglik - prev_ll).abs() < cfg.tol * (1.0 + fb.loglik.abs()) {
                prev_ll = fb.loglik;
                converged = true;
                break;
            }
            prev_ll = fb.loglik;

            for j in 0..l {
                init[j] = gamma[(0, j)].max(1e-12);
            }
            let s: f64 = init.iter().sum();
            init.iter_mut().for_each(|v| *v /= s);
            for k in 0..l {
                let row: f64 = (0..l).map(|j| fb.xi_sum[(k, j)]).sum();
                if row > 0.0 {
                    for j in 0..l {
                        trans[(k, j)] = (fb.xi_sum[(k, j)] / row).max(1e-12);
                    }
                    let rs: f64 = (0..l).map(|j| trans[(k, j)]).sum();
                    for j in 0..l {
                        trans[(k, j)] /= rs;
                    }
                }
            }
            for j in 0..l {
                let w: f64 = (0..t_len).map(|t| gamma[(t, j)]).sum();
                if w > 1e-12 {
                    for i in 0..d {
                        let mx: f64 = (0..t_len).map(|t| gamma[(t, j)] * y[(i, t)]).sum();
                        let mean = mx / w;
                        let vx: f64 = (0..t_len)
                            .map(|t| gamma[(t, j)] * (y[(i, t)] - mean).powi(2))
                            .sum();
                        means[j][i] = mean;
                        vars[j][i] = (vx / w).max(floors[i]);
                    }
                }
            }
        }
        if failed {
            continue;
        }
        last_iters = iters_done;
        let cand = DiagMvnHmm {
            init: init.clone(),
            trans: trans.clone(),
            means,
            vars,
            loglik: prev_ll,
            converged,
            gamma,
        };
        let better = match &best {
            None => true,
            Some(b) => (cand.converged, cand.loglik) > (b.converged, b.loglik),
        };
        if better {
            best = Some(cand);
        }
    }
    let best = best.ok_or(DetectorError::SingularEmission)?;
    if !best.converged {
        return Err(DetectorError::BaumWelchNotConverged { iters: last_iters });
    }
    Ok(best)
}
