//! Blockwise adaptive Metropolis-within-Gibbs sampler for the VAR(1)
//! spatial model.
//!
//! Update blocks per sweep:
//! * β — exact conjugate Gaussian draw given everything else;
//! * each covariance parameter — random-walk Metropolis on the log scale;
//! * each φ_s — random-walk Metropolis on the atanh scale;
//! * missing responses — exact per-cell Gaussian conditionals.
//!
//! Random-walk scales adapt toward a 0.3 acceptance rate during warmup
//! (Robbins–Monro) and freeze afterwards so the kept draws target the exact
//! posterior. Everything is driven by per-chain ChaCha streams, so output is
//! a pure function of (data, priors, config).

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use super::likelihood::{conditional_residuals, log_likelihood_complete, SpatialPrecision};
use super::{
    McmcConfig, ModelError, ModelParams, ObservationSet, ParamPrior, PosteriorSamples, PriorSpec,
};
use crate::covariance::SpatialCovParams;
use crate::network::StreamNetwork;

const COV_PARAM_NAMES: [&str; 7] = [
    "sigma2_u", "alpha_u", "sigma2_d", "alpha_d", "sigma2_e", "alpha_e", "sigma2_0",
];

/// Robbins–Monro target acceptance rate for the random-walk blocks.
const TARGET_ACCEPT: f64 = 0.3;
/// Consecutive rejections before a block is declared divergent.
const DIVERGENCE_WINDOW: usize = 1500;

fn cov_get(p: &SpatialCovParams, idx: usize) -> f64 {
    match idx {
        0 => p.sigma2_u,
        1 => p.alpha_u,
        2 => p.sigma2_d,
        3 => p.alpha_d,
        4 => p.sigma2_e,
        5 => p.alpha_e,
        6 => p.sigma2_0,
        _ => unreachable!(),
    }
}

fn cov_set(p: &mut SpatialCovParams, idx: usize, v: f64) {
    match idx {
        0 => p.sigma2_u = v,
        1 => p.alpha_u = v,
        2 => p.sigma2_d = v,
        3 => p.alpha_d = v,
        4 => p.sigma2_e = v,
        5 => p.alpha_e = v,
        6 => p.sigma2_0 = v,
        _ => unreachable!(),
    }
}

fn cov_prior(priors: &PriorSpec, idx: usize) -> &ParamPrior {
    match idx {
        0 => &priors.sigma2_u,
        1 => &priors.alpha_u,
        2 => &priors.sigma2_d,
        3 => &priors.alpha_d,
        4 => &priors.sigma2_e,
        5 => &priors.alpha_e,
        6 => &priors.sigma2_0,
        _ => unreachable!(),
    }
}

/// Pushes a value into the interior of a prior's support.
fn clip_into(prior: &ParamPrior, v: f64) -> f64 {
    match *prior {
        ParamPrior::Fixed { value } => value,
        ParamPrior::Uniform { lo, hi } => {
            let margin = 1e-6 * (hi - lo);
            v.clamp(lo + margin, hi - margin)
        }
        ParamPrior::Normal { .. } => v,
        ParamPrior::Gamma { .. } => v.max(1e-8),
        ParamPrior::AtanhNormal { .. } => v.clamp(-0.99, 0.99),
    }
}

/// One adaptive random-walk block.
struct RwBlock {
    name: String,
    /// Log of the proposal standard deviation (adapted in log space).
    log_scale: f64,
    proposals: usize,
    accepted_total: usize,
    proposals_kept: usize,
    accepted_kept: usize,
    consecutive_rejects: usize,
}

impl RwBlock {
    fn new(name: String, scale: f64) -> Self {
        Self {
            name,
            log_scale: scale.ln(),
            proposals: 0,
            accepted_total: 0,
            proposals_kept: 0,
            accepted_kept: 0,
            consecutive_rejects: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Records a proposal outcome and, during warmup, nudges the scale
    /// toward the target acceptance rate.
    fn record(
        &mut self,
        log_alpha: f64,
        accepted: bool,
        warming: bool,
        kept_phase: bool,
    ) -> Result<(), ModelError> {
        self.proposals += 1;
        if accepted {
            self.accepted_total += 1;
            self.consecutive_rejects = 0;
        } else {
            self.consecutive_rejects += 1;
            if self.consecutive_rejects >= DIVERGENCE_WINDOW {
                return Err(ModelError::DivergentChain {
                    block: self.name.clone(),
                    window: DIVERGENCE_WINDOW,
                });
            }
        }
        if kept_phase {
            self.proposals_kept += 1;
            if accepted {
                self.accepted_kept += 1;
            }
        }
        if warming {
            let alpha = log_alpha.exp().min(1.0);
            let gain = (self.proposals as f64).powf(-0.6);
            self.log_scale += gain * (alpha - TARGET_ACCEPT);
            self.log_scale = self.log_scale.clamp(-9.0, 3.0);
        }
        Ok(())
    }
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    imputed: Vec<Vec<f64>>,
    /// (accepted, proposed) per block over the kept phase.
    accept_counts: BTreeMap<String, (usize, usize)>,
}

/// Draws from the posterior of the VAR(1) spatial model.
///
/// Missing responses are treated as latent variables and sampled alongside
/// the parameters; their draws are returned in
/// [`PosteriorSamples::imputed_y_draws`]. Deterministic for a fixed
/// `cfg.seed`: chains use independent, reproducible RNG streams.
pub fn sample_posterior(
    obs: &ObservationSet,
    net: &StreamNetwork,
    priors: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSamples, ModelError> {
    obs.check_alignment(net)?;
    cfg.validate()?;
    priors.validate(obs.n_covariates(), obs.n_sites())?;

    let missing_cells = collect_missing_cells(obs);
    let mut all_draws: Vec<Vec<f64>> = Vec::new();
    let mut all_imputed: Vec<Vec<f64>> = Vec::new();
    let mut chain_ids: Vec<usize> = Vec::new();
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    for chain in 0..cfg.chains {
        let out = run_chain(obs, net, priors, cfg, chain, &missing_cells)?;
        for (d, i) in out.draws.into_iter().zip(out.imputed) {
            all_draws.push(d);
            all_imputed.push(i);
            chain_ids.push(chain);
        }
        for (k, (a, n)) in out.accept_counts {
            let e = counts.entry(k).or_insert((0, 0));
            e.0 += a;
            e.1 += n;
        }
    }

    let p = obs.n_covariates();
    let s = obs.n_sites();
    let dim = p + 7 + s;
    let m = all_draws.len();
    let draws = DMatrix::from_fn(m, dim, |r, c| all_draws[r][c]);
    let imputed = DMatrix::from_fn(m, missing_cells.len(), |r, c| all_imputed[r][c]);

    let mut acceptance_rates: BTreeMap<String, f64> = counts
        .into_iter()
        .map(|(k, (a, n))| (k, if n == 0 { 1.0 } else { a as f64 / n as f64 }))
        .collect();
    // Gibbs blocks always accept.
    acceptance_rates.insert("beta".into(), 1.0);
    if !missing_cells.is_empty() {
        acceptance_rates.insert("missing".into(), 1.0);
    }

    Ok(PosteriorSamples::new(
        draws,
        PosteriorSamples::layout_names(p, s),
        chain_ids,
        acceptance_rates,
        imputed,
        missing_cells,
        p,
        s,
        cfg.seed,
    ))
}

/// Missing cells in column-major order (tick-by-tick), matching the imputed
/// draw layout.
fn collect_missing_cells(obs: &ObservationSet) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for t in 0..obs.n_times() {
        for s in 0..obs.n_sites() {
            if obs.is_missing(s, t) {
                cells.push((s, t));
            }
        }
    }
    cells
}

fn run_chain(
    obs: &ObservationSet,
    net: &StreamNetwork,
    priors: &PriorSpec,
    cfg: &McmcConfig,
    chain: usize,
    missing_cells: &[(usize, usize)],
) -> Result<ChainOutput, ModelError> {
    let s = obs.n_sites();
    let p = obs.n_covariates();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    // ── initialization ──
    let (beta0, resid_var, phi0) = least_squares_start(obs);
    let mut y = obs.y().clone();
    fill_missing_with_row_means(&mut y, obs);

    let active_sills: Vec<usize> = [0usize, 2, 4]
        .into_iter()
        .filter(|&i| !cov_prior(priors, i).is_fixed())
        .collect();
    let n_var_parts = active_sills.len() + usize::from(!priors.sigma2_0.is_fixed());
    let part = resid_var.max(1e-6) / n_var_parts.max(1) as f64;
    let max_stream = net.max_stream_distance().max(1e-3);
    let max_euclid = net
        .d_euclid()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-3);

    let mut spatial = SpatialCovParams {
        sigma2_u: clip_into(&priors.sigma2_u, jitter(part, &mut rng)),
        alpha_u: clip_into(&priors.alpha_u, jitter(max_stream / 2.0, &mut rng)),
        sigma2_d: clip_into(&priors.sigma2_d, jitter(part, &mut rng)),
        alpha_d: clip_into(&priors.alpha_d, jitter(max_stream / 2.0, &mut rng)),
        sigma2_e: clip_into(&priors.sigma2_e, jitter(part, &mut rng)),
        alpha_e: clip_into(&priors.alpha_e, jitter(max_euclid / 2.0, &mut rng)),
        sigma2_0: clip_into(&priors.sigma2_0, jitter(part, &mut rng)),
    };
    // A zero-variance start is invalid when every component is switched off
    // by clipping; nudge the nugget in that corner case.
    if spatial.validate().is_err() {
        spatial.sigma2_0 = spatial.sigma2_0.max(1e-6);
    }
    let mut theta = ModelParams {
        beta: beta0,
        spatial,
        phi: DVector::from_fn(s, |i, _| {
            clip_into(priors.phi_prior(i, s).unwrap(), phi0[i])
        }),
    };
    let mut prec = SpatialPrecision::build(net, &theta)?;
    let mut loglik = log_likelihood_complete(&y, &obs.x, &theta, &prec);

    // ── blocks ──
    let scale_for = |name: &str| -> f64 {
        cfg.proposal_scales
            .as_ref()
            .and_then(|m| m.get(name).cloned())
            .unwrap_or(0.3)
    };
    let mut cov_blocks: Vec<(usize, RwBlock)> = (0..7)
        .filter(|&i| !cov_prior(priors, i).is_fixed())
        .map(|i| {
            (
                i,
                RwBlock::new(COV_PARAM_NAMES[i].to_string(), scale_for(COV_PARAM_NAMES[i])),
            )
        })
        .collect();
    let mut phi_blocks: Vec<(usize, RwBlock)> = (0..s)
        .filter(|&i| !priors.phi_prior(i, s).unwrap().is_fixed())
        .map(|i| {
            let name = format!("phi{i}");
            let scale = scale_for(&name);
            (i, RwBlock::new(name, scale))
        })
        .collect();
    let beta_free: Vec<usize> = (0..p).filter(|&j| !priors.beta[j].is_fixed()).collect();
    for j in 0..p {
        if let ParamPrior::Fixed { value } = priors.beta[j] {
            theta.beta[j] = value;
        }
    }

    let kept = cfg.kept_per_chain();
    let mut draws = Vec::with_capacity(kept);
    let mut imputed = Vec::with_capacity(kept);

    for iter in 0..cfg.iters {
        let warming = iter < cfg.warmup;
        let kept_phase = !warming;

        // β | rest — conjugate Gaussian.
        if !beta_free.is_empty() {
            gibbs_beta(&mut theta, &y, obs, priors, &prec, &beta_free, &mut rng);
            loglik = log_likelihood_complete(&y, &obs.x, &theta, &prec);
        }

        // Covariance parameters — log-scale random walks.
        for (idx, block) in cov_blocks.iter_mut() {
            let prior = cov_prior(priors, *idx);
            let cur = cov_get(&theta.spatial, *idx);
            let z: f64 = rng.sample(StandardNormal);
            let cand = cur * (block.scale() * z).exp();
            let lp_cand = prior.log_density(cand);
            let mut log_alpha = f64::NEG_INFINITY;
            let mut accepted = false;
            if lp_cand > f64::NEG_INFINITY {
                let mut cand_spatial = theta.spatial;
                cov_set(&mut cand_spatial, *idx, cand);
                let cand_theta = ModelParams {
                    spatial: cand_spatial,
                    ..theta.clone()
                };
                if let Ok(cand_prec) = SpatialPrecision::build(net, &cand_theta) {
                    let cand_ll = log_likelihood_complete(&y, &obs.x, &cand_theta, &cand_prec);
                    // log-scale proposal Jacobian: +ln cand − ln cur.
                    log_alpha = cand_ll - loglik + lp_cand - prior.log_density(cur)
                        + cand.ln()
                        - cur.ln();
                    if rng.random::<f64>().ln() < log_alpha {
                        theta.spatial = cand_spatial;
                        prec = cand_prec;
                        loglik = cand_ll;
                        accepted = true;
                    }
                }
            }
            block.record(log_alpha, accepted, warming, kept_phase)?;
        }

        // φ_s — atanh-scale random walks (covariance unchanged).
        for (site, block) in phi_blocks.iter_mut() {
            let prior = priors.phi_prior(*site, s).unwrap();
            let cur = theta.phi[*site];
            let z: f64 = rng.sample(StandardNormal);
            let cand = (cur.atanh() + block.scale() * z).tanh();
            let lp_cand = prior.log_density(cand);
            let mut log_alpha = f64::NEG_INFINITY;
            let mut accepted = false;
            if lp_cand > f64::NEG_INFINITY && cand.abs() < 1.0 {
                let mut cand_theta = theta.clone();
                cand_theta.phi[*site] = cand;
                let cand_ll = log_likelihood_complete(&y, &obs.x, &cand_theta, &prec);
                // atanh-scale proposal Jacobian: +ln(1−cand²) − ln(1−cur²).
                log_alpha = cand_ll - loglik + lp_cand - prior.log_density(cur)
                    + (1.0 - cand * cand).ln()
                    - (1.0 - cur * cur).ln();
                if rng.random::<f64>().ln() < log_alpha {
                    theta = cand_theta;
                    loglik = cand_ll;
                    accepted = true;
                }
            }
            block.record(log_alpha, accepted, warming, kept_phase)?;
        }

        // Missing responses — exact Gaussian conditionals per cell.
        if !missing_cells.is_empty() {
            gibbs_missing(&mut y, &theta, obs, &prec, missing_cells, &mut rng);
            loglik = log_likelihood_complete(&y, &obs.x, &theta, &prec);
        }

        if !warming && (iter - cfg.warmup) % cfg.thin == 0 {
            let mut row = Vec::with_capacity(p + 7 + s);
            row.extend(theta.beta.iter().cloned());
            for i in 0..7 {
                row.push(cov_get(&theta.spatial, i));
            }
            row.extend(theta.phi.iter().cloned());
            draws.push(row);
            imputed.push(
                missing_cells
                    .iter()
                    .map(|&(si, ti)| y[(si, ti)])
                    .collect(),
            );
        }
    }

    let mut accept_counts = BTreeMap::new();
    for (_, b) in cov_blocks.iter().chain(phi_blocks.iter()) {
        accept_counts.insert(b.name.clone(), (b.accepted_kept, b.proposals_kept));
    }
    Ok(ChainOutput {
        draws,
        imputed,
        accept_counts,
    })
}

/// Small multiplicative jitter so chains start from dispersed points.
fn jitter(v: f64, rng: &mut ChaCha8Rng) -> f64 {
    v * (rng.random_range(-0.2..0.2f64)).exp()
}

/// Ordinary least squares over observed cells for starting values: β̂, the
/// residual variance, and per-site lag-1 residual autocorrelations.
fn least_squares_start(obs: &ObservationSet) -> (DVector<f64>, f64, Vec<f64>) {
    let s = obs.n_sites();
    let t_len = obs.n_times();
    let p = obs.n_covariates();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for t in 0..t_len {
        let xt = obs.x(t);
        for i in 0..s {
            if obs.is_missing(i, t) {
                continue;
            }
            let row = xt.row(i);
            for a in 0..p {
                xty[a] += row[a] * obs.y()[(i, t)];
                for b in 0..p {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..p {
        xtx[(a, a)] += 1e-8;
    }
    let beta = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .unwrap_or_else(|| DVector::zeros(p));

    // Residuals per site for variance and lag-1 autocorrelation.
    let mut all_resid = Vec::new();
    let mut phi = vec![0.0; s];
    for i in 0..s {
        let mut series = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if obs.is_missing(i, t) {
                series.push(f64::NAN);
            } else {
                let fit: f64 = (0..p).map(|a| obs.x(t)[(i, a)] * beta[a]).sum();
                let e = obs.y()[(i, t)] - fit;
                series.push(e);
                all_resid.push(e);
            }
        }
        let clean: Vec<f64> = series.iter().cloned().filter(|v| v.is_finite()).collect();
        phi[i] = crate::stats::lag1_autocorr(&clean).clamp(-0.8, 0.8);
    }
    let var = crate::stats::variance(&all_resid).max(1e-6);
    (beta, var, phi)
}

fn fill_missing_with_row_means(y: &mut DMatrix<f64>, obs: &ObservationSet) {
    let grand = crate::stats::mean(&obs.observed_values());
    let grand = if grand.is_finite() { grand } else { 0.0 };
    for i in 0..obs.n_sites() {
        let row: Vec<f64> = (0..obs.n_times())
            .filter(|&t| !obs.is_missing(i, t))
            .map(|t| obs.y()[(i, t)])
            .collect();
        let fill = if row.is_empty() {
            grand
        } else {
            crate::stats::mean(&row)
        };
        for t in 0..obs.n_times() {
            if obs.is_missing(i, t) {
                y[(i, t)] = fill;
            }
        }
    }
}

/// Conjugate β draw. With A_t = X_t − ΦX_{t−1} and c_t = y_t − Φy_{t−1}
/// (A_1 = X_1, c_1 = y_1), the conditional posterior of the free
/// coefficients is Gaussian with precision B₀⁻¹ + Σ A_t'QA_t.
fn gibbs_beta(
    theta: &mut ModelParams,
    y: &DMatrix<f64>,
    obs: &ObservationSet,
    priors: &PriorSpec,
    prec: &SpatialPrecision,
    free: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let s = obs.n_sites();
    let t_len = obs.n_times();
    let p = obs.n_covariates();
    let k = free.len();

    let mut post_prec = DMatrix::<f64>::zeros(k, k);
    let mut post_b = DVector::<f64>::zeros(k);
    for (a_pos, &a) in free.iter().enumerate() {
        match priors.beta[a] {
            ParamPrior::Normal { mean, sd } => {
                post_prec[(a_pos, a_pos)] += 1.0 / (sd * sd);
                post_b[a_pos] += mean / (sd * sd);
            }
            _ => unreachable!("validated: free coefficient priors are normal"),
        }
    }

    let mut a_t = DMatrix::<f64>::zeros(s, p);
    let mut c_t = DVector::<f64>::zeros(s);
    for t in 0..t_len {
        if t == 0 {
            a_t.copy_from(obs.x(0));
            for i in 0..s {
                c_t[i] = y[(i, 0)];
            }
        } else {
            let xt = obs.x(t);
            let xp = obs.x(t - 1);
            for i in 0..s {
                let phi = theta.phi[i];
                for j in 0..p {
                    a_t[(i, j)] = xt[(i, j)] - phi * xp[(i, j)];
                }
                c_t[i] = y[(i, t)] - phi * y[(i, t - 1)];
            }
        }
        // Pinned coefficients shift the response: c̃ = c − A[:,fixed]·β_fixed.
        let mut c_adj = c_t.clone();
        for j in 0..p {
            if !free.contains(&j) {
                for i in 0..s {
                    c_adj[i] -= a_t[(i, j)] * theta.beta[j];
                }
            }
        }
        let a_free = DMatrix::from_fn(s, k, |i, j| a_t[(i, free[j])]);
        let qa = &prec.q * &a_free;
        post_prec += a_free.transpose() * &qa;
        post_b += qa.transpose() * &c_adj;
    }

    // Draw β_free ~ N(P⁻¹b, P⁻¹) via the Cholesky factor of P.
    let mut ridge = 0.0;
    let chol = loop {
        let mut m = post_prec.clone();
        for i in 0..k {
            m[(i, i)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            break c;
        }
        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 10.0 };
        assert!(ridge < 1.0, "coefficient posterior precision is singular");
    };
    let mean = chol.solve(&post_b);
    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Solve Lᵀ u = z so that u has covariance P⁻¹.
    let u = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("triangular solve");
    for (pos, &j) in free.iter().enumerate() {
        theta.beta[j] = mean[pos] + u[pos];
    }
}

/// Per-cell Gaussian conditional updates of the latent missing responses.
///
/// For cell (s,t) with conditional residuals r, the full conditional of the
/// latent value is Gaussian with precision Q_ss(1 + φ_s²·[t<T]) around the
/// current value plus gradient/precision.
fn gibbs_missing(
    y: &mut DMatrix<f64>,
    theta: &ModelParams,
    obs: &ObservationSet,
    prec: &SpatialPrecision,
    cells: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) {
    let t_len = obs.n_times();
    let mut resid = conditional_residuals(y, &obs.x, theta);
    for &(s_i, t_i) in cells {
        let q_row = prec.q.row(s_i);
        let g_t: f64 = q_row.dot(&resid.column(t_i).transpose());
        let phi = theta.phi[s_i];
        let (grad, precision) = if t_i + 1 < t_len {
            let g_next: f64 = q_row.dot(&resid.column(t_i + 1).transpose());
            (
                -g_t + phi * g_next,
                prec.q[(s_i, s_i)] * (1.0 + phi * phi),
            )
        } else {
            (-g_t, prec.q[(s_i, s_i)])
        };
        let mean_shift = grad / precision;
        let z: f64 = rng.sample(StandardNormal);
        let delta = mean_shift + z / precision.sqrt();
        y[(s_i, t_i)] += delta;
        resid[(s_i, t_i)] += delta;
        if t_i + 1 < t_len {
            resid[(s_i, t_i + 1)] -= phi * delta;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::total_covariance;
    use crate::model::CovComponents;

    /// Simulates VAR(1) data with tail-down covariance for testing.
    fn simulate_var1(
        net: &StreamNetwork,
        theta: &ModelParams,
        t_len: usize,
        p: usize,
        seed: u64,
    ) -> ObservationSet {
        let s = net.n_sites();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = total_covariance(net, &theta.spatial).unwrap();
        let chol = v.cholesky().unwrap();
        let x: Vec<DMatrix<f64>> = (0..t_len)
            .map(|_| {
                DMatrix::from_fn(s, p, |_, j| {
                    if j == 0 {
                        1.0
                    } else {
                        rng.sample::<f64, _>(rand_distr::StandardNormal)
                    }
                })
            })
            .collect();
        let mut y = DMatrix::zeros(s, t_len);
        let mut prev_centered = DVector::<f64>::zeros(s);
        for t in 0..t_len {
            let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let noise = chol.l() * z;
            let xb = &x[t] * &theta.beta;
            for i in 0..s {
                let ar = if t > 0 { theta.phi[i] * prev_centered[i] } else { 0.0 };
                y[(i, t)] = xb[i] + ar + noise[i];
            }
            for i in 0..s {
                prev_centered[i] = y[(i, t)] - xb[i];
            }
        }
        let sites = net.sites().iter().map(|x| x.site_id.clone()).collect();
        ObservationSet::from_complete(y, x, sites, (0..t_len as i64).collect()).unwrap()
    }

    fn quick_cfg(seed: u64) -> McmcConfig {
        McmcConfig {
            chains: 1,
            iters: 400,
            warmup: 200,
            thin: 1,
            seed,
            proposal_scales: None,
        }
    }

    #[test]
    fn same_seed_reproduces_draws() {
        let net = StreamNetwork::generate_random(8, 3, 2).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![1.0, 0.5],
            spatial: SpatialCovParams::taildown_only(2.0, 4.0, 0.3),
            phi: nalgebra::dvector![0.5, 0.5, 0.5],
        };
        let obs = simulate_var1(&net, &truth, 30, 2, 77);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let cfg = McmcConfig {
            chains: 2,
            iters: 60,
            warmup: 30,
            ..Default::default()
        };
        let a = sample_posterior(&obs, &net, &priors, &cfg).unwrap();
        let b = sample_posterior(&obs, &net, &priors, &cfg).unwrap();
        assert_eq!(a.draws(), b.draws());
        assert_eq!(a.chain_ids(), b.chain_ids());

        let other = sample_posterior(
            &obs,
            &net,
            &priors,
            &McmcConfig {
                seed: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.draws(), other.draws());
    }

    #[test]
    fn every_draw_satisfies_param_invariants() {
        let net = StreamNetwork::generate_random(8, 3, 4).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![0.5],
            spatial: SpatialCovParams::taildown_only(1.5, 5.0, 0.2),
            phi: nalgebra::dvector![0.3, 0.3, 0.3],
        };
        let obs = simulate_var1(&net, &truth, 40, 1, 5);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let samples = sample_posterior(&obs, &net, &priors, &quick_cfg(3)).unwrap();
        assert!(samples.n_draws() >= 1);
        for m in 0..samples.n_draws() {
            samples.params_at(m).validate().unwrap();
        }
        // Tail-up was off: its sill stays pinned at zero in every draw.
        let sig_u = samples.param_draws("sigma2_u").unwrap();
        assert!(sig_u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phi_posterior_concentrates_near_zero_for_independent_data() {
        let net = StreamNetwork::generate_random(8, 3, 6).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![2.0],
            spatial: SpatialCovParams::taildown_only(1.0, 4.0, 0.2),
            phi: nalgebra::dvector![0.0, 0.0, 0.0],
        };
        let obs = simulate_var1(&net, &truth, 200, 1, 8);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let cfg = McmcConfig {
            chains: 1,
            iters: 700,
            warmup: 300,
            seed: 4,
            ..Default::default()
        };
        let samples = sample_posterior(&obs, &net, &priors, &cfg).unwrap();
        for i in 0..3 {
            let mean = samples.posterior_mean(&format!("phi{i}")).unwrap();
            assert!(mean.abs() < 0.2, "phi{i} posterior mean {mean}");
        }
    }

    #[test]
    fn beta_posterior_approaches_gls() {
        let net = StreamNetwork::generate_random(12, 5, 9).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![1.0, -0.7],
            spatial: SpatialCovParams::taildown_only(2.0, 5.0, 0.3),
            phi: nalgebra::dvector![0.5, 0.5, 0.5, 0.5, 0.5],
        };
        let obs = simulate_var1(&net, &truth, 400, 2, 10);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let cfg = McmcConfig {
            chains: 1,
            iters: 600,
            warmup: 300,
            seed: 2,
            ..Default::default()
        };
        let samples = sample_posterior(&obs, &net, &priors, &cfg).unwrap();

        // Generalized least squares at the true covariance and φ.
        let v = total_covariance(&net, &truth.spatial).unwrap();
        let q = v.cholesky().unwrap().inverse();
        let s = 5;
        let p = 2;
        let mut xtqx = DMatrix::<f64>::zeros(p, p);
        let mut xtqy = DVector::<f64>::zeros(p);
        for t in 0..obs.n_times() {
            let mut a_t = obs.x(t).clone();
            let mut c_t = DVector::from_fn(s, |i, _| obs.y()[(i, t)]);
            if t > 0 {
                for i in 0..s {
                    for j in 0..p {
                        a_t[(i, j)] -= truth.phi[i] * obs.x(t - 1)[(i, j)];
                    }
                    c_t[i] -= truth.phi[i] * obs.y()[(i, t - 1)];
                }
            }
            let qa = &q * &a_t;
            xtqx += a_t.transpose() * &qa;
            xtqy += qa.transpose() * &c_t;
        }
        let gls = xtqx.cholesky().unwrap().solve(&xtqy);
        for j in 0..p {
            let post = samples.posterior_mean(&format!("beta{j}")).unwrap();
            assert!(
                (post - gls[j]).abs() < 0.1,
                "beta{j}: posterior {post} vs GLS {}",
                gls[j]
            );
        }
    }

    #[test]
    fn missing_cells_are_sampled_and_recorded() {
        let net = StreamNetwork::generate_random(8, 4, 11).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![1.0],
            spatial: SpatialCovParams::taildown_only(2.0, 4.0, 0.2),
            phi: nalgebra::dvector![0.6, 0.6, 0.6, 0.6],
        };
        let complete = simulate_var1(&net, &truth, 50, 1, 12);
        let holdout: Vec<(usize, usize)> = vec![(0, 5), (1, 10), (2, 20), (3, 33), (0, 44)];
        let obs = complete.with_cells_missing(&holdout);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let samples = sample_posterior(&obs, &net, &priors, &quick_cfg(5)).unwrap();
        assert_eq!(samples.missing_cells(), holdout.as_slice());
        assert_eq!(samples.imputed_y_draws().ncols(), holdout.len());
        // Posterior means of the latent cells should land near the held-out
        // truth: within 3 marginal SDs of the data scale.
        let sd = crate::stats::std_dev(&complete.observed_values());
        for (k, &(s_i, t_i)) in holdout.iter().enumerate() {
            let col: Vec<f64> = samples.imputed_y_draws().column(k).iter().cloned().collect();
            let m = crate::stats::mean(&col);
            assert!(m.is_finite());
            assert!(
                (m - complete.y()[(s_i, t_i)]).abs() < 3.0 * sd,
                "cell ({s_i},{t_i}): imputed {m} vs truth {}",
                complete.y()[(s_i, t_i)]
            );
        }
    }

    #[test]
    fn acceptance_rates_reported_in_reasonable_band() {
        let net = StreamNetwork::generate_random(10, 4, 13).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![0.0],
            spatial: SpatialCovParams::taildown_only(1.5, 6.0, 0.3),
            phi: nalgebra::dvector![0.4, 0.4, 0.4, 0.4],
        };
        let obs = simulate_var1(&net, &truth, 80, 1, 14);
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let cfg = McmcConfig {
            chains: 1,
            iters: 900,
            warmup: 400,
            seed: 6,
            ..Default::default()
        };
        let samples = sample_posterior(&obs, &net, &priors, &cfg).unwrap();
        let rates = samples.acceptance_rates();
        assert_eq!(rates["beta"], 1.0);
        for (name, rate) in rates {
            if name == "beta" || name == "missing" {
                continue;
            }
            assert!(
                (0.1..=0.6).contains(rate),
                "block {name} acceptance {rate} outside adapted band"
            );
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let net = StreamNetwork::generate_random(4, 2, 1).unwrap();
        let y = DMatrix::zeros(2, 3);
        let x = vec![DMatrix::from_element(2, 1, 1.0); 3];
        let sites = net.sites().iter().map(|s| s.site_id.clone()).collect();
        let obs = ObservationSet::from_complete(y, x, sites, vec![0, 1, 2]).unwrap();
        let priors = PriorSpec::default_for(&obs, &net, CovComponents::default());
        let bad = McmcConfig {
            iters: 10,
            warmup: 10,
            ..Default::default()
        };
        assert!(matches!(
            sample_posterior(&obs, &net, &priors, &bad),
            Err(ModelError::InvalidConfig(_))
        ));
    }
}
