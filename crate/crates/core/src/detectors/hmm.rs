//! Hidden-Markov detector on model residuals: one chain per site with
//! pooled initial, transition, and emission parameters, fit by Baum–Welch;
//! cells are flagged where the smoothed anomalous-state probability
//! exceeds one half.

use nalgebra::DMatrix;

use super::hmm_core::{fit_pooled_gaussian, BaumWelchConfig};
use super::{AnomalyLabels, CellFlag, DetectorError, DetectorMethod};
use crate::model::ResidualSeries;

/// Fitted residual HMM shared across sites.
#[derive(Debug, Clone)]
pub struct HmmFit {
    pub states: usize,
    /// Initial state distribution, summing to one.
    pub init: Vec<f64>,
    /// Row-stochastic transition matrix.
    pub trans: DMatrix<f64>,
    /// Per-state emission means and variances (unequal variances).
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// Per-site T×L smoothed state probabilities.
    pub state_probs: Vec<DMatrix<f64>>,
    /// Indices of states treated as anomalous; nonempty for L ≥ 2.
    pub anomalous: Vec<usize>,
    pub loglik: f64,
}

/// Flags residuals via an L-state Gaussian hidden Markov model.
///
/// With two states the anomalous one has the larger emission variance
/// (mean magnitude breaks ties); with more states the bulk state is the
/// one occupied most, and the anomalous state maximizes distance from it,
/// |μ − μ_bulk| + σ. Scores are smoothed anomalous-state probabilities.
pub fn detect_hmm(
    residuals: &ResidualSeries,
    l: usize,
) -> Result<(HmmFit, AnomalyLabels), DetectorError> {
    if l < 2 {
        return Err(DetectorError::InvalidInput(format!(
            "HMM needs at least two states, got {l}"
        )));
    }
    let (s, t_len) = residuals.resid.shape();
    let mut seqs: Vec<Vec<Option<f64>>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut seq = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if residuals.missing[(i, t)] {
                seq.push(None);
            } else {
                let e = residuals.resid[(i, t)];
                if !e.is_finite() {
                    return Err(DetectorError::InvalidInput(format!(
                        "non-finite residual at observed cell ({i},{t})"
                    )));
                }
                seq.push(Some(e));
            }
        }
        seqs.push(seq);
    }

    let cfg = BaumWelchConfig {
        states: l,
        ..BaumWelchConfig::default()
    };
    let pooled = fit_pooled_gaussian(&seqs, &cfg)?;
    let anomalous = vec![anomalous_state(&pooled.means, &pooled.vars, &pooled.gammas)];

    let mut flags = DMatrix::from_element(s, t_len, CellFlag::Normal);
    let mut scores = DMatrix::from_element(s, t_len, f64::NAN);
    for i in 0..s {
        for t in 0..t_len {
            if residuals.missing[(i, t)] {
                flags[(i, t)] = CellFlag::Missing;
                continue;
            }
            let p: f64 = anomalous.iter().map(|&j| pooled.gammas[i][(t, j)]).sum();
            scores[(i, t)] = p.clamp(0.0, 1.0);
            if scores[(i, t)] > 0.5 {
                flags[(i, t)] = CellFlag::Anomalous;
            }
        }
    }

    let fit = HmmFit {
        states: l,
        init: pooled.init,
        trans: pooled.trans,
        means: pooled.means,
        vars: pooled.vars,
        state_probs: pooled.gammas,
        anomalous,
        loglik: pooled.loglik,
    };
    let labels = AnomalyLabels {
        flags,
        scores,
        method: DetectorMethod::Hmm,
        iteration: 1,
        threshold: 0.5,
    };
    labels.validate()?;
    Ok((fit, labels))
}

/// Picks the anomalous state. Two states: larger variance, then larger
/// mean magnitude. More states: the one farthest from the most-occupied
/// (bulk) state by |μ − μ_bulk| + σ.
fn anomalous_state(means: &[f64], vars: &[f64], gammas: &[DMatrix<f64>]) -> usize {
    let l = means.len();
    if l == 2 {
        let key = |j: usize| (vars[j], means[j].abs());
        return if key(1) > key(0) { 1 } else { 0 };
    }
    let occupancy: Vec<f64> = (0..l)
        .map(|j| gammas.iter().map(|g| g.column(j).sum()).sum())
        .collect();
    let bulk = (0..l)
        .max_by(|&a, &b| occupancy[a].partial_cmp(&occupancy[b]).unwrap())
        .unwrap();
    (0..l)
        .filter(|&j| j != bulk)
        .max_by(|&a, &b| {
            let da = (means[a] - means[bulk]).abs() + vars[a].sqrt();
            let db = (means[b] - means[bulk]).abs() + vars[b].sqrt();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn series(resid: DMatrix<f64>) -> ResidualSeries {
        let missing = resid.map(|v| v.is_nan());
        ResidualSeries { resid, missing }
    }

    #[test]
    fn constant_residuals_yield_zero_flags() {
        let resid = DMatrix::zeros(4, 30);
        let (fit, labels) = detect_hmm(&series(resid), 2).unwrap();
        assert_eq!(labels.n_flagged(), 0);
        assert_eq!(fit.states, 2);
        for k in 0..2 {
            let row: f64 = (0..2).map(|j| fit.trans[(k, j)]).sum();
            assert!((row - 1.0).abs() < 1e-9);
        }
        assert!((fit.init.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(fit.anomalous.len(), 1);
    }

    #[test]
    fn variance_bursts_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = 12;
        let t_len = 150;
        // Quiet N(0, 0.5²) background with a loud N(0, 4²) burst per site.
        let mut resid = DMatrix::from_fn(s, t_len, |_, _| {
            0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        let mut burst_cells = Vec::new();
        for i in 0..s {
            let start = 40 + 3 * i;
            for t in start..start + 8 {
                resid[(i, t)] = 4.0 * rng.sample::<f64, _>(StandardNormal)
                    + if rng.random::<bool>() { 5.0 } else { -5.0 };
                burst_cells.push((i, t));
            }
        }
        resid[(0, 0)] = f64::NAN;
        let (fit, labels) = detect_hmm(&series(resid), 2).unwrap();
        let anom = fit.anomalous[0];
        assert!(
            fit.vars[anom] > fit.vars[1 - anom],
            "anomalous state must carry the larger variance"
        );
        let hit = burst_cells
            .iter()
            .filter(|&&(i, t)| labels.is_anomalous(i, t))
            .count();
        assert!(
            hit as f64 / burst_cells.len() as f64 > 0.9,
            "only {hit}/{} burst cells flagged",
            burst_cells.len()
        );
        assert!(labels.flag_rate() < 0.15);
        assert_eq!(labels.flags[(0, 0)], CellFlag::Missing);
        assert!(labels.scores[(0, 0)].is_nan());
    }

    #[test]
    fn three_state_bulk_rule_picks_farthest_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // Bulk near 0, a mild state near 2, a far state near 9.
        let mut resid = DMatrix::from_fn(6, 200, |_, _| rng.sample::<f64, _>(StandardNormal));
        for i in 0..6 {
            for t in 50..70 {
                resid[(i, t)] = 2.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            for t in 120..128 {
                resid[(i, t)] = 9.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let (fit, labels) = detect_hmm(&series(resid), 3).unwrap();
        let anom = fit.anomalous[0];
        // The anomalous state should sit near the far regime.
        assert!(
            fit.means[anom] > 5.0,
            "anomalous mean {} (means {:?})",
            fit.means[anom],
            fit.means
        );
        let far_hits = (0..6)
            .flat_map(|i| (120..128).map(move |t| (i, t)))
            .filter(|&(i, t)| labels.is_anomalous(i, t))
            .count();
        assert!(far_hits as f64 / 48.0 > 0.9, "far hits {far_hits}/48");
    }

    #[test]
    fn rejects_single_state() {
        let resid = DMatrix::zeros(2, 10);
        assert!(detect_hmm(&series(resid), 1).is_err());
    }
}
