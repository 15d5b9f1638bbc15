//! Catchment-level event labeling from a shared hidden Markov chain.

use nalgebra::DMatrix;

use super::ImpaleError;
use crate::detectors::hmm_core::{fit_diag_gaussian, BaumWelchConfig};

/// Per-tick regime label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventState {
    Ambient,
    Event,
}

impl EventState {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventState::Ambient => "ambient",
            EventState::Event => "event",
        }
    }
}

impl std::fmt::Display for EventState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EventState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ambient" => Ok(EventState::Ambient),
            "event" => Ok(EventState::Event),
            other => Err(format!(
                "unknown event state '{other}' (expected ambient or event)"
            )),
        }
    }
}

/// Smoothed event labels for every time tick: `states[t]` is `Event`
/// exactly when `probabilities[t] ≥ 0.5`, and the ambient probability is
/// `1 − probabilities[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLabels {
    pub states: Vec<EventState>,
    pub probabilities: Vec<f64>,
}

impl EventLabels {
    pub fn n_times(&self) -> usize {
        self.states.len()
    }

    pub fn n_events(&self) -> usize {
        self.states
            .iter()
            .filter(|&&s| s == EventState::Event)
            .count()
    }
}

/// Label each time tick ambient or event by fitting an `l`-state hidden
/// Markov chain shared across sites, with an S-dimensional diagonal-Gaussian
/// emission per state. The event state is the one whose fitted mean,
/// averaged across sites, is largest; its smoothed probability is reported
/// per tick. If the fit collapses (no state separates from the rest in mean
/// level), every tick is ambient with probability 0.
pub fn detect_events_mhmm(level: &DMatrix<f64>, l: usize) -> Result<EventLabels, ImpaleError> {
    let (s, t_len) = level.shape();
    if s == 0 || t_len < 2 {
        return Err(ImpaleError::InsufficientData(
            "need at least one site and two ticks".into(),
        ));
    }
    if level.iter().any(|v| !v.is_finite()) {
        return Err(ImpaleError::InvalidInput(
            "level matrix has missing or non-finite cells; impute first".into(),
        ));
    }

    let fit = fit_diag_gaussian(level, &BaumWelchConfig {
        states: l,
        ..BaumWelchConfig::default()
    })?;

    // Cross-site average level per state; the event state is the largest.
    let site_means: Vec<f64> = fit.means.iter().map(|m| m.mean()).collect();
    let event = site_means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite means"))
        .map(|(j, _)| j)
        .expect("at least two states");
    let runner_up = site_means
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != event)
        .map(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = site_means.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
    if site_means[event] - runner_up <= 1e-9 * (1.0 + scale) {
        return Ok(EventLabels {
            states: vec![EventState::Ambient; t_len],
            probabilities: vec![0.0; t_len],
        });
    }

    let probabilities: Vec<f64> = (0..t_len)
        .map(|t| fit.gamma[(t, event)].clamp(0.0, 1.0))
        .collect();
    let states = probabilities
        .iter()
        .map(|&p| {
            if p >= 0.5 {
                EventState::Event
            } else {
                EventState::Ambient
            }
        })
        .collect();
    Ok(EventLabels {
        states,
        probabilities,
    })
}
