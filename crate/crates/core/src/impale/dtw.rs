//! Dynamic time warping with absolute-difference local cost.

use super::ImpaleError;

/// Alignment cost between two series: each step moves forward in one or both
/// series and pays |a_i − b_j|, so repeats and small phase shifts are
/// absorbed rather than penalized. An optional Sakoe–Chiba band restricts
/// |i − j| to at most `window` (widened to the length difference so the
/// corner stays reachable). The cost is symmetric and zero iff an exact
/// monotone matching exists; it is not a metric.
pub fn dtw_distance(a: &[f64], b: &[f64], window: Option<usize>) -> Result<f64, ImpaleError> {
    if a.is_empty() || b.is_empty() {
        return Err(ImpaleError::EmptySeries);
    }
    let (n, m) = (a.len(), b.len());
    let band = window
        .map(|w| w.max(n.abs_diff(m)))
        .unwrap_or(n.max(m));

    // Rolling two-row DP over the (n+1)×(m+1) prefix table.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(band).max(1);
        let hi = (i + band).min(m);
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all monotone alignments, for short series.
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let local = (a[i] - b[j]).abs();
            if i + 1 == a.len() && j + 1 == b.len() {
                return local;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            local + best
        }
        go(a, b, 0, 0)
    }

    #[test]
    fn identical_series_have_zero_cost() {
        let a = [1.0, -2.5, 3.25, 0.0];
        assert_eq!(dtw_distance(&a, &a, None).unwrap(), 0.0);
        assert_eq!(dtw_distance(&a, &a, Some(1)).unwrap(), 0.0);
    }

    #[test]
    fn warping_absorbs_a_repeated_value() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 2.0, 3.0];
        assert_eq!(dtw_distance(&a, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_on_short_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dp = dtw_distance(&a, &b, None).unwrap();
            let exact = brute_force(&a, &b);
            assert!(
                (dp - exact).abs() < 1e-12,
                "dp {dp} vs exhaustive {exact} for {a:?} / {b:?}"
            );
        }
    }

    #[test]
    fn cost_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.random_range(1..=20);
            let m = rng.random_range(1..=20);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let ab = dtw_distance(&a, &b, Some(4)).unwrap();
            let ba = dtw_distance(&b, &a, Some(4)).unwrap();
            assert!(ab >= 0.0);
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn band_constrains_the_alignment() {
        // The spikes sit three ticks apart; unconstrained warping pairs
        // them for zero cost, while a width-1 band keeps them separated.
        let a = [0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0];
        let free = dtw_distance(&a, &b, None).unwrap();
        assert_eq!(free, 0.0);
        let banded = dtw_distance(&a, &b, Some(1)).unwrap();
        assert!(banded >= 18.0);
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(matches!(
            dtw_distance(&[], &[1.0], None),
            Err(ImpaleError::EmptySeries)
        ));
        assert!(matches!(
            dtw_distance(&[1.0], &[], None),
            Err(ImpaleError::EmptySeries)
        ));
    }
}
