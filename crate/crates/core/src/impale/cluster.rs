//! Site clustering from pairwise DTW distances.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::dtw::dtw_distance;
use super::ImpaleError;
use crate::stats::{mean, variance};

/// One agglomeration step. Node ids 0..S are the leaves; step `j` creates
/// node S+j by joining `left` and `right` at the given average-linkage
/// distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Pairwise DTW distances, the full average-linkage dendrogram, and the
/// assignment obtained by cutting it at `k` clusters.
#[derive(Debug, Clone)]
pub struct SiteClustering {
    /// Symmetric S×S DTW distance matrix with zero diagonal.
    pub distances: DMatrix<f64>,
    /// S−1 merges, in agglomeration order.
    pub merges: Vec<Merge>,
    /// Cluster label per site, in 0..k, labeled by first site index.
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl SiteClustering {
    pub fn n_sites(&self) -> usize {
        self.assignment.len()
    }

    /// Sites in each cluster, indexed by label.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (site, &label) in self.assignment.iter().enumerate() {
            groups[label].push(site);
        }
        groups
    }
}

/// Standardize each site's series, compute pairwise DTW distances, and cut
/// an average-linkage dendrogram at `k` clusters. Constant sites standardize
/// to all zeros rather than dividing by a zero deviation.
pub fn cluster_sites(level: &DMatrix<f64>, k: usize) -> Result<SiteClustering, ImpaleError> {
    let (s, t_len) = level.shape();
    if s == 0 || t_len == 0 {
        return Err(ImpaleError::InsufficientData("empty matrix".into()));
    }
    if k == 0 || k > s {
        return Err(ImpaleError::InvalidInput(format!(
            "k = {k} must lie in 1..={s}"
        )));
    }
    if level.iter().any(|v| !v.is_finite()) {
        return Err(ImpaleError::InvalidInput(
            "level matrix has missing or non-finite cells; impute first".into(),
        ));
    }

    let standardized: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            let row: Vec<f64> = (0..t_len).map(|t| level[(i, t)]).collect();
            let m = mean(&row);
            let sd = variance(&row).sqrt();
            if sd < 1e-12 {
                vec![0.0; t_len]
            } else {
                row.iter().map(|v| (v - m) / sd).collect()
            }
        })
        .collect();

    let pairs: Vec<(usize, usize)> = (0..s)
        .flat_map(|i| (i + 1..s).map(move |j| (i, j)))
        .collect();
    let costs: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            dtw_distance(&standardized[i], &standardized[j], None).expect("nonempty series")
        })
        .collect();
    let mut distances = DMatrix::zeros(s, s);
    for (&(i, j), &d) in pairs.iter().zip(&costs) {
        distances[(i, j)] = d;
        distances[(j, i)] = d;
    }

    let (merges, assignment) = average_linkage(&distances, k);
    Ok(SiteClustering {
        distances,
        merges,
        assignment,
        k,
    })
}

/// Agglomerative clustering with average linkage: repeatedly join the two
/// closest clusters, where cluster distance is the mean of cross-pair leaf
/// distances. Returns the full merge history and the labels from stopping
/// at `k` clusters.
fn average_linkage(distances: &DMatrix<f64>, k: usize) -> (Vec<Merge>, Vec<usize>) {
    let s = distances.nrows();
    // Active cluster per slot: node id, member leaves.
    let mut nodes: Vec<Option<(usize, Vec<usize>)>> =
        (0..s).map(|i| Some((i, vec![i]))).collect();
    let mut d = distances.clone();
    let mut merges = Vec::with_capacity(s - 1);
    let mut assignment_at_k: Option<Vec<usize>> = None;
    let mut active = s;

    let snapshot = |nodes: &[Option<(usize, Vec<usize>)>]| {
        let mut labels = vec![0usize; s];
        let mut clusters: Vec<&Vec<usize>> = nodes
            .iter()
            .flatten()
            .map(|(_, members)| members)
            .collect();
        clusters.sort_by_key(|m| m[0]);
        for (label, members) in clusters.iter().enumerate() {
            for &site in *members {
                labels[site] = label;
            }
        }
        labels
    };
    if active == k {
        assignment_at_k = Some(snapshot(&nodes));
    }

    for step in 0..s - 1 {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for a in 0..s {
            if nodes[a].is_none() {
                continue;
            }
            for b in a + 1..s {
                if nodes[b].is_none() {
                    continue;
                }
                if d[(a, b)] < best.0 {
                    best = (d[(a, b)], a, b);
                }
            }
        }
        let (dist, a, b) = best;
        let (id_a, members_a) = nodes[a].take().expect("active slot");
        let (id_b, members_b) = nodes[b].take().expect("active slot");
        let size_a = members_a.len() as f64;
        let size_b = members_b.len() as f64;
        // Lance–Williams update for average linkage.
        for c in 0..s {
            if nodes[c].is_none() {
                continue;
            }
            let merged = (size_a * d[(a, c)] + size_b * d[(b, c)]) / (size_a + size_b);
            d[(a, c)] = merged;
            d[(c, a)] = merged;
        }
        let mut members = members_a;
        members.extend(members_b);
        members.sort_unstable();
        merges.push(Merge {
            left: id_a,
            right: id_b,
            distance: dist,
            size: members.len(),
        });
        nodes[a] = Some((s + step, members));
        active -= 1;
        if active == k {
            assignment_at_k = Some(snapshot(&nodes));
        }
    }

    (merges, assignment_at_k.expect("k ≤ S guarantees a snapshot"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_group_data() -> DMatrix<f64> {
        // Four phase-shifted sinusoids and three low-amplitude noise series;
        // DTW (after standardization) warps away the phase shifts, so the
        // sinusoid group is mutually close.
        let t_len = 80;
        DMatrix::from_fn(7, t_len, |i, t| {
            let x = t as f64 * 0.3;
            if i < 4 {
                (x + i as f64 * 0.4).sin() * 2.0 + 10.0
            } else {
                ((t * 7919 + i * 104729) % 97) as f64 / 97.0 - 0.5
            }
        })
    }

    #[test]
    fn distance_matrix_is_symmetric_with_zero_diagonal() {
        let c = cluster_sites(&two_group_data(), 2).unwrap();
        for i in 0..7 {
            assert_eq!(c.distances[(i, i)], 0.0);
            for j in 0..7 {
                assert_eq!(c.distances[(i, j)], c.distances[(j, i)]);
                assert!(c.distances[(i, j)] >= 0.0);
            }
        }
        assert_eq!(c.merges.len(), 6);
    }

    #[test]
    fn separable_groups_split_perfectly_at_k2() {
        let c = cluster_sites(&two_group_data(), 2).unwrap();
        assert_eq!(c.assignment[0], 0, "labels are ordered by first site");
        for i in 1..4 {
            assert_eq!(c.assignment[i], c.assignment[0]);
        }
        for i in 5..7 {
            assert_eq!(c.assignment[i], c.assignment[4]);
        }
        assert_ne!(c.assignment[0], c.assignment[4]);
    }

    #[test]
    fn extreme_cuts_give_singletons_and_one_cluster() {
        let data = two_group_data();
        let all = cluster_sites(&data, 7).unwrap();
        assert_eq!(all.assignment, (0..7).collect::<Vec<_>>());
        assert_eq!(all.members().len(), 7);
        let one = cluster_sites(&data, 1).unwrap();
        assert!(one.assignment.iter().all(|&l| l == 0));
    }

    #[test]
    fn every_requested_cluster_is_nonempty() {
        let data = two_group_data();
        for k in 1..=7 {
            let c = cluster_sites(&data, k).unwrap();
            let members = c.members();
            assert_eq!(members.len(), k);
            assert!(members.iter().all(|m| !m.is_empty()));
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let data = two_group_data();
        assert!(matches!(
            cluster_sites(&data, 0),
            Err(ImpaleError::InvalidInput(_))
        ));
        assert!(matches!(
            cluster_sites(&data, 8),
            Err(ImpaleError::InvalidInput(_))
        ));
        let mut gappy = data.clone();
        gappy[(0, 0)] = f64::NAN;
        assert!(matches!(
            cluster_sites(&gappy, 2),
            Err(ImpaleError::InvalidInput(_))
        ));
    }
}
