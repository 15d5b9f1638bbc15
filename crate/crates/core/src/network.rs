//! Stream-network topology: a rooted tree of segments draining to a single
//! outlet, monitoring sites placed along segments, and the derived distance,
//! connectivity, and weight matrices the spatial covariance kernels consume.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// One stream segment (an edge of the drainage tree). Water flows from the
/// segment's upstream node to its downstream node and then into
/// `downstream_id`; the single segment without a downstream neighbour is the
/// outlet.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    /// Segment this one drains into; `None` marks the outlet.
    pub downstream_id: Option<String>,
    /// Stream length of the segment (> 0).
    pub length: f64,
    /// Value of the additive flow function on this segment (> 0), e.g.
    /// accumulated flow volume or Shreve order. Must be non-decreasing
    /// moving downstream.
    pub additive_weight: f64,
}

/// A monitoring site located on a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SitePlacement {
    pub site_id: String,
    pub segment_id: String,
    /// Stream distance from the segment's downstream node
    /// (0 ≤ offset ≤ segment length).
    pub upstream_offset: f64,
    /// Planar coordinates, used only for Euclidean distances.
    pub xy: (f64, f64),
}

/// Errors raised while assembling a [`StreamNetwork`].
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network has no segments")]
    Empty,
    #[error("duplicate segment id `{0}`")]
    DuplicateSegmentId(String),
    #[error("duplicate site id `{0}`")]
    DuplicateSiteId(String),
    #[error("segment `{id}` drains into unknown segment `{downstream}`")]
    DanglingDownstreamId { id: String, downstream: String },
    #[error("{0} segments have no downstream neighbour; expected exactly one outlet")]
    MultipleOutlets(usize),
    #[error("cycle detected in downstream links starting from segment `{0}`")]
    CycleDetected(String),
    #[error("segment `{0}` has non-positive length")]
    NonPositiveLength(String),
    #[error("segment `{0}` has non-positive additive weight")]
    NonPositiveWeight(String),
    #[error(
        "additive weight decreases moving downstream from `{upstream}` ({w_up}) to `{downstream}` ({w_down})"
    )]
    NonAdditiveWeight {
        upstream: String,
        downstream: String,
        w_up: f64,
        w_down: f64,
    },
    #[error("site `{0}` references unknown segment `{1}`")]
    UnknownSiteSegment(String, String),
    #[error("site `{site}` offset {offset} outside [0, {length}] on segment `{segment}`")]
    SiteOffsetOutOfRange {
        site: String,
        segment: String,
        offset: f64,
        length: f64,
    },
    #[error("cannot place {requested} sites on {available} segments (one site per segment)")]
    TooManySites { requested: usize, available: usize },
}

/// An immutable stream network with all pairwise site structures
/// precomputed. Safe to share across threads once built.
#[derive(Debug, Clone)]
pub struct StreamNetwork {
    segments: Vec<Segment>,
    sites: Vec<SitePlacement>,
    d_stream: DMatrix<f64>,
    /// For flow-unconnected pairs, the smaller of the two distances to the
    /// common junction; 0 for flow-connected pairs.
    d_a: DMatrix<f64>,
    /// For flow-unconnected pairs, the larger junction distance; equals the
    /// full stream distance for flow-connected pairs.
    d_b: DMatrix<f64>,
    connected: DMatrix<bool>,
    d_euclid: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl StreamNetwork {
    /// Validates the topology and precomputes every pairwise site structure:
    /// stream distances, junction splits, flow connectivity, Euclidean
    /// distances, and tail-up weights sqrt(ω_upstream / ω_downstream).
    pub fn build(
        segments: Vec<Segment>,
        sites: Vec<SitePlacement>,
    ) -> Result<Self, NetworkError> {
        if segments.is_empty() {
            return Err(NetworkError::Empty);
        }
        let n = segments.len();

        // Index segments by id, rejecting duplicates.
        let mut index = std::collections::HashMap::with_capacity(n);
        for (k, seg) in segments.iter().enumerate() {
            if index.insert(seg.id.clone(), k).is_some() {
                return Err(NetworkError::DuplicateSegmentId(seg.id.clone()));
            }
        }

        // Resolve downstream links and count outlets.
        let mut down: Vec<Option<usize>> = Vec::with_capacity(n);
        for seg in &segments {
            match &seg.downstream_id {
                None => down.push(None),
                Some(d) => match index.get(d) {
                    Some(&k) => down.push(Some(k)),
                    None => {
                        return Err(NetworkError::DanglingDownstreamId {
                            id: seg.id.clone(),
                            downstream: d.clone(),
                        })
                    }
                },
            }
        }
        let outlets = down.iter().filter(|d| d.is_none()).count();
        if outlets > 1 {
            return Err(NetworkError::MultipleOutlets(outlets));
        }

        // Every segment must reach the outlet in at most n-1 hops; a longer
        // walk (or an outlet-free network) means a downstream cycle.
        for (k, seg) in segments.iter().enumerate() {
            let mut cur = k;
            let mut hops = 0;
            while let Some(next) = down[cur] {
                cur = next;
                hops += 1;
                if hops >= n {
                    return Err(NetworkError::CycleDetected(seg.id.clone()));
                }
            }
        }

        for seg in &segments {
            if !(seg.length > 0.0) {
                return Err(NetworkError::NonPositiveLength(seg.id.clone()));
            }
            if !(seg.additive_weight > 0.0) {
                return Err(NetworkError::NonPositiveWeight(seg.id.clone()));
            }
        }
        for (k, seg) in segments.iter().enumerate() {
            if let Some(d) = down[k] {
                if segments[d].additive_weight < seg.additive_weight {
                    return Err(NetworkError::NonAdditiveWeight {
                        upstream: seg.id.clone(),
                        downstream: segments[d].id.clone(),
                        w_up: seg.additive_weight,
                        w_down: segments[d].additive_weight,
                    });
                }
            }
        }

        // Validate sites.
        let mut site_ids = std::collections::HashSet::with_capacity(sites.len());
        let mut site_seg: Vec<usize> = Vec::with_capacity(sites.len());
        for site in &sites {
            if !site_ids.insert(site.site_id.clone()) {
                return Err(NetworkError::DuplicateSiteId(site.site_id.clone()));
            }
            let k = *index.get(&site.segment_id).ok_or_else(|| {
                NetworkError::UnknownSiteSegment(site.site_id.clone(), site.segment_id.clone())
            })?;
            let len = segments[k].length;
            if !(0.0..=len).contains(&site.upstream_offset) {
                return Err(NetworkError::SiteOffsetOutOfRange {
                    site: site.site_id.clone(),
                    segment: site.segment_id.clone(),
                    offset: site.upstream_offset,
                    length: len,
                });
            }
            site_seg.push(k);
        }

        // Distance from each segment's downstream node to the outlet node,
        // and the chain of segments passed on the way (self first).
        let mut node_to_outlet = vec![0.0; n];
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut chain = vec![k];
            let mut dist = 0.0;
            let mut cur = k;
            while let Some(next) = down[cur] {
                dist += segments[next].length;
                chain.push(next);
                cur = next;
            }
            node_to_outlet[k] = dist;
            chains.push(chain);
        }
        // Position of each segment within each chain, for junction lookup.
        let chain_pos: Vec<std::collections::HashMap<usize, usize>> = chains
            .iter()
            .map(|c| c.iter().enumerate().map(|(p, &s)| (s, p)).collect())
            .collect();

        let s = sites.len();
        let outlet_dist: Vec<f64> = (0..s)
            .map(|i| sites[i].upstream_offset + node_to_outlet[site_seg[i]])
            .collect();

        let mut d_stream = DMatrix::zeros(s, s);
        let mut d_a = DMatrix::zeros(s, s);
        let mut d_b = DMatrix::zeros(s, s);
        let mut connected = DMatrix::from_element(s, s, false);
        let mut w = DMatrix::zeros(s, s);
        let mut d_euclid = DMatrix::zeros(s, s);

        for i in 0..s {
            connected[(i, i)] = true;
            w[(i, i)] = 1.0;
            for j in i + 1..s {
                let (si, sj) = (site_seg[i], site_seg[j]);
                let is_conn =
                    chain_pos[si].contains_key(&sj) || chain_pos[sj].contains_key(&si);
                let (dx, dy) = (
                    sites[i].xy.0 - sites[j].xy.0,
                    sites[i].xy.1 - sites[j].xy.1,
                );
                let de = (dx * dx + dy * dy).sqrt();
                d_euclid[(i, j)] = de;
                d_euclid[(j, i)] = de;

                if is_conn {
                    let h = (outlet_dist[i] - outlet_dist[j]).abs();
                    // Upstream site contributes the numerator weight.
                    let (wu, wd) = if outlet_dist[i] >= outlet_dist[j] {
                        (segments[si].additive_weight, segments[sj].additive_weight)
                    } else {
                        (segments[sj].additive_weight, segments[si].additive_weight)
                    };
                    let weight = (wu / wd).sqrt();
                    d_stream[(i, j)] = h;
                    d_stream[(j, i)] = h;
                    d_b[(i, j)] = h;
                    d_b[(j, i)] = h;
                    connected[(i, j)] = true;
                    connected[(j, i)] = true;
                    w[(i, j)] = weight;
                    w[(j, i)] = weight;
                } else {
                    // First segment the two downstream chains share; the
                    // common junction is its upstream node.
                    let common = *chains[si]
                        .iter()
                        .find(|seg| chain_pos[sj].contains_key(seg))
                        .expect("all chains end at the outlet");
                    let junction_to_outlet =
                        node_to_outlet[common] + segments[common].length;
                    let a = outlet_dist[i] - junction_to_outlet;
                    let b = outlet_dist[j] - junction_to_outlet;
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    d_a[(i, j)] = lo;
                    d_a[(j, i)] = lo;
                    d_b[(i, j)] = hi;
                    d_b[(j, i)] = hi;
                    d_stream[(i, j)] = a + b;
                    d_stream[(j, i)] = a + b;
                }
            }
        }

        Ok(Self {
            segments,
            sites,
            d_stream,
            d_a,
            d_b,
            connected,
            d_euclid,
            w,
        })
    }

    /// Grows a random binary-branching network rooted at the outlet and
    /// places `n_sites` sites on distinct segments. Segment lengths are
    /// uniform(0.5, 1.5); additive weights accumulate unit headwater
    /// contributions downstream. Deterministic for a fixed seed.
    pub fn generate_random(
        n_segments: usize,
        n_sites: usize,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        if n_segments == 0 {
            return Err(NetworkError::Empty);
        }
        if n_sites > n_segments {
            return Err(NetworkError::TooManySites {
                requested: n_sites,
                available: n_segments,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut lengths = vec![0.0f64; n_segments];
        let mut down: Vec<Option<usize>> = vec![None; n_segments];
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n_segments];
        lengths[0] = rng.random_range(0.5..1.5);
        // Segments that can still accept an upstream branch (< 2 parents).
        let mut open = vec![0usize];
        for k in 1..n_segments {
            let pick = rng.random_range(0..open.len());
            let target = open[pick];
            lengths[k] = rng.random_range(0.5..1.5);
            down[k] = Some(target);
            parents[target].push(k);
            if parents[target].len() == 2 {
                open.swap_remove(pick);
            }
            open.push(k);
        }

        // Shreve-style additive weights: unit contribution per headwater,
        // summed downstream. Children are created after their downstream
        // segment, so iterating in reverse index order visits every segment
        // after all of its parents.
        let mut weight = vec![1.0f64; n_segments];
        for k in (0..n_segments).rev() {
            if !parents[k].is_empty() {
                weight[k] = parents[k].iter().map(|&p| weight[p]).sum();
            }
        }

        // Planar embedding: each segment runs from its downstream node
        // toward upstream at an angle jittered from its downstream
        // segment's direction; used only for Euclidean distances.
        let mut angle = vec![0.0f64; n_segments];
        let mut down_node = vec![(0.0f64, 0.0f64); n_segments];
        let mut up_node = vec![(0.0f64, 0.0f64); n_segments];
        angle[0] = std::f64::consts::FRAC_PI_2;
        up_node[0] = (
            lengths[0] * angle[0].cos(),
            lengths[0] * angle[0].sin(),
        );
        for k in 1..n_segments {
            let d = down[k].unwrap();
            let side = if parents[d][0] == k { -1.0 } else { 1.0 };
            angle[k] = angle[d] + side * rng.random_range(0.15..0.55);
            down_node[k] = up_node[d];
            up_node[k] = (
                down_node[k].0 + lengths[k] * angle[k].cos(),
                down_node[k].1 + lengths[k] * angle[k].sin(),
            );
        }

        let segments: Vec<Segment> = (0..n_segments)
            .map(|k| Segment {
                id: format!("seg{k}"),
                downstream_id: down[k].map(|d| format!("seg{d}")),
                length: lengths[k],
                additive_weight: weight[k],
            })
            .collect();

        let chosen = rand::seq::index::sample(&mut rng, n_segments, n_sites);
        let sites: Vec<SitePlacement> = chosen
            .iter()
            .enumerate()
            .map(|(j, k)| {
                let offset = rng.random_range(0.0..lengths[k]);
                let frac = offset / lengths[k];
                let xy = (
                    down_node[k].0 + frac * (up_node[k].0 - down_node[k].0),
                    down_node[k].1 + frac * (up_node[k].1 - down_node[k].1),
                );
                SitePlacement {
                    site_id: format!("site{j}"),
                    segment_id: format!("seg{k}"),
                    upstream_offset: offset,
                    xy,
                }
            })
            .collect();

        Self::build(segments, sites)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sites(&self) -> &[SitePlacement] {
        &self.sites
    }

    /// Pairwise stream distance (sum of junction distances for
    /// flow-unconnected pairs).
    pub fn d_stream(&self) -> &DMatrix<f64> {
        &self.d_stream
    }

    /// Smaller distance-to-junction for unconnected pairs (0 when connected).
    pub fn d_a(&self) -> &DMatrix<f64> {
        &self.d_a
    }

    /// Larger distance-to-junction for unconnected pairs (full stream
    /// distance when connected).
    pub fn d_b(&self) -> &DMatrix<f64> {
        &self.d_b
    }

    pub fn connected(&self) -> &DMatrix<bool> {
        &self.connected
    }

    pub fn d_euclid(&self) -> &DMatrix<f64> {
        &self.d_euclid
    }

    /// Tail-up weights: sqrt(ω_up/ω_down) for flow-connected pairs, zero
    /// otherwise, one on the diagonal.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Largest pairwise stream distance (0 for a single site). Used to scale
    /// default range priors.
    pub fn max_stream_distance(&self) -> f64 {
        self.d_stream.iter().cloned().fold(0.0, f64::max)
    }

    /// Index of a site by id, if present.
    pub fn site_index(&self, site_id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.site_id == site_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn seg(id: &str, down: Option<&str>, length: f64, weight: f64) -> Segment {
        Segment {
            id: id.into(),
            downstream_id: down.map(Into::into),
            length,
            additive_weight: weight,
        }
    }

    fn site(id: &str, segment: &str, offset: f64) -> SitePlacement {
        SitePlacement {
            site_id: id.into(),
            segment_id: segment.into(),
            upstream_offset: offset,
            xy: (0.0, 0.0),
        }
    }

    #[test]
    fn two_segment_line_hand_trace() {
        // A drains into B; sites at each segment's downstream node.
        let net = StreamNetwork::build(
            vec![seg("A", Some("B"), 1.0, 1.0), seg("B", None, 1.0, 2.0)],
            vec![site("a", "A", 0.0), site("b", "B", 0.0)],
        )
        .unwrap();
        assert_abs_diff_eq!(net.d_stream()[(0, 1)], 1.0);
        assert_abs_diff_eq!(net.d_stream()[(1, 0)], 1.0);
        assert_abs_diff_eq!(net.d_stream()[(0, 0)], 0.0);
        assert!(net.connected()[(0, 1)] && net.connected()[(1, 0)]);
        assert_abs_diff_eq!(net.w()[(0, 1)], (0.5f64).sqrt(), epsilon = 1e-12);
        // Connected pair: junction split degenerates to (0, h).
        assert_abs_diff_eq!(net.d_a()[(0, 1)], 0.0);
        assert_abs_diff_eq!(net.d_b()[(0, 1)], 1.0);
    }

    #[test]
    fn single_segment_single_site() {
        let net = StreamNetwork::build(
            vec![seg("A", None, 1.0, 1.0)],
            vec![site("a", "A", 0.5)],
        )
        .unwrap();
        assert_eq!(net.n_sites(), 1);
        assert_abs_diff_eq!(net.d_stream()[(0, 0)], 0.0);
        assert!(net.connected()[(0, 0)]);
        assert_abs_diff_eq!(net.w()[(0, 0)], 1.0);
    }

    #[test]
    fn y_network_hand_trace() {
        // Headwaters A (len 2) and B (len 3) join into trunk C (len 1).
        let net = StreamNetwork::build(
            vec![
                seg("A", Some("C"), 2.0, 1.0),
                seg("B", Some("C"), 3.0, 1.0),
                seg("C", None, 1.0, 2.0),
            ],
            vec![site("a", "A", 0.5), site("b", "B", 1.0), site("c", "C", 0.25)],
        )
        .unwrap();
        // a and b sit on different headwaters: flow-unconnected.
        assert!(!net.connected()[(0, 1)]);
        assert_abs_diff_eq!(net.w()[(0, 1)], 0.0);
        // Distances to the common junction: 0.5 along A, 1.0 along B.
        assert_abs_diff_eq!(net.d_a()[(0, 1)], 0.5);
        assert_abs_diff_eq!(net.d_b()[(0, 1)], 1.0);
        assert_abs_diff_eq!(net.d_stream()[(0, 1)], 1.5);
        // a and c are flow-connected through the junction.
        assert!(net.connected()[(0, 2)]);
        assert_abs_diff_eq!(net.d_stream()[(0, 2)], 0.5 + 0.75);
        assert_abs_diff_eq!(net.w()[(0, 2)], (0.5f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sites_on_same_segment_are_connected() {
        let net = StreamNetwork::build(
            vec![seg("A", None, 2.0, 1.0)],
            vec![site("a", "A", 0.25), site("b", "A", 1.75)],
        )
        .unwrap();
        assert!(net.connected()[(0, 1)]);
        assert_abs_diff_eq!(net.d_stream()[(0, 1)], 1.5);
        assert_abs_diff_eq!(net.w()[(0, 1)], 1.0);
    }

    #[test]
    fn validation_errors() {
        // Dangling downstream id.
        let err = StreamNetwork::build(vec![seg("A", Some("Z"), 1.0, 1.0)], vec![]);
        assert!(matches!(err, Err(NetworkError::DanglingDownstreamId { .. })));
        // Two outlets.
        let err = StreamNetwork::build(
            vec![seg("A", None, 1.0, 1.0), seg("B", None, 1.0, 1.0)],
            vec![],
        );
        assert!(matches!(err, Err(NetworkError::MultipleOutlets(2))));
        // Cycle (no outlet).
        let err = StreamNetwork::build(
            vec![seg("A", Some("B"), 1.0, 1.0), seg("B", Some("A"), 1.0, 1.0)],
            vec![],
        );
        assert!(matches!(err, Err(NetworkError::CycleDetected(_))));
        // Offset beyond segment length.
        let err = StreamNetwork::build(
            vec![seg("A", None, 1.0, 1.0)],
            vec![site("a", "A", 1.5)],
        );
        assert!(matches!(err, Err(NetworkError::SiteOffsetOutOfRange { .. })));
        // Weight shrinking downstream.
        let err = StreamNetwork::build(
            vec![seg("A", Some("B"), 1.0, 3.0), seg("B", None, 1.0, 1.0)],
            vec![],
        );
        assert!(matches!(err, Err(NetworkError::NonAdditiveWeight { .. })));
        // More sites than segments.
        let err = StreamNetwork::generate_random(2, 3, 1);
        assert!(matches!(err, Err(NetworkError::TooManySites { .. })));
    }

    #[test]
    fn random_network_is_deterministic() {
        let a = StreamNetwork::generate_random(40, 12, 7).unwrap();
        let b = StreamNetwork::generate_random(40, 12, 7).unwrap();
        assert_eq!(a.d_stream(), b.d_stream());
        assert_eq!(a.d_euclid(), b.d_euclid());
        assert_eq!(a.w(), b.w());
        let c = StreamNetwork::generate_random(40, 12, 8).unwrap();
        assert_ne!(a.d_stream(), c.d_stream());
    }

    #[test]
    fn random_network_invariants() {
        for seed in 0..10u64 {
            let net = StreamNetwork::generate_random(60, 15, seed).unwrap();
            let s = net.n_sites();
            for i in 0..s {
                assert_abs_diff_eq!(net.d_stream()[(i, i)], 0.0);
                assert!(net.connected()[(i, i)]);
                assert_abs_diff_eq!(net.w()[(i, i)], 1.0);
                for j in 0..s {
                    let d = net.d_stream()[(i, j)];
                    assert!(d >= 0.0);
                    assert_abs_diff_eq!(d, net.d_stream()[(j, i)], epsilon = 1e-12);
                    assert_eq!(net.connected()[(i, j)], net.connected()[(j, i)]);
                    let w = net.w()[(i, j)];
                    assert_abs_diff_eq!(w, net.w()[(j, i)], epsilon = 1e-12);
                    if i != j {
                        if net.connected()[(i, j)] {
                            assert!(w > 0.0 && w <= 1.0, "w = {w}");
                            assert_abs_diff_eq!(net.d_a()[(i, j)], 0.0);
                            assert_abs_diff_eq!(net.d_b()[(i, j)], d, epsilon = 1e-12);
                        } else {
                            assert_eq!(w, 0.0);
                            // Junction split partitions the stream distance.
                            assert_abs_diff_eq!(
                                net.d_a()[(i, j)] + net.d_b()[(i, j)],
                                d,
                                epsilon = 1e-12
                            );
                            assert!(net.d_a()[(i, j)] <= net.d_b()[(i, j)]);
                            assert!(net.d_a()[(i, j)] >= 0.0);
                        }
                    }
                }
            }
            // Triangle inequality on fully flow-connected triples (all on
            // one root path, so distances are differences along it).
            for i in 0..s {
                for j in 0..s {
                    for k in 0..s {
                        if net.connected()[(i, j)]
                            && net.connected()[(j, k)]
                            && net.connected()[(i, k)]
                        {
                            assert!(
                                net.d_stream()[(i, k)]
                                    <= net.d_stream()[(i, j)] + net.d_stream()[(j, k)] + 1e-9
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn paper_scale_network_builds() {
        let net = StreamNetwork::generate_random(150, 30, 1).unwrap();
        assert_eq!(net.n_sites(), 30);
        assert_eq!(net.segments().len(), 150);
        assert!(net.max_stream_distance() > 0.0);
    }
}
