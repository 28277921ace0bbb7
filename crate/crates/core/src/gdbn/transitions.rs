/// Row-stochastic matrix over discrete clusters, `m[from][to]`.
pub type TransitionMatrix = Vec<Vec<f64>>;

/// Segment of a transition into position `t` of a sequence of length `len`.
pub fn segment_of(t: usize, len: usize, segments: usize) -> usize {
    if len == 0 || segments <= 1 {
        return 0;
    }
    (t * segments / len).min(segments - 1)
}

/// Counts cluster transitions per time segment and row-normalizes them.
///
/// Each inner sequence is one episode; the transition into position `t`
/// belongs to segment `segment_of(t, len, segments)`. With `smoothing` every
/// count starts at one. Rows without any count are uniform.
pub fn estimate_transitions(
    sequences: &[Vec<usize>],
    num_clusters: usize,
    segments: usize,
    smoothing: bool,
) -> Vec<TransitionMatrix> {
    let segments = segments.max(1);
    let prior = if smoothing { 1.0 } else { 0.0 };
    let mut counts = vec![vec![vec![prior; num_clusters]; num_clusters]; segments];
    for seq in sequences {
        for t in 1..seq.len() {
            let tau = segment_of(t, seq.len(), segments);
            counts[tau][seq[t - 1]][seq[t]] += 1.0;
        }
    }
    for m in counts.iter_mut() {
        for row in m.iter_mut() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|x| *x /= total);
            } else {
                row.iter_mut().for_each(|x| *x = 1.0 / num_clusters as f64);
            }
        }
    }
    counts
}
