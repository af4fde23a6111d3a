//! Dynamic time warping: full alignment, subsequence alignment with a
//! non-diagonal penalty and gully, and MIDI-to-audio alignment.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtwError {
    #[error("feature dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("empty feature sequence")]
    Empty,
    #[error("alignment path is empty")]
    EmptyPath,
    #[error("gully must be in (0, 1], got {0}")]
    BadGully(f64),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

/// Backpointer of a cell of the accumulated cost matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Path starts here.
    Start,
    /// From `(n-1, m-1)`.
    Diagonal,
    /// From `(n, m-1)`.
    Down,
    /// From `(n-1, m)`.
    Left,
}

/// A monotone path through an `N × M` cost matrix. Indices are 0-based:
/// `p` indexes the first sequence, `q` the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub cost: f64,
    pub confidence: f64,
}

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.p.iter().copied().zip(self.q.iter().copied())
    }

    /// True if every step is one of (1,1), (1,0), (0,1).
    pub fn satisfies_step_condition(&self) -> bool {
        self.p.len() == self.q.len()
            && self.pairs().zip(self.pairs().skip(1)).all(|((p0, q0), (p1, q1))| {
                matches!((p1.wrapping_sub(p0), q1.wrapping_sub(q0)), (1, 1) | (1, 0) | (0, 1))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Penalty {
    /// Median of all cost-matrix entries.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwConfig {
    /// Feature hop in samples at 22050 Hz.
    pub hop: usize,
    pub penalty: Penalty,
    pub gully: f64,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig { hop: 1024, penalty: Penalty::Median, gully: 0.96 }
    }
}

impl DtwConfig {
    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / crate::audio::SAMPLE_RATE as f64
    }
}

fn cosine_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0)
}

/// Pairwise cosine distances between the rows of `x` (N×D) and `y` (M×D).
/// Rows that are all zero are at distance 1 from everything.
pub fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>, DtwError> {
    if x.ncols() != y.ncols() {
        return Err(DtwError::DimensionMismatch(x.ncols(), y.ncols()));
    }
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    for (n, xr) in x.axis_iter(Axis(0)).enumerate() {
        for (m, yr) in y.axis_iter(Axis(0)).enumerate() {
            c[[n, m]] = cosine_distance(xr, yr);
        }
    }
    Ok(c)
}

/// Accumulated cost and backpointers, kept for inspection.
#[derive(Debug, Clone)]
pub struct DtwMatrices {
    pub accumulated: Array2<f64>,
    pub steps: Array2<Step>,
    pub path: AlignmentPath,
}

fn median(c: &Array2<f64>) -> f64 {
    let mut v: Vec<f64> = c.iter().copied().collect();
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if v.len() % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn run_dtw(c: &Array2<f64>, penalty: f64, gully: f64) -> DtwMatrices {
    let (n_len, m_len) = c.dim();
    assert!(n_len > 0 && m_len > 0, "cost matrix must be non-empty");
    // Latest start index and earliest end index allowed along each axis.
    let start_n = ((1.0 - gully) * n_len as f64).floor() as usize;
    let start_m = ((1.0 - gully) * m_len as f64).floor() as usize;
    let end_n = ((gully * n_len as f64).ceil() as usize).max(1) - 1;
    let end_m = ((gully * m_len as f64).ceil() as usize).max(1) - 1;

    let mut d = Array2::from_elem((n_len, m_len), f64::INFINITY);
    let mut steps = Array2::from_elem((n_len, m_len), Step::Start);
    for m in 0..m_len {
        for n in 0..n_len {
            let cost = c[[n, m]];
            let may_start = (n == 0 && m <= start_m) || (m == 0 && n <= start_n);
            let diag = if n > 0 && m > 0 { d[[n - 1, m - 1]] } else { f64::INFINITY };
            let down = if m > 0 { d[[n, m - 1]] + penalty } else { f64::INFINITY };
            let left = if n > 0 { d[[n - 1, m]] + penalty } else { f64::INFINITY };
            let (best, step) = if diag <= down && diag <= left {
                (diag, Step::Diagonal)
            } else if down <= left {
                (down, Step::Down)
            } else {
                (left, Step::Left)
            };
            if may_start && (!best.is_finite() || 0.0 < best) {
                d[[n, m]] = cost;
                steps[[n, m]] = Step::Start;
            } else {
                d[[n, m]] = cost + best;
                steps[[n, m]] = step;
            }
        }
    }

    // Pick the cheapest admissible end on the last row or column.
    let mut end = (n_len - 1, m_len - 1);
    let mut end_cost = d[end];
    for m in end_m..m_len {
        if d[[n_len - 1, m]] < end_cost {
            end = (n_len - 1, m);
            end_cost = d[end];
        }
    }
    for n in end_n..n_len {
        if d[[n, m_len - 1]] < end_cost {
            end = (n, m_len - 1);
            end_cost = d[end];
        }
    }

    let (mut n, mut m) = end;
    let mut p = vec![n];
    let mut q = vec![m];
    loop {
        match steps[[n, m]] {
            Step::Start => break,
            Step::Diagonal => {
                n -= 1;
                m -= 1;
            }
            Step::Down => m -= 1,
            Step::Left => n -= 1,
        }
        p.push(n);
        q.push(m);
    }
    p.reverse();
    q.reverse();
    let mut path = AlignmentPath { p, q, cost: end_cost, confidence: 0.0 };
    path.confidence = path_confidence(c, &path);
    DtwMatrices { accumulated: d, steps, path }
}

/// Mean raw cost along the path divided by the mean cost over the block of
/// the matrix the path spans. Penalties are not included.
pub fn path_confidence(c: &Array2<f64>, path: &AlignmentPath) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    let along: f64 = path.pairs().map(|(n, m)| c[[n, m]]).sum::<f64>() / path.len() as f64;
    let (n0, m0) = (path.p[0], path.q[0]);
    let (n1, m1) = (path.p[path.len() - 1], path.q[path.len() - 1]);
    let block = c.slice(ndarray::s![n0..=n1, m0..=m1]);
    let overall = block.sum() / block.len() as f64;
    if overall > 0.0 {
        (along / overall).clamp(0.0, 2.0)
    } else {
        0.0
    }
}

/// Classic DTW from `(0,0)` to `(N-1,M-1)`; ties prefer diagonal, then
/// down, then left.
pub fn dtw_full_matrices(c: &Array2<f64>) -> DtwMatrices {
    run_dtw(c, 0.0, 1.0)
}

pub fn dtw_full(c: &Array2<f64>) -> AlignmentPath {
    dtw_full_matrices(c).path
}

/// Subsequence DTW: non-diagonal steps pay `penalty`; the path may start
/// within the first `1 - gully` of either axis and must end within the
/// last `1 - gully`.
pub fn dtw_subsequence(c: &Array2<f64>, config: &DtwConfig) -> Result<AlignmentPath, DtwError> {
    if !(config.gully > 0.0 && config.gully <= 1.0) {
        return Err(DtwError::BadGully(config.gully));
    }
    if c.is_empty() {
        return Err(DtwError::Empty);
    }
    let penalty = match config.penalty {
        Penalty::Median => median(c),
        Penalty::Fixed(v) => v,
    };
    Ok(run_dtw(c, penalty, config.gully).path)
}

/// Time map from an alignment: pairs of (source seconds, target seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub pairs: Vec<(f64, f64)>,
    pub confidence: f64,
}

impl TimeMap {
    /// Converts a frame path to seconds, with `p` indexing the source.
    pub fn from_path(path: &AlignmentPath, source_hop: f64, target_hop: f64) -> Self {
        let pairs = path.pairs().map(|(n, m)| (n as f64 * source_hop, m as f64 * target_hop)).collect();
        TimeMap { pairs, confidence: path.confidence }
    }

    pub fn identity(end: f64) -> Self {
        TimeMap { pairs: vec![(0.0, 0.0), (end, end)], confidence: 0.0 }
    }

    /// Piecewise-linear map of `t`. Equal source times are averaged;
    /// times outside the path clamp to its ends.
    pub fn map(&self, t: f64) -> f64 {
        let knots = self.knots();
        if knots.is_empty() {
            return t;
        }
        if t <= knots[0].0 {
            return knots[0].1;
        }
        let last = knots[knots.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = knots.partition_point(|k| k.0 <= t);
        let (x0, y0) = knots[i - 1];
        let (x1, y1) = knots[i];
        y0 + (y1 - y0) * (t - x0) / (x1 - x0)
    }

    /// Strictly increasing source knots with averaged targets.
    pub fn knots(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for &(s, t) in &self.pairs {
            match out.last_mut() {
                Some(last) if last.0 == s => {
                    last.1 += t;
                    last.2 += 1;
                }
                _ => out.push((s, t, 1)),
            }
        }
        let mut knots: Vec<(f64, f64)> = out.into_iter().map(|(s, t, k)| (s, t / k as f64)).collect();
        // Averaging keeps targets nondecreasing for monotone paths; enforce it anyway.
        for i in 1..knots.len() {
            if knots[i].1 < knots[i - 1].1 {
                knots[i].1 = knots[i - 1].1;
            }
        }
        knots
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let mut text = format!("confidence={}\n", self.confidence);
        for (s, t) in &self.pairs {
            text.push_str(&format!("{s:.6} {t:.6}\n"));
        }
        std::fs::write(path, text)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty alignment file"))?;
        let confidence = header
            .strip_prefix("confidence=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing confidence header"))?;
        let mut pairs = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next()) {
                (Some(Ok(s)), Some(Ok(t))) => pairs.push((s, t)),
                _ => return Err(bad("malformed alignment line")),
            }
        }
        Ok(TimeMap { pairs, confidence })
    }
}

/// Aligns a MIDI file to audio through log-magnitude CQT-space features.
/// The returned map sends MIDI seconds to audio seconds.
pub fn align_midi_to_audio(
    midi: &crate::midi::MidiSong,
    audio: &crate::audio::Waveform,
    config: &DtwConfig,
) -> Result<TimeMap, DtwError> {
    let layout = crate::audio::CqtLayout::default();
    let hop = config.hop_seconds();
    let audio_features = crate::audio::log_cqt_features(audio, &layout, config.hop)?;
    let midi_features = crate::midi::midi_alignment_features(midi, hop, &layout).log_pitch;
    align_features(&midi_features, &audio_features, hop, config)
}

/// DTW between two feature matrices sharing a hop, as a time map.
pub fn align_features(
    source: &Array2<f64>,
    target: &Array2<f64>,
    hop: f64,
    config: &DtwConfig,
) -> Result<TimeMap, DtwError> {
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(DtwError::Empty);
    }
    let c = cost_matrix(source.view(), target.view())?;
    let path = dtw_subsequence(&c, config)?;
    Ok(TimeMap::from_path(&path, hop, hop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn abs_cost(x: &[f64], y: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((x.len(), y.len()), |(n, m)| (x[n] - y[m]).abs())
    }

    /// Minimum over every monotone path from (0,0) to (N-1,M-1).
    fn brute_force(c: &Array2<f64>) -> f64 {
        fn walk(c: &Array2<f64>, n: usize, m: usize, acc: f64, best: &mut f64) {
            let acc = acc + c[[n, m]];
            let (nl, ml) = c.dim();
            if n == nl - 1 && m == ml - 1 {
                *best = best.min(acc);
                return;
            }
            if n + 1 < nl && m + 1 < ml {
                walk(c, n + 1, m + 1, acc, best);
            }
            if m + 1 < ml {
                walk(c, n, m + 1, acc, best);
            }
            if n + 1 < nl {
                walk(c, n + 1, m, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(c, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn worked_example_path_and_cost() {
        let c = abs_cost(&[0., 1., 2., 3., 2., 1.], &[1., 2., 3., 2., 0.]);
        let path = dtw_full(&c);
        assert_eq!(path.p, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(path.q, vec![0, 0, 1, 2, 3, 4]);
        assert_eq!(path.cost, 2.0);
        assert_eq!(dtw_full_matrices(&c).accumulated[[5, 4]], 2.0);
    }

    #[test]
    fn trivial_matrix() {
        let c = array![[0.7]];
        let path = dtw_full(&c);
        assert_eq!((path.p.clone(), path.q.clone(), path.cost), (vec![0], vec![0], 0.7));
    }

    #[test]
    fn cosine_cost_examples() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]];
        let y = array![[1.0, 0.0]];
        let c = cost_matrix(x.view(), y.view()).unwrap();
        assert!((c[[0, 0]]).abs() < 1e-12);
        assert!((c[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((c[[2, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(c[[3, 0]], 1.0);
        assert!(matches!(
            cost_matrix(x.view(), array![[1.0]].view()),
            Err(DtwError::DimensionMismatch(2, 1))
        ));
    }

    #[test]
    fn subsequence_skips_noise_prefix() {
        // 12 distinct directions, repeated; target has a 10-frame prefix.
        let dims = 12;
        let frames = 300;
        let x = Array2::from_shape_fn((frames, dims), |(t, d)| if (t / 5) % dims == d { 1.0 } else { 0.05 });
        let mut y = Array2::zeros((frames + 10, dims));
        for t in 0..10 {
            for d in 0..dims {
                y[[t, d]] = ((t * 7 + d * 3) % 5) as f64 + 0.5;
            }
        }
        y.slice_mut(ndarray::s![10.., ..]).assign(&x);
        let c = cost_matrix(x.view(), y.view()).unwrap();
        let path = dtw_subsequence(&c, &DtwConfig::default()).unwrap();
        assert!(path.q[0] > 0, "path should start after the prefix, got {}", path.q[0]);
        assert_eq!(path.q[0], 10);
        assert!(path.satisfies_step_condition());
    }

    #[test]
    fn identical_sequences_have_zero_confidence() {
        let x = Array2::from_shape_fn((50, 12), |(t, d)| ((t + d) % 12) as f64 + 1.0);
        let c = cost_matrix(x.view(), x.view()).unwrap();
        let path = dtw_subsequence(&c, &DtwConfig::default()).unwrap();
        assert!(path.confidence.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_gully() {
        let c = array![[0.0]];
        let cfg = DtwConfig { gully: 0.0, ..DtwConfig::default() };
        assert!(matches!(dtw_subsequence(&c, &cfg), Err(DtwError::BadGully(_))));
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&array![[4.0, 1.0], [3.0, 2.0]]), 2.5);
        assert_eq!(median(&array![[4.0, 1.0, 3.0]]), 3.0);
    }

    #[test]
    fn time_map_interpolates_and_clamps() {
        let map = TimeMap { pairs: vec![(5.0, 0.0), (6.0, 1.0), (6.0, 2.0), (8.0, 4.0)], confidence: 0.1 };
        assert_eq!(map.map(5.0), 0.0);
        assert_eq!(map.map(0.0), 0.0);
        assert_eq!(map.map(6.0), 1.5);
        assert_eq!(map.map(7.0), 2.75);
        assert_eq!(map.map(100.0), 4.0);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.align");
        map.write(&file).unwrap();
        assert_eq!(TimeMap::read(&file).unwrap(), map);
    }

    fn int_matrix() -> impl Strategy<Value = Array2<f64>> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
            prop::collection::vec(0u8..10, n * m)
                .prop_map(move |v| Array2::from_shape_vec((n, m), v.into_iter().map(f64::from).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn full_dtw_matches_enumeration(c in int_matrix()) {
            let path = dtw_full(&c);
            prop_assert_eq!(path.cost, brute_force(&c));
            prop_assert!(path.satisfies_step_condition());
            let along: f64 = path.pairs().map(|(n, m)| c[[n, m]]).sum();
            prop_assert_eq!(along, path.cost);
        }

        #[test]
        fn degenerate_subsequence_equals_full(c in int_matrix()) {
            let cfg = DtwConfig { penalty: Penalty::Fixed(0.0), gully: 1.0, ..DtwConfig::default() };
            let sub = dtw_subsequence(&c, &cfg).unwrap();
            let full = dtw_full(&c);
            prop_assert_eq!(sub.cost.to_bits(), full.cost.to_bits());
            prop_assert_eq!(sub.p, full.p);
            prop_assert_eq!(sub.q, full.q);
        }

        #[test]
        fn subsequence_paths_are_valid(c in int_matrix(), g in 0.5f64..=1.0) {
            let cfg = DtwConfig { gully: g, ..DtwConfig::default() };
            let path = dtw_subsequence(&c, &cfg).unwrap();
            prop_assert!(path.satisfies_step_condition());
            prop_assert!((0.0..=2.0).contains(&path.confidence));
            let (n, m) = c.dim();
            let (pe, qe) = (*path.p.last().unwrap(), *path.q.last().unwrap());
            prop_assert!(pe == n - 1 || qe == m - 1);
        }

        #[test]
        fn time_map_is_monotone(c in int_matrix(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let path = dtw_full(&c);
            let map = TimeMap::from_path(&path, 1.0, 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(map.map(lo) <= map.map(hi));
        }
    }
}
