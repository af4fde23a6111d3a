//! Chord symbol recall and segmentation quality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ChordSegment, ChordSequence};
use crate::chord::ChordLabel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequences do not share a span")]
    SpanMismatch,
}

/// How two reduced labels are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchingPolicy {
    /// Root and mode must agree; `N` matches only `N`.
    #[default]
    MajMin,
    /// Only the root must agree; `N` matches only `N`.
    Root,
}

impl MatchingPolicy {
    pub fn matches(self, a: ChordLabel, b: ChordLabel) -> bool {
        match self {
            MatchingPolicy::MajMin => a == b,
            MatchingPolicy::Root => a.root() == b.root(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub csr: f64,
    pub overseg: f64,
    pub underseg: f64,
    pub seg: f64,
    pub duration: f64,
}

fn total_duration(seq: &ChordSequence) -> f64 {
    seq.segments().iter().map(ChordSegment::duration).sum()
}

fn overlap(a: &ChordSegment, b: &ChordSegment) -> f64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0.0)
}

/// Fraction of ground-truth duration where the estimate's label matches.
/// Gaps in the estimate count as `N`.
pub fn csr(est: &ChordSequence, gt: &ChordSequence, policy: MatchingPolicy) -> Result<f64, EvalError> {
    let duration = total_duration(gt);
    if gt.is_empty() || duration <= 0.0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let est = est.padded(gt.end());
    let est = est.segments();
    let mut matched = 0.0;
    let mut j = 0;
    for g in gt.segments() {
        while j < est.len() && est[j].end <= g.start {
            j += 1;
        }
        let mut k = j;
        while k < est.len() && est[k].start < g.end {
            if policy.matches(est[k].label, g.label) {
                matched += overlap(g, &est[k]);
            }
            k += 1;
        }
    }
    Ok((matched / duration).clamp(0.0, 1.0))
}

/// Duration-weighted mean CSR over `(estimate, ground truth)` pairs.
pub fn wcsr(pairs: &[(ChordSequence, ChordSequence)], policy: MatchingPolicy) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (est, gt) in pairs {
        let d = total_duration(gt);
        weighted += csr(est, gt, policy)? * d;
        total += d;
    }
    Ok(weighted / total)
}

fn common_span(a: &ChordSequence, b: &ChordSequence) -> Result<(ChordSequence, ChordSequence), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::SpanMismatch);
    }
    let end = a.end().max(b.end());
    Ok((a.padded(end), b.padded(end)))
}

/// Σ over segments of `s0` of the part not covered by its best-overlapping
/// segment of `s`. Labels are ignored.
pub fn directional_hamming(s: &ChordSequence, s0: &ChordSequence) -> Result<f64, EvalError> {
    let (s, s0) = common_span(s, s0)?;
    let segs = s.segments();
    let mut total = 0.0;
    let mut j = 0;
    for seg0 in s0.segments() {
        while j < segs.len() && segs[j].end <= seg0.start {
            j += 1;
        }
        let mut best: f64 = 0.0;
        let mut k = j;
        while k < segs.len() && segs[k].start < seg0.end {
            best = best.max(overlap(seg0, &segs[k]));
            k += 1;
        }
        total += seg0.duration() - best;
    }
    Ok(total.max(0.0))
}

/// `(overseg, underseg, seg)` of an estimate against the ground truth.
pub fn segmentation_scores(est: &ChordSequence, gt: &ChordSequence) -> Result<(f64, f64, f64), EvalError> {
    let (_, padded_gt) = common_span(est, gt)?;
    let duration = padded_gt.end() - padded_gt.start();
    let over = 1.0 - directional_hamming(est, gt)? / duration;
    let under = 1.0 - directional_hamming(gt, est)? / duration;
    let over = over.clamp(0.0, 1.0);
    let under = under.clamp(0.0, 1.0);
    Ok((over, under, over.min(under)))
}

pub fn evaluate(est: &ChordSequence, gt: &ChordSequence, policy: MatchingPolicy) -> Result<EvalReport, EvalError> {
    let csr = csr(est, gt, policy)?;
    let (overseg, underseg, seg) = if est.is_empty() {
        (1.0, 0.0, 0.0)
    } else {
        segmentation_scores(est, gt)?
    };
    Ok(EvalReport { csr, overseg, underseg, seg, duration: total_duration(gt) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lab(triples: &[(f64, f64, ChordLabel)]) -> ChordSequence {
        ChordSequence::from_triples(triples)
    }

    fn fixtures() -> (ChordSequence, ChordSequence, ChordSequence) {
        let (c, f, g) = (ChordLabel::major(0), ChordLabel::major(5), ChordLabel::major(7));
        let (b, fs, am) = (ChordLabel::major(11), ChordLabel::major(6), ChordLabel::minor(9));
        let gt = lab(&[(0.0, 5.0, c), (5.0, 8.0, f), (8.0, 10.0, g), (10.0, 13.0, c)]);
        let a = lab(&[
            (0.0, 1.0, c),
            (1.0, 2.0, b),
            (2.0, 3.0, c),
            (3.0, 4.0, fs),
            (4.0, 5.0, c),
            (5.0, 6.0, f),
            (6.0, 7.0, b),
            (7.0, 8.0, f),
            (8.0, 9.0, b),
            (9.0, 10.0, g),
            (10.0, 13.0, c),
        ]);
        let b_ann = lab(&[(0.0, 5.0, am), (5.0, 8.0, f), (8.0, 10.0, g), (10.0, 13.0, c)]);
        (gt, a, b_ann)
    }

    #[test]
    fn recall_on_worked_example() {
        let (gt, a, b) = fixtures();
        assert!((csr(&a, &gt, MatchingPolicy::MajMin).unwrap() - 9.0 / 13.0).abs() < 1e-12);
        assert!((csr(&b, &gt, MatchingPolicy::MajMin).unwrap() - 8.0 / 13.0).abs() < 1e-12);
        assert_eq!(csr(&gt, &gt, MatchingPolicy::MajMin).unwrap(), 1.0);
        assert_eq!(csr(&a, &ChordSequence::default(), MatchingPolicy::MajMin), Err(EvalError::EmptyGroundTruth));
    }

    #[test]
    fn hamming_on_worked_example() {
        let (gt, a, b) = fixtures();
        assert_eq!(directional_hamming(&a, &gt).unwrap(), 7.0);
        assert_eq!(directional_hamming(&gt, &a).unwrap(), 0.0);
        assert_eq!(directional_hamming(&gt, &gt).unwrap(), 0.0);
        assert_eq!(segmentation_scores(&b, &gt).unwrap(), (1.0, 1.0, 1.0));
        let (over, under, seg) = segmentation_scores(&a, &gt).unwrap();
        assert!((over - (1.0 - 7.0 / 13.0)).abs() < 1e-12);
        assert_eq!(under, 1.0);
        assert_eq!(seg, over);
        assert_eq!(
            directional_hamming(&ChordSequence::default(), &gt),
            Err(EvalError::SpanMismatch)
        );
    }

    #[test]
    fn weighted_recall() {
        let c = ChordLabel::major(0);
        let g = ChordLabel::major(7);
        let song = |len: f64| lab(&[(0.0, len, c)]);
        let wrong = |len: f64| lab(&[(0.0, len, g)]);
        let half = |len: f64| lab(&[(0.0, len / 2.0, c), (len / 2.0, len, g)]);
        assert_eq!(wcsr(&[(song(10.0), song(10.0))], MatchingPolicy::MajMin).unwrap(), 1.0);
        assert_eq!(
            wcsr(&[(song(10.0), song(10.0)), (wrong(10.0), song(10.0))], MatchingPolicy::MajMin).unwrap(),
            0.5
        );
        let w = wcsr(&[(song(10.0), song(10.0)), (half(30.0), song(30.0))], MatchingPolicy::MajMin).unwrap();
        assert!((w - 0.625).abs() < 1e-12);
        assert_eq!(wcsr(&[], MatchingPolicy::MajMin), Err(EvalError::EmptyCorpus));
    }

    #[test]
    fn root_policy_ignores_mode() {
        let gt = lab(&[(0.0, 1.0, ChordLabel::major(0))]);
        let est = lab(&[(0.0, 1.0, ChordLabel::minor(0))]);
        assert_eq!(csr(&est, &gt, MatchingPolicy::Root).unwrap(), 1.0);
        assert_eq!(csr(&est, &gt, MatchingPolicy::MajMin).unwrap(), 0.0);
    }

    fn label_strategy() -> impl Strategy<Value = ChordLabel> {
        (0usize..25).prop_map(|i| ChordLabel::from_vocabulary_index(i).unwrap())
    }

    fn tiling(span: usize) -> impl Strategy<Value = ChordSequence> {
        prop::collection::vec((1usize..6, label_strategy()), 1..10).prop_map(move |parts| {
            let mut segs = Vec::new();
            let mut cursor = 0usize;
            for (len, label) in parts {
                if cursor >= span {
                    break;
                }
                let end = (cursor + len).min(span);
                segs.push((cursor as f64 * 0.5, end as f64 * 0.5, label));
                cursor = end;
            }
            if cursor < span {
                segs.push((cursor as f64 * 0.5, span as f64 * 0.5, ChordLabel::NoChord));
            }
            ChordSequence::from_triples(&segs)
        })
    }

    proptest! {
        #[test]
        fn csr_bounded_and_transposition_invariant(est in tiling(20), gt in tiling(20), k in 0i32..12) {
            let r = csr(&est, &gt, MatchingPolicy::MajMin).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let rt = csr(&est.transpose(k), &gt.transpose(k), MatchingPolicy::MajMin).unwrap();
            prop_assert!((r - rt).abs() < 1e-12);
        }

        #[test]
        fn splitting_keeps_csr_and_never_raises_overseg(est in tiling(20), gt in tiling(20), which in 0usize..10, frac in 0.1f64..0.9) {
            let segs = est.segments();
            let i = which % segs.len();
            let mid = segs[i].start + frac * segs[i].duration();
            let mut split: Vec<ChordSegment> = segs.to_vec();
            let original = split[i];
            split[i].end = mid;
            split.insert(i + 1, ChordSegment { start: mid, ..original });
            let split = ChordSequence::new(split).unwrap();
            let before = csr(&est, &gt, MatchingPolicy::MajMin).unwrap();
            let after = csr(&split, &gt, MatchingPolicy::MajMin).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
            let (o1, _, _) = segmentation_scores(&est, &gt).unwrap();
            let (o2, _, _) = segmentation_scores(&split, &gt).unwrap();
            prop_assert!(o2 <= o1 + 1e-12);
        }

        #[test]
        fn wcsr_equals_concatenated_csr(songs in prop::collection::vec((tiling(12), tiling(12)), 1..5)) {
            let w = wcsr(&songs, MatchingPolicy::MajMin).unwrap();
            let mut est_all = Vec::new();
            let mut gt_all = Vec::new();
            let mut offset = 0.0;
            for (est, gt) in &songs {
                est_all.extend(est.shifted(offset).segments().iter().copied());
                gt_all.extend(gt.shifted(offset).segments().iter().copied());
                offset += 6.0;
            }
            let c = csr(&ChordSequence::new(est_all).unwrap(), &ChordSequence::new(gt_all).unwrap(), MatchingPolicy::MajMin).unwrap();
            prop_assert!((w - c).abs() < 1e-9);
        }

        #[test]
        fn hamming_zero_iff_refinement(a in tiling(16), b in tiling(16)) {
            let h = directional_hamming(&a, &b).unwrap();
            prop_assert!(h >= 0.0);
            // zero exactly when each segment of b sits inside one segment of a
            let contained = b.segments().iter().all(|sb| {
                a.segments().iter().any(|sa| sa.start <= sb.start && sb.end <= sa.end)
            });
            prop_assert_eq!(h == 0.0, contained);
        }
    }
}
