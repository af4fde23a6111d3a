//! Template-matching chord estimation on MIDI files.
//!
//! Each bar or beat becomes a velocity- and duration-weighted chroma vector
//! which is scored against the 24 major/minor templates with
//! `S = P - (N + M)`: `P` is the weight on template notes, `N` the weight
//! elsewhere and `M` the number of template notes that are silent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ChordSegment, ChordSequence};
use crate::chord::{ChordLabel, ChordTemplate, ChordVocabulary};
use crate::midi::{beats_and_downbeats, MidiSong, NoteEvent};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CassetteError {
    #[error("no beats could be derived from the MIDI file")]
    NoBeats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentationLevel {
    Bar,
    Beat,
}

impl SegmentationLevel {
    pub fn name(self) -> &'static str {
        match self {
            SegmentationLevel::Bar => "bar",
            SegmentationLevel::Beat => "beat",
        }
    }
}

/// Scores at or below this value yield `N`.
pub const NO_CHORD_THRESHOLD: f64 = -3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedChroma {
    pub weights: [f64; 12],
}

impl WeightedChroma {
    pub fn is_silent(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    pub fn normalized(&self) -> WeightedChroma {
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 {
            WeightedChroma { weights: self.weights.map(|w| w / sum) }
        } else {
            *self
        }
    }
}

/// Velocity × fraction-of-segment per pitch class, before normalization.
pub fn raw_weighted_chroma<'a, I>(notes: I, seg_start: f64, seg_end: f64) -> WeightedChroma
where
    I: IntoIterator<Item = &'a NoteEvent>,
{
    let length = seg_end - seg_start;
    let mut weights = [0.0; 12];
    if length <= 0.0 {
        return WeightedChroma { weights };
    }
    for note in notes {
        if note.is_drum() {
            continue;
        }
        let overlap = note.end.min(seg_end) - note.start.max(seg_start);
        if overlap > 0.0 {
            weights[(note.pitch % 12) as usize] += note.velocity as f64 * overlap / length;
        }
    }
    WeightedChroma { weights }
}

pub fn weighted_chroma<'a, I>(notes: I, seg_start: f64, seg_end: f64) -> WeightedChroma
where
    I: IntoIterator<Item = &'a NoteEvent>,
{
    raw_weighted_chroma(notes, seg_start, seg_end).normalized()
}

pub fn template_score(chroma: &WeightedChroma, template: &ChordTemplate) -> f64 {
    let mut p = 0.0;
    let mut n = 0.0;
    let mut m = 0.0;
    for (w, t) in chroma.weights.iter().zip(template.chroma.iter()) {
        if *t > 0.0 {
            p += w;
            if *w == 0.0 {
                m += 1.0;
            }
        } else {
            n += w;
        }
    }
    p - (n + m)
}

const TIE_EPS: f64 = 1e-12;

/// Best-scoring template. Equal scores go to the larger root weight, then
/// to vocabulary order. Scores at or below -3 give `N`.
pub fn best_chord(chroma: &WeightedChroma, vocab: &ChordVocabulary) -> (ChordLabel, f64) {
    let mut best: Option<(ChordLabel, f64, f64)> = None;
    for template in vocab.templates() {
        let score = template_score(chroma, template);
        let root_weight = template.label.root().map_or(0.0, |r| chroma.weights[r.index()]);
        let better = match best {
            None => true,
            Some((_, s, rw)) => {
                score > s + TIE_EPS || ((score - s).abs() <= TIE_EPS && root_weight > rw + TIE_EPS)
            }
        };
        if better {
            best = Some((template.label, score, root_weight));
        }
    }
    match best {
        Some((label, score, _)) if score > NO_CHORD_THRESHOLD => (label, score),
        Some((_, score, _)) => (ChordLabel::NoChord, score),
        None => (ChordLabel::NoChord, NO_CHORD_THRESHOLD),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CassetteResult {
    pub sequence: ChordSequence,
    /// Average template similarity over the segments, before merging.
    pub ats: f64,
    pub level: SegmentationLevel,
    /// Per-segment (start, end, label, score), before merging.
    pub segments: Vec<(f64, f64, ChordLabel, f64)>,
}

impl CassetteResult {
    /// ATS with each segment weighted by its duration.
    pub fn duration_weighted_ats(&self) -> f64 {
        let total: f64 = self.segments.iter().map(|s| s.1 - s.0).sum();
        if total <= 0.0 {
            return self.ats;
        }
        self.segments.iter().map(|s| (s.1 - s.0) * s.3).sum::<f64>() / total
    }
}

/// Segment boundaries of `m` at the given level, ending at the song end.
pub fn segment_boundaries(m: &MidiSong, level: SegmentationLevel) -> Vec<f64> {
    let grid = beats_and_downbeats(m);
    let mut bounds: Vec<f64> = match level {
        SegmentationLevel::Beat => grid.times.clone(),
        SegmentationLevel::Bar => {
            let bars = grid.downbeat_times();
            if bars.is_empty() { grid.times.clone() } else { bars }
        }
    };
    let end = m.end_time();
    if bounds.last().is_some_and(|&last| end > last) {
        bounds.push(end);
    }
    bounds
}

pub fn estimate(m: &MidiSong, level: SegmentationLevel) -> Result<CassetteResult, CassetteError> {
    let bounds = segment_boundaries(m, level);
    if bounds.len() < 2 {
        return Err(CassetteError::NoBeats);
    }
    let vocab = ChordVocabulary::major_minor();
    let notes: Vec<&NoteEvent> = m.pitched_notes().collect();
    let mut segments = Vec::with_capacity(bounds.len() - 1);
    let mut first = 0;
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        while first < notes.len() && notes[first].end <= start {
            first += 1;
        }
        // Notes are sorted by start, not end: scan forward until starts pass the segment.
        let overlapping = notes.iter().skip(first).take_while(|n| n.start < end).copied();
        let chroma = weighted_chroma(overlapping, start, end);
        let (label, score) = best_chord(&chroma, &vocab);
        segments.push((start, end, label, score));
    }
    let ats = segments.iter().map(|s| s.3).sum::<f64>() / segments.len() as f64;
    let sequence = ChordSequence::new(
        segments
            .iter()
            .map(|&(start, end, label, _)| ChordSegment { start, end, label })
            .collect(),
    )
    .expect("beat boundaries are increasing")
    .merged();
    Ok(CassetteResult { sequence, ats, level, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::parse_midi_bytes;
    use crate::synth::SmfBuilder;
    use proptest::prelude::*;

    fn note(start: f64, end: f64, pitch: u8, velocity: u8) -> NoteEvent {
        NoteEvent { start, end, pitch, velocity, channel: 0 }
    }

    fn chroma_of(pcs: &[usize]) -> WeightedChroma {
        let mut weights = [0.0; 12];
        for &pc in pcs {
            weights[pc] = 1.0 / pcs.len() as f64;
        }
        WeightedChroma { weights }
    }

    #[test]
    fn quarter_note_in_a_bar() {
        let notes = [note(0.0, 0.5, 60, 100)];
        let raw = raw_weighted_chroma(&notes, 0.0, 2.0);
        let mut expected = [0.0; 12];
        expected[0] = 25.0;
        assert_eq!(raw.weights, expected);
        assert!(raw_weighted_chroma(&[], 0.0, 2.0).is_silent());
        let both = [note(0.0, 2.0, 60, 80), note(0.0, 2.0, 67, 80)];
        let w = weighted_chroma(&both, 0.0, 2.0).weights;
        assert_eq!(w, [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn score_examples() {
        let c_major = ChordTemplate::new(ChordLabel::major(0));
        assert!((template_score(&chroma_of(&[0, 4, 7]), &c_major) - 1.0).abs() < 1e-12);
        assert_eq!(template_score(&WeightedChroma { weights: [0.0; 12] }, &c_major), -3.0);
        assert_eq!(template_score(&chroma_of(&[2]), &c_major), -4.0);
        assert_eq!(ChordTemplate::new(ChordLabel::minor(2)).chroma, [0., 0., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn best_chord_examples() {
        let vocab = ChordVocabulary::major_minor();
        assert_eq!(best_chord(&chroma_of(&[2, 5, 9]), &vocab).0, ChordLabel::minor(2));
        assert_eq!(best_chord(&WeightedChroma { weights: [0.0; 12] }, &vocab), (ChordLabel::NoChord, -3.0));
    }

    /// Exhaustive search over small rational chromas for a C-major / A-minor
    /// score tie, checking the root-weight rule decides it.
    #[test]
    fn root_weight_breaks_ties() {
        let vocab = ChordVocabulary::major_minor();
        let (c, am) = (ChordLabel::major(0), ChordLabel::minor(9));
        let tc = ChordTemplate::new(c);
        let ta = ChordTemplate::new(am);
        let mut checked = 0;
        for a in 0..=4u32 {
            for cc in 0..=4u32 {
                for e in 0..=4u32 {
                    for g in 0..=4u32 {
                        let total = a + cc + e + g;
                        if total == 0 {
                            continue;
                        }
                        let mut weights = [0.0; 12];
                        weights[9] = a as f64 / total as f64;
                        weights[0] = cc as f64 / total as f64;
                        weights[4] = e as f64 / total as f64;
                        weights[7] = g as f64 / total as f64;
                        let chroma = WeightedChroma { weights };
                        let (sc, sa) = (template_score(&chroma, &tc), template_score(&chroma, &ta));
                        if sc != sa {
                            continue;
                        }
                        let top = vocab
                            .templates()
                            .iter()
                            .map(|t| template_score(&chroma, t))
                            .fold(f64::NEG_INFINITY, f64::max);
                        if sc < top || sc <= NO_CHORD_THRESHOLD || weights[0] == weights[9] {
                            continue;
                        }
                        // no third template may share the top score
                        let tied = vocab.templates().iter().filter(|t| template_score(&chroma, t) == top).count();
                        if tied != 2 {
                            continue;
                        }
                        let expected = if weights[0] > weights[9] { c } else { am };
                        assert_eq!(best_chord(&chroma, &vocab).0, expected, "{weights:?}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    fn bars_of(chords: &[[u8; 3]], passing: Option<(u64, u8)>) -> MidiSong {
        let bar = 4 * 480;
        let mut b = SmfBuilder::new(480);
        for (i, triad) in chords.iter().enumerate() {
            let start = i as u64 * bar;
            for (k, &p) in triad.iter().enumerate() {
                // arpeggiated: each note enters one beat later and holds to the bar end
                b = b.note(start + k as u64 * 480, start + bar, p, 90, 0);
            }
        }
        if let Some((tick, pitch)) = passing {
            b = b.note(tick, tick + 480, pitch, 90, 0);
        }
        parse_midi_bytes(&b.build()).unwrap()
    }

    #[test]
    fn estimate_bars() {
        let one = estimate(&bars_of(&[[60, 64, 67]], None), SegmentationLevel::Bar).unwrap();
        assert_eq!(one.sequence.len(), 1);
        assert_eq!(one.sequence.segments()[0].label, ChordLabel::major(0));

        let two = estimate(&bars_of(&[[60, 64, 67], [55, 59, 62]], None), SegmentationLevel::Bar).unwrap();
        let labels: Vec<ChordLabel> = two.sequence.segments().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![ChordLabel::major(0), ChordLabel::major(7)]);
    }

    #[test]
    fn passing_tone_only_affects_beats() {
        // sustained C major bar with a D on the last beat
        let mut b = SmfBuilder::new(480);
        for p in [48, 52, 55] {
            b = b.note(0, 1920, p, 90, 0);
        }
        b = b.note(1440, 1920, 62, 127, 0);
        let song = parse_midi_bytes(&b.build()).unwrap();
        let bar = estimate(&song, SegmentationLevel::Bar).unwrap();
        assert_eq!(bar.sequence.len(), 1);
        assert_eq!(bar.sequence.segments()[0].label, ChordLabel::major(0));
        let beat = estimate(&song, SegmentationLevel::Beat).unwrap();
        assert!(beat.segments.len() == 4);
    }

    #[test]
    fn exact_triads_give_unit_ats() {
        let song = bars_of(&[[60, 64, 67], [57, 60, 64], [62, 65, 69]], None);
        let mut b = SmfBuilder::new(480);
        for (i, triad) in [[60u8, 64, 67], [57, 60, 64], [62, 65, 69]].iter().enumerate() {
            for &p in triad {
                b = b.note(i as u64 * 1920, (i as u64 + 1) * 1920, p, 90, 0);
            }
        }
        let block = parse_midi_bytes(&b.build()).unwrap();
        let r = estimate(&block, SegmentationLevel::Bar).unwrap();
        assert!((r.ats - 1.0).abs() < 1e-12);
        assert!((r.duration_weighted_ats() - 1.0).abs() < 1e-12);
        let r = estimate(&song, SegmentationLevel::Beat).unwrap();
        let segs = r.sequence.segments();
        assert_eq!(segs[0].start, 0.0);
        for w in segs.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn silent_song_has_no_beats() {
        let song = parse_midi_bytes(&SmfBuilder::new(480).build()).unwrap();
        assert_eq!(estimate(&song, SegmentationLevel::Bar), Err(CassetteError::NoBeats));
    }

    fn triad_index() -> impl Strategy<Value = ChordLabel> {
        (1usize..25).prop_map(|i| ChordLabel::from_vocabulary_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn exact_triads_are_recovered(label in triad_index()) {
            let vocab = ChordVocabulary::major_minor();
            let t = label.template();
            let weights = t.map(|v| v / 3.0);
            prop_assert_eq!(best_chord(&WeightedChroma { weights }, &vocab).0, label);
        }

        #[test]
        fn rotation_equivariance(raw in prop::array::uniform12(0u8..5), k in 0i32..12, label in triad_index()) {
            let total: u32 = raw.iter().map(|&v| v as u32).sum();
            prop_assume!(total > 0);
            let weights = raw.map(|v| v as f64 / total as f64);
            let mut rotated = [0.0; 12];
            for i in 0..12 {
                rotated[(i + k as usize) % 12] = weights[i];
            }
            let a = template_score(&WeightedChroma { weights }, &ChordTemplate::new(label));
            let b = template_score(&WeightedChroma { weights: rotated }, &ChordTemplate::new(label.transpose(k)));
            prop_assert!((a - b).abs() < 1e-12);
            let vocab = ChordVocabulary::major_minor();
            let best = best_chord(&WeightedChroma { weights }, &vocab).0;
            let best_rot = best_chord(&WeightedChroma { weights: rotated }, &vocab).0;
            // equivariant unless a residual tie was settled by vocabulary order
            let s = template_score(&WeightedChroma { weights }, &ChordTemplate::new(best.transpose(0)));
            let ties = vocab.templates().iter().filter(|t| {
                let sc = template_score(&WeightedChroma { weights }, t);
                let rw = t.label.root().map_or(0.0, |r| weights[r.index()]);
                let brw = best.root().map_or(0.0, |r| weights[r.index()]);
                (sc - s).abs() <= TIE_EPS && (rw - brw).abs() <= TIE_EPS
            }).count();
            if ties <= 1 {
                prop_assert_eq!(best_rot, best.transpose(k));
            }
        }
    }
}
