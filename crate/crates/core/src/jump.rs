//! Alignment of untimed chord sequences to beat-synchronous chroma, with
//! jumps between tab lines and a search over all 12 transpositions.

use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::{BeatGrid, ChordSequence};
use crate::audio::{self, AudioError, ChromaSequence, CqtLayout, Waveform};
use crate::chord::ChordLabel;
use crate::hmm::{viterbi_log, HmmError, HmmParameters, SparseTransitions};
use crate::tab::UntimedChordSequence;

/// Hop used for the frame-level chroma before beat synchronization.
pub const JUMP_HOP: usize = 256;

#[derive(Debug, Error)]
pub enum JumpError {
    #[error("untimed chord sequence is empty")]
    EmptyUcs,
    #[error("no beat-synchronous frames")]
    NoFrames,
    #[error("{frames} frames need {needed} beat times, got {beats}")]
    BeatMismatch { frames: usize, needed: usize, beats: usize },
    #[error("jump probabilities must be non-negative")]
    InvalidConfig,
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpConfig {
    pub p_f: f64,
    pub p_b: f64,
}

impl Default for JumpConfig {
    fn default() -> Self {
        JumpConfig { p_f: 0.05, p_b: 0.05 }
    }
}

impl JumpConfig {
    pub fn validate(&self) -> Result<(), JumpError> {
        if self.p_f >= 0.0 && self.p_b >= 0.0 {
            Ok(())
        } else {
            Err(JumpError::InvalidConfig)
        }
    }
}

/// One state per UCS entry, with line boundary flags.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpStateSpace {
    pub labels: Vec<ChordLabel>,
    pub transposition: i32,
    pub line_start: Vec<bool>,
    pub line_end: Vec<bool>,
}

impl JumpStateSpace {
    /// States for `ucs` with every label shifted by `-transposition`.
    pub fn new(ucs: &UntimedChordSequence, transposition: i32) -> Self {
        let n = ucs.len();
        let line_start: Vec<bool> = ucs.entries.iter().enumerate().map(|(i, e)| i == 0 || e.line_start).collect();
        let line_end = (0..n).map(|i| i + 1 == n || line_start[i + 1]).collect();
        JumpStateSpace {
            labels: ucs.entries.iter().map(|e| e.label.transpose(-transposition)).collect(),
            transposition,
            line_start,
            line_end,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Row-stochastic L x L matrix. Staying and advancing keep the chord
/// transition probability; a line end may also jump to any line start,
/// scaled by `p_f` forwards and `p_b` backwards.
pub fn jump_transition(space: &JumpStateSpace, hmm: &HmmParameters, cfg: &JumpConfig) -> Vec<Vec<f64>> {
    let n = space.len();
    let idx: Vec<usize> = space.labels.iter().map(|l| l.vocabulary_index()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let row = &mut out[i];
        for j in 0..n {
            let p = hmm.p_tr[idx[i]][idx[j]];
            row[j] = if j == i || j == i + 1 {
                p
            } else if space.line_end[i] && space.line_start[j] {
                if j > i { cfg.p_f * p } else { cfg.p_b * p }
            } else {
                0.0
            };
        }
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|v| *v /= z);
        } else {
            row[i] = 1.0;
        }
    }
    out
}

/// Initial distribution: line starts only, proportional to the chord prior.
pub fn jump_initial(space: &JumpStateSpace, hmm: &HmmParameters) -> Vec<f64> {
    let mut out: Vec<f64> = (0..space.len())
        .map(|j| if space.line_start[j] { hmm.p_ini[space.labels[j].vocabulary_index()] } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpAlignment {
    pub sequence: ChordSequence,
    pub log_likelihood: f64,
    /// Semitones the tab sits above the audio.
    pub transposition: i32,
    /// Decoded UCS index per frame.
    pub states: Vec<usize>,
}

impl JumpAlignment {
    pub fn sidecar(&self) -> String {
        format!("loglik={} transposition={}\n", self.log_likelihood, self.transposition)
    }
}

/// Decodes one transposition. Returns the state path and log likelihood.
pub fn decode_transposition(
    ucs: &UntimedChordSequence,
    transposition: i32,
    log_obs_vocab: &ndarray::Array2<f64>,
    hmm: &HmmParameters,
    cfg: &JumpConfig,
) -> Result<(Vec<usize>, f64), JumpError> {
    let space = JumpStateSpace::new(ucs, transposition);
    let transitions = SparseTransitions::from_dense(&jump_transition(&space, hmm, cfg));
    let log_ini: Vec<f64> = jump_initial(&space, hmm).iter().map(|p| p.ln()).collect();
    let frames = log_obs_vocab.nrows();
    let log_obs = ndarray::Array2::from_shape_fn((frames, space.len()), |(t, j)| {
        log_obs_vocab[[t, space.labels[j].vocabulary_index()]]
    });
    Ok(viterbi_log(&log_ini, &transitions, &log_obs)?)
}

/// Aligns `ucs` to beat-synchronous chroma; frame `t` spans
/// `beats.times[t]..beats.times[t + 1]`.
pub fn jump_align(
    ucs: &UntimedChordSequence,
    chroma: &ChromaSequence,
    beats: &BeatGrid,
    hmm: &HmmParameters,
    cfg: &JumpConfig,
) -> Result<JumpAlignment, JumpError> {
    cfg.validate()?;
    if ucs.is_empty() {
        return Err(JumpError::EmptyUcs);
    }
    let frames = chroma.frames();
    if frames == 0 {
        return Err(JumpError::NoFrames);
    }
    if beats.times.len() != frames + 1 {
        return Err(JumpError::BeatMismatch { frames, needed: frames + 1, beats: beats.times.len() });
    }
    let log_obs_vocab = hmm.emissions()?.log_likelihoods(chroma);
    let decoded: Vec<Result<(Vec<usize>, f64), JumpError>> = (0..12)
        .into_par_iter()
        .map(|k| decode_transposition(ucs, k, &log_obs_vocab, hmm, cfg))
        .collect();
    let mut best: Option<(i32, Vec<usize>, f64)> = None;
    for (k, result) in decoded.into_iter().enumerate() {
        let (path, ll) = result?;
        if best.as_ref().is_none_or(|b| ll > b.2) {
            best = Some((k as i32, path, ll));
        }
    }
    let (transposition, states, log_likelihood) = best.expect("twelve candidates");
    let triples: Vec<(f64, f64, ChordLabel)> = states
        .iter()
        .enumerate()
        .map(|(t, &j)| (beats.times[t], beats.times[t + 1], ucs.entries[j].label.transpose(-transposition)))
        .collect();
    let sequence = ChordSequence::from_triples(&triples).merged();
    Ok(JumpAlignment { sequence, log_likelihood, transposition, states })
}

/// Frame chroma from the harmonic part of a constant-Q spectrogram, beats
/// from the percussive part of the signal, then beat-synchronous means.
pub fn preprocess_audio(w: &Waveform) -> Result<(ChromaSequence, BeatGrid), JumpError> {
    let w = if w.sample_rate == audio::SAMPLE_RATE { w.clone() } else { w.resample(audio::SAMPLE_RATE) };
    let layout = CqtLayout::default();
    let spec = audio::cqt(&w, &layout, JUMP_HOP)?;
    let (harmonic, _) = audio::hpss(&spec)?;
    let chroma = audio::chroma_from_cqt(&harmonic, &layout)?;
    let beats = match audio::beat_track(&w) {
        Ok(b) => b,
        Err(AudioError::SignalTooShort { .. }) => BeatGrid::uniform(0.0, w.duration(), 0.5),
        Err(e) => return Err(e.into()),
    };
    let synced = audio::beat_sync_chroma(&chroma, &beats);
    Ok((synced, beats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chord::ChordLabel as L;
    use crate::evaluation::csr;
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ucs(lines: &[&[L]]) -> UntimedChordSequence {
        let owned: Vec<Vec<L>> = lines.iter().map(|l| l.to_vec()).collect();
        UntimedChordSequence::from_labels_by_line(&owned)
    }

    fn model() -> HmmParameters {
        synth::synthetic_hmm(11)
    }

    #[test]
    fn two_line_hand_normalization() {
        let hmm = model();
        let (c, g, f) = (L::major(0), L::major(7), L::major(5));
        let space = JumpStateSpace::new(&ucs(&[&[c, g], &[f, c], &[g]]), 0);
        let cfg = JumpConfig::default();
        let p = jump_transition(&space, &hmm, &cfg);
        let tr = |a: L, b: L| hmm.p_tr[a.vocabulary_index()][b.vocabulary_index()];
        // state 1 ends line one: stay, advance, back to 0, forward to 4
        let z = tr(g, g) + tr(g, f) + cfg.p_b * tr(g, c) + cfg.p_f * tr(g, g);
        assert!((p[1][0] - cfg.p_b * tr(g, c) / z).abs() < 1e-15);
        assert!((p[1][2] - tr(g, f) / z).abs() < 1e-15);
        assert!((p[1][4] - cfg.p_f * tr(g, g) / z).abs() < 1e-15);
        assert_eq!(p[1][3], 0.0);
        // state 0 is inside a line
        assert_eq!(p[0][2], 0.0);
        assert!(p[0][0] > 0.0 && p[0][1] > 0.0);
        // last state may only stay or go back to line starts
        assert!(p[4][0] > 0.0 && p[4][2] > 0.0 && p[4][1] == 0.0 && p[4][3] == 0.0);
    }

    #[test]
    fn zero_jump_probabilities_are_linear() {
        let hmm = model();
        let space = JumpStateSpace::new(&ucs(&[&[L::major(0), L::major(7)], &[L::minor(9), L::major(5)]]), 0);
        let p = jump_transition(&space, &hmm, &JumpConfig { p_f: 0.0, p_b: 0.0 });
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v > 0.0, j == i || j == i + 1 || (i == 3 && j == 3), "{i}->{j}");
            }
        }
    }

    #[test]
    fn single_line_has_no_jumps_inside() {
        let hmm = model();
        let space = JumpStateSpace::new(&ucs(&[&[L::major(0), L::major(7), L::major(5)]]), 0);
        let p = jump_transition(&space, &hmm, &JumpConfig::default());
        assert_eq!(p[0][2], 0.0);
        assert_eq!(p[1][0], 0.0);
        // the last state ends the only line and may restart it
        assert!(p[2][0] > 0.0);
        let ini = jump_initial(&space, &hmm);
        assert_eq!(ini, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_alignment_steps_by_one() {
        let hmm = model();
        let labels = [L::major(0), L::major(7), L::minor(9), L::major(5), L::major(2)];
        let song = synth::SyntheticSong::from_beat_labels(&labels, 0.5, 0.05, &mut ChaCha8Rng::seed_from_u64(3));
        let u = ucs(&[&labels]);
        let a = jump_align(&u, &song.chroma, &song.beats, &hmm, &JumpConfig { p_f: 0.0, p_b: 0.0 }).unwrap();
        assert_eq!(a.states, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.transposition, 0);
    }

    #[test]
    fn recovers_song_and_transposition() {
        let hmm = model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let song = synth::SyntheticSong::random(&mut rng, 0.05);
        let cfg = JumpConfig::default();
        let exact = jump_align(&song.full_ucs(), &song.chroma, &song.beats, &hmm, &cfg).unwrap();
        assert!(csr(&exact.sequence, &song.truth, Default::default()).unwrap() >= 0.95);
        let compact = song.tab_ucs().transpose(3);
        let shifted = jump_align(&compact, &song.chroma, &song.beats, &hmm, &cfg).unwrap();
        assert_eq!(shifted.transposition, 3);
        assert!(csr(&shifted.sequence, &song.truth, Default::default()).unwrap() >= 0.95);
        // segments tile the beat span
        let seq = &shifted.sequence;
        assert_eq!(seq.start(), song.beats.times[0]);
        assert_eq!(seq.end(), *song.beats.times.last().unwrap());
        for w in seq.segments().windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn one_chord_covers_everything() {
        let hmm = model();
        let labels = vec![L::major(0); 8];
        let song = synth::SyntheticSong::from_beat_labels(&labels, 0.5, 0.05, &mut ChaCha8Rng::seed_from_u64(4));
        let a = jump_align(&ucs(&[&[L::major(0)]]), &song.chroma, &song.beats, &hmm, &JumpConfig::default()).unwrap();
        assert_eq!(a.sequence.len(), 1);
        assert_eq!(a.sequence.segments()[0].label, L::major(0));
        assert_eq!((a.sequence.start(), a.sequence.end()), (0.0, 4.0));
    }

    #[test]
    fn errors() {
        let hmm = model();
        let song = synth::SyntheticSong::from_beat_labels(&[L::major(0)], 0.5, 0.05, &mut ChaCha8Rng::seed_from_u64(4));
        let cfg = JumpConfig::default();
        assert!(matches!(
            jump_align(&UntimedChordSequence::default(), &song.chroma, &song.beats, &hmm, &cfg),
            Err(JumpError::EmptyUcs)
        ));
        let short = BeatGrid::new(vec![0.0], None).unwrap();
        assert!(matches!(
            jump_align(&ucs(&[&[L::major(0)]]), &song.chroma, &short, &hmm, &cfg),
            Err(JumpError::BeatMismatch { .. })
        ));
        assert!(JumpConfig { p_f: -0.1, p_b: 0.0 }.validate().is_err());
    }

    #[test]
    fn silence_gives_zero_frames_and_fallback_beats() {
        let w = Waveform::new(vec![0.0; audio::SAMPLE_RATE as usize * 6], audio::SAMPLE_RATE);
        let (chroma, beats) = preprocess_audio(&w).unwrap();
        assert_eq!(chroma.frames() + 1, beats.len());
        assert!(chroma.vectors.iter().all(|&v| v == 0.0));
        let gaps: Vec<f64> = beats.times.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|g| (g - 0.5).abs() < 1e-9));
    }

    #[test]
    fn strummed_c_major_is_nearest_c_major() {
        let w = synth::render_chords(&[(0.0, 8.0, L::major(0))], 120.0, true);
        let (chroma, beats) = preprocess_audio(&w).unwrap();
        assert!(beats.len() >= 10);
        let vocab = crate::chord::ChordVocabulary::major_minor();
        let mut hits = 0;
        for t in 0..chroma.frames() {
            let f = chroma.frame(t);
            let best = vocab
                .templates()
                .iter()
                .max_by(|a, b| {
                    let ca = cosine(&f, &a.chroma);
                    let cb = cosine(&f, &b.chroma);
                    ca.total_cmp(&cb)
                })
                .unwrap();
            hits += (best.label == L::major(0)) as usize;
        }
        assert!(hits * 10 >= chroma.frames() * 9, "{hits}/{}", chroma.frames());
    }

    fn cosine(a: &[f64; 12], b: &[f64; 12]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rows_are_stochastic(lines in prop::collection::vec(prop::collection::vec(1usize..25, 1..5), 1..5),
                               p_f in 0.0f64..1.0, p_b in 0.0f64..1.0) {
            let hmm = model();
            let labels: Vec<Vec<L>> = lines.iter()
                .map(|l| l.iter().map(|&i| L::from_vocabulary_index(i).unwrap()).collect())
                .collect();
            let u = UntimedChordSequence::from_labels_by_line(&labels);
            let space = JumpStateSpace::new(&u, 0);
            let p = jump_transition(&space, &hmm, &JumpConfig { p_f, p_b });
            for (i, row) in p.iter().enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &v) in row.iter().enumerate() {
                    let allowed = j == i || j == i + 1
                        || (space.line_end[i] && space.line_start[j] && (if j > i { p_f > 0.0 } else { p_b > 0.0 }));
                    prop_assert_eq!(v > 0.0, allowed, "{}->{}", i, j);
                }
            }
        }
    }
}
