//! Synthetic fixtures: SMF encoding, rendered audio, chroma corpora and
//! whole demo songs. Used by tests, benchmarks and the demo corpus.

/// Builds a format-0 Standard MIDI File in memory.
#[derive(Debug, Clone)]
pub struct SmfBuilder {
    ticks_per_quarter: u16,
    /// (tick, order, bytes); order puts meta first and note-offs before note-ons.
    events: Vec<(u64, u8, Vec<u8>)>,
}

impl SmfBuilder {
    pub fn new(ticks_per_quarter: u16) -> Self {
        SmfBuilder { ticks_per_quarter, events: Vec::new() }
    }

    pub fn tempo(mut self, tick: u64, us_per_quarter: u32) -> Self {
        let b = us_per_quarter.to_be_bytes();
        self.events.push((tick, 0, vec![0xff, 0x51, 0x03, b[1], b[2], b[3]]));
        self
    }

    pub fn time_signature(mut self, tick: u64, numerator: u8, denominator: u8) -> Self {
        let power = denominator.max(1).trailing_zeros() as u8;
        self.events.push((tick, 0, vec![0xff, 0x58, 0x04, numerator, power, 24, 8]));
        self
    }

    pub fn note(mut self, start: u64, end: u64, pitch: u8, velocity: u8, channel: u8) -> Self {
        self.events.push((start, 2, vec![0x90 | (channel & 0x0f), pitch & 0x7f, velocity.clamp(1, 127)]));
        self.events.push((end, 1, vec![0x80 | (channel & 0x0f), pitch & 0x7f, 0]));
        self
    }

    pub fn build(mut self) -> Vec<u8> {
        self.events.sort_by_key(|e| (e.0, e.1));
        let mut track = Vec::new();
        let mut last = 0u64;
        for (tick, _, bytes) in &self.events {
            write_vlq(&mut track, (tick - last) as u32);
            track.extend_from_slice(bytes);
            last = *tick;
        }
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        let mut out = Vec::with_capacity(track.len() + 22);
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&self.ticks_per_quarter.to_be_bytes());
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(&track);
        out
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotations::{BeatGrid, ChordSequence};
use crate::audio::{ChromaSequence, Waveform, SAMPLE_RATE};
use crate::chord::ChordLabel;
use crate::hmm::{train_hmm, HmmParameters};
use crate::midi::PARTIAL_WEIGHTS;
use crate::tab::UntimedChordSequence;

/// Chord held for this many beats in generated songs.
pub const BEATS_PER_CHORD: usize = 4;
pub const CHORDS_PER_LINE: usize = 4;

/// Template chroma (unit mass over the chord tones, uniform for `N`) plus
/// Gaussian noise, clipped at zero.
pub fn noisy_chroma(labels: &[ChordLabel], period: f64, sigma: f64, rng: &mut impl Rng) -> ChromaSequence {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut vectors = Array2::zeros((labels.len(), 12));
    for (t, label) in labels.iter().enumerate() {
        let template = if label.is_no_chord() { [1.0; 12] } else { label.template() };
        let mass: f64 = template.iter().sum();
        for d in 0..12 {
            vectors[[t, d]] = (template[d] / mass + normal.sample(rng)).max(0.0);
        }
    }
    ChromaSequence { vectors, frame_period: period }
}

/// Diatonic triads of a major key, as offsets from the tonic.
const DIATONIC: [(i32, bool); 6] = [(0, true), (2, false), (4, false), (5, true), (7, true), (9, false)];

const FORMS: [&[usize]; 4] = [
    &[0, 0, 1, 0, 0, 1, 1],
    &[0, 1, 0, 1, 2, 1, 1],
    &[2, 0, 0, 1, 0, 1, 2],
    &[0, 0, 1, 1, 0, 0, 1, 1],
];

/// A generated song: beat-level truth, uniform beats, noisy chroma and the
/// line structure a tab of it would contain.
#[derive(Debug, Clone)]
pub struct SyntheticSong {
    pub beat_labels: Vec<ChordLabel>,
    pub beats: BeatGrid,
    pub chroma: ChromaSequence,
    pub truth: ChordSequence,
    /// Distinct chord lines.
    pub lines: Vec<Vec<ChordLabel>>,
    /// Order in which lines are played.
    pub form: Vec<usize>,
}

impl SyntheticSong {
    pub fn from_beat_labels(labels: &[ChordLabel], period: f64, sigma: f64, rng: &mut impl Rng) -> Self {
        let beats = BeatGrid::uniform(0.0, labels.len() as f64 * period, period);
        let triples: Vec<(f64, f64, ChordLabel)> =
            labels.iter().enumerate().map(|(i, &l)| (beats.times[i], beats.times[i + 1], l)).collect();
        SyntheticSong {
            beat_labels: labels.to_vec(),
            chroma: noisy_chroma(labels, period, sigma, rng),
            beats,
            truth: ChordSequence::from_triples(&triples).merged(),
            lines: vec![labels.to_vec()],
            form: vec![0],
        }
    }

    /// A pop-like song in a random major key at 120 BPM.
    pub fn random(rng: &mut impl Rng, sigma: f64) -> Self {
        let key = rng.random_range(0..12);
        let form = FORMS.choose(rng).expect("forms").to_vec();
        let n_lines = form.iter().max().expect("non-empty form") + 1;
        let mut lines: Vec<Vec<ChordLabel>> = Vec::new();
        while lines.len() < n_lines {
            let mut line = Vec::with_capacity(CHORDS_PER_LINE);
            while line.len() < CHORDS_PER_LINE {
                let &(offset, major) = DIATONIC.choose(rng).expect("diatonic");
                let chord = if major { ChordLabel::major(key + offset) } else { ChordLabel::minor(key + offset) };
                if line.last() != Some(&chord) {
                    line.push(chord);
                }
            }
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        SyntheticSong::from_lines(lines, form, sigma, rng)
    }

    /// Plays `lines` in `form` order at 120 BPM.
    pub fn from_lines(lines: Vec<Vec<ChordLabel>>, form: Vec<usize>, sigma: f64, rng: &mut impl Rng) -> Self {
        let labels: Vec<ChordLabel> = form
            .iter()
            .flat_map(|&l| lines[l].iter().flat_map(|&c| std::iter::repeat_n(c, BEATS_PER_CHORD)))
            .collect();
        let mut song = SyntheticSong::from_beat_labels(&labels, 0.5, sigma, rng);
        song.lines = lines;
        song.form = form;
        song
    }

    /// Every played line, in order.
    pub fn full_ucs(&self) -> UntimedChordSequence {
        let played: Vec<Vec<ChordLabel>> = self.form.iter().map(|&l| self.lines[l].clone()).collect();
        UntimedChordSequence::from_labels_by_line(&played)
    }

    /// Each distinct line once, as a tab that omits repeats.
    pub fn tab_ucs(&self) -> UntimedChordSequence {
        UntimedChordSequence::from_labels_by_line(&self.lines)
    }

    /// Chord sheet text for [`Self::tab_ucs`], transposed up by `k`.
    pub fn chord_sheet(&self, k: i32) -> String {
        let mut out = String::from("SYNTHETIC SONG\n\n");
        for (i, line) in self.lines.iter().enumerate() {
            out.push_str(&format!("[Verse {}]\n", i + 1));
            let symbols: Vec<String> = line.iter().map(|c| chord_symbol(c.transpose(k))).collect();
            out.push_str(symbols.iter().map(|s| format!("{s:<8}")).collect::<String>().trim_end());
            out.push_str("\nla la la la, la la la la la\n\n");
        }
        out
    }

    pub fn duration(&self) -> f64 {
        *self.beats.times.last().expect("beats")
    }
}

/// Lead-sheet spelling: `C`, `F#m`.
pub fn chord_symbol(label: ChordLabel) -> String {
    match label {
        ChordLabel::NoChord => "N.C.".to_string(),
        ChordLabel::Chord { root, mode } => {
            format!("{}{}", root.name(), if mode == crate::chord::Mode::Minor { "m" } else { "" })
        }
    }
}

/// HMM trained on forty random songs with noise `0.05`.
pub fn synthetic_hmm(seed: u64) -> HmmParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<(ChromaSequence, Vec<ChordLabel>)> = (0..40)
        .map(|_| {
            let song = SyntheticSong::random(&mut rng, 0.05);
            (song.chroma, song.beat_labels)
        })
        .collect();
    train_hmm(&corpus).expect("non-empty corpus")
}

/// The parameters of `synthetic_hmm(1)`, shipped with the crate.
pub fn bundled_hmm() -> HmmParameters {
    serde_json::from_str(include_str!("../data/synthetic-hmm.json")).expect("bundled model parses")
}

/// Replaces whole beats, about `fraction` of the total, with wrong labels.
pub fn degrade(song: &SyntheticSong, fraction: f64, rng: &mut impl Rng) -> ChordSequence {
    let n = song.beat_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let count = (fraction * n as f64).round() as usize;
    let mut labels = song.beat_labels.clone();
    for &i in &order[..count] {
        loop {
            let candidate = ChordLabel::from_vocabulary_index(rng.random_range(1..25)).expect("index");
            if candidate != labels[i] {
                labels[i] = candidate;
                break;
            }
        }
    }
    let t = &song.beats.times;
    let triples: Vec<(f64, f64, ChordLabel)> = labels.iter().enumerate().map(|(i, &l)| (t[i], t[i + 1], l)).collect();
    ChordSequence::from_triples(&triples).merged()
}

/// Block chords plus a bass note in 4/4 at the given tempo, one format-0 file.
pub fn chords_to_midi(chords: &ChordSequence, bpm: f64) -> Vec<u8> {
    let tpq = 480u16;
    let tick = |s: f64| (s * bpm / 60.0 * tpq as f64).round() as u64;
    let mut b = SmfBuilder::new(tpq).tempo(0, (60_000_000.0 / bpm).round() as u32).time_signature(0, 4, 4);
    for seg in chords.segments() {
        let Some(root) = seg.label.root() else { continue };
        let (start, end) = (tick(seg.start), tick(seg.end));
        if end <= start {
            continue;
        }
        let third = if matches!(seg.label, ChordLabel::Chord { mode: crate::chord::Mode::Minor, .. }) { 3 } else { 4 };
        let base = 60 + root.index() as u8;
        for p in [base, base + third, base + 7] {
            b = b.note(start, end, p, 90, 0);
        }
        b = b.note(start, end, base - 24, 100, 1);
    }
    b.build()
}

fn midi_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Additive rendering: each note is a harmonic tone struck on every beat.
pub fn render_notes(notes: &[(f64, f64, u8, f64)], duration: f64, beat_period: f64, clicks: bool) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (duration * sr).ceil() as usize;
    let mut samples = vec![0.0; n];
    for &(start, end, pitch, gain) in notes {
        let f = midi_hz(pitch as f64);
        let lo = (start * sr) as usize;
        let hi = ((end * sr) as usize).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / sr;
            let since = (t - start) % beat_period;
            let env = (since / 0.01).min(1.0) * (-since / 0.8).exp();
            let phase = 2.0 * std::f64::consts::PI * f * t;
            let tone: f64 = PARTIAL_WEIGHTS.iter().enumerate().map(|(h, w)| w * (phase * (h + 1) as f64).sin()).sum();
            *s += gain * env * tone;
        }
    }
    if clicks {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut t = 0.0;
        while t < duration {
            let lo = (t * sr) as usize;
            for k in 0..(0.02 * sr) as usize {
                if lo + k < n {
                    samples[lo + k] += 0.4 * (-(k as f64) / (0.004 * sr)).exp() * rng.random_range(-1.0..1.0);
                }
            }
            t += beat_period;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.9 {
        samples.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Renders chord segments as root-position triads over a bass note.
pub fn render_chords(segments: &[(f64, f64, ChordLabel)], bpm: f64, clicks: bool) -> Waveform {
    let mut notes = Vec::new();
    for &(start, end, label) in segments {
        let Some(root) = label.root() else { continue };
        let third = if matches!(label, ChordLabel::Chord { mode: crate::chord::Mode::Minor, .. }) { 3 } else { 4 };
        let base = 60 + root.index() as u8;
        for p in [base, base + third, base + 7] {
            notes.push((start, end, p, 0.2));
        }
        notes.push((start, end, base - 24, 0.15));
    }
    let duration = segments.iter().map(|s| s.1).fold(0.0, f64::max);
    render_notes(&notes, duration, 60.0 / bpm, clicks)
}
