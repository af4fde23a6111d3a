//! Chord labels, Harte notation, the 25-label major/minor vocabulary and
//! binary chord templates.
//!
//! Every chord that the parser recognizes is reduced to one of 25 labels:
//! the no-chord symbol `N`, or a root pitch class together with a major or
//! minor mode. A chord is minor iff its interval content contains a minor
//! third above the root and no major third.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChordError {
    #[error("unparsable chord `{0}`")]
    UnparsableChord(String),
}

const SHARP_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// A pitch class, 0 = C, in semitone steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub struct PitchClass(u8);

impl PitchClass {
    pub const C: PitchClass = PitchClass(0);

    /// Reduces any integer modulo 12.
    pub fn new(semitones: i32) -> Self {
        PitchClass(semitones.rem_euclid(12) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn transpose(self, semitones: i32) -> Self {
        PitchClass::new(self.0 as i32 + semitones)
    }

    /// Pitch class of a MIDI note number (60 = C4).
    pub fn from_midi(pitch: u8) -> Self {
        PitchClass(pitch % 12)
    }

    pub fn name(self) -> &'static str {
        SHARP_NAMES[self.index()]
    }

    /// Parses a note name such as `C`, `f#`, `Bb` or `Ebb`.
    pub fn from_name(name: &str) -> Option<Self> {
        let (pc, rest) = parse_root(name)?;
        rest.is_empty().then_some(pc)
    }
}

impl From<PitchClass> for u8 {
    fn from(pc: PitchClass) -> u8 {
        pc.0
    }
}

impl TryFrom<u8> for PitchClass {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        if v < 12 {
            Ok(PitchClass(v))
        } else {
            Err(format!("pitch class {v} out of range"))
        }
    }
}

impl fmt::Display for PitchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

/// A vocabulary-reduced chord label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChordLabel {
    NoChord,
    Chord { root: PitchClass, mode: Mode },
}

impl ChordLabel {
    pub fn major(root: i32) -> Self {
        ChordLabel::Chord { root: PitchClass::new(root), mode: Mode::Major }
    }

    pub fn minor(root: i32) -> Self {
        ChordLabel::Chord { root: PitchClass::new(root), mode: Mode::Minor }
    }

    pub fn is_no_chord(self) -> bool {
        matches!(self, ChordLabel::NoChord)
    }

    pub fn root(self) -> Option<PitchClass> {
        match self {
            ChordLabel::NoChord => None,
            ChordLabel::Chord { root, .. } => Some(root),
        }
    }

    /// Shifts the root by `semitones` (mod 12); `N` is unchanged.
    pub fn transpose(self, semitones: i32) -> Self {
        match self {
            ChordLabel::NoChord => ChordLabel::NoChord,
            ChordLabel::Chord { root, mode } => {
                ChordLabel::Chord { root: root.transpose(semitones), mode }
            }
        }
    }

    /// Position in the 25-label vocabulary: `N`, C..B major, C..B minor.
    pub fn vocabulary_index(self) -> usize {
        match self {
            ChordLabel::NoChord => 0,
            ChordLabel::Chord { root, mode: Mode::Major } => 1 + root.index(),
            ChordLabel::Chord { root, mode: Mode::Minor } => 13 + root.index(),
        }
    }

    pub fn from_vocabulary_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ChordLabel::NoChord),
            1..=12 => Some(ChordLabel::major(index as i32 - 1)),
            13..=24 => Some(ChordLabel::minor(index as i32 - 13)),
            _ => None,
        }
    }

    /// Binary 12-bin template; all zeros for `N`.
    pub fn template(self) -> [f64; 12] {
        let mut chroma = [0.0; 12];
        if let ChordLabel::Chord { root, mode } = self {
            let third = match mode {
                Mode::Major => 4,
                Mode::Minor => 3,
            };
            for interval in [0, third, 7] {
                chroma[root.transpose(interval).index()] = 1.0;
            }
        }
        chroma
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_harte(*self))
    }
}

impl FromStr for ChordLabel {
    type Err = ChordError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_harte(s)
    }
}

impl Serialize for ChordLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_harte(*self))
    }
}

impl<'de> Deserialize<'de> for ChordLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_harte(&s).map_err(serde::de::Error::custom)
    }
}

/// Emits `N`, `<root>:maj` or `<root>:min`, roots spelled with sharps.
pub fn format_harte(label: ChordLabel) -> String {
    match label {
        ChordLabel::NoChord => "N".to_string(),
        ChordLabel::Chord { root, mode: Mode::Major } => format!("{}:maj", root.name()),
        ChordLabel::Chord { root, mode: Mode::Minor } => format!("{}:min", root.name()),
    }
}

/// Reduces an interval set (semitones above the root) to a mode.
pub fn mode_from_intervals(intervals: &[i32]) -> Mode {
    let has = |st: i32| intervals.iter().any(|&i| i.rem_euclid(12) == st);
    if has(3) && !has(4) {
        Mode::Minor
    } else {
        Mode::Major
    }
}

/// Splits a root note name (letter plus any number of `#`/`b`) off the
/// front of `s`.
fn parse_root(s: &str) -> Option<(PitchClass, &str)> {
    let mut chars = s.char_indices();
    let (_, letter) = chars.next()?;
    let base = match letter.to_ascii_uppercase() {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let mut offset = 0;
    let mut end = letter.len_utf8();
    for (i, c) in chars {
        match c {
            '#' => offset += 1,
            'b' => offset -= 1,
            _ => {
                end = i;
                break;
            }
        }
        end = i + c.len_utf8();
    }
    Some((PitchClass::new(base + offset), &s[end..]))
}

/// Harte shorthand → semitone intervals above the root.
fn shorthand_intervals(shorthand: &str) -> Option<&'static [i32]> {
    Some(match shorthand {
        "maj" => &[0, 4, 7],
        "min" => &[0, 3, 7],
        "dim" => &[0, 3, 6],
        "aug" => &[0, 4, 8],
        "maj7" => &[0, 4, 7, 11],
        "min7" => &[0, 3, 7, 10],
        "7" => &[0, 4, 7, 10],
        "dim7" => &[0, 3, 6, 9],
        "hdim7" => &[0, 3, 6, 10],
        "minmaj7" => &[0, 3, 7, 11],
        "maj6" => &[0, 4, 7, 9],
        "min6" => &[0, 3, 7, 9],
        "9" => &[0, 4, 7, 10, 2],
        "maj9" => &[0, 4, 7, 11, 2],
        "min9" => &[0, 3, 7, 10, 2],
        "11" => &[0, 4, 7, 10, 2, 5],
        "min11" => &[0, 3, 7, 10, 2, 5],
        "13" => &[0, 4, 7, 10, 2, 9],
        "maj13" => &[0, 4, 7, 11, 2, 9],
        "min13" => &[0, 3, 7, 10, 2, 9],
        "sus2" => &[0, 2, 7],
        "sus4" => &[0, 5, 7],
        "5" => &[0, 7],
        "1" => &[0],
        _ => return None,
    })
}

/// A scale degree such as `3`, `b3`, `#11` → semitones above the root.
fn parse_degree(s: &str) -> Option<i32> {
    let digits_at = s.find(|c: char| c.is_ascii_digit())?;
    let (accidentals, number) = s.split_at(digits_at);
    let mut offset = 0;
    for c in accidentals.chars() {
        match c {
            '#' => offset += 1,
            'b' => offset -= 1,
            _ => return None,
        }
    }
    let degree: u32 = number.parse().ok()?;
    let base = match degree {
        1 | 8 | 15 => 0,
        2 | 9 => 2,
        3 | 10 => 4,
        4 | 11 => 5,
        5 | 12 => 7,
        6 | 13 => 9,
        7 | 14 => 11,
        _ => return None,
    };
    Some(base + offset)
}

/// Parses a Harte chord label and reduces it to the 25-label vocabulary.
///
/// Accepts `N`, `<root>`, `<root>:<shorthand>`, `<root>:<shorthand>(<degrees>)`,
/// `<root>:(<degrees>)`, each with an optional `/<bass>`. Degrees prefixed
/// with `*` are removed from the shorthand's interval set. The bass is
/// validated and discarded.
pub fn parse_harte(s: &str) -> Result<ChordLabel, ChordError> {
    let err = || ChordError::UnparsableChord(s.to_string());
    let trimmed = s.trim();
    if trimmed.is_empty() || !trimmed.is_ascii() {
        return Err(err());
    }
    if trimmed == "N" {
        return Ok(ChordLabel::NoChord);
    }

    let (root, rest) = parse_root(trimmed).ok_or_else(err)?;
    if !trimmed.starts_with(|c: char| c.is_ascii_uppercase()) {
        return Err(err());
    }

    let (quality, bass) = match rest.split_once('/') {
        Some((q, b)) => (q, Some(b)),
        None => (rest, None),
    };
    if let Some(bass) = bass {
        if parse_degree(bass).is_none() && PitchClass::from_name(bass).is_none() {
            return Err(err());
        }
    }

    let mut intervals: Vec<i32> = match quality {
        "" => vec![0, 4, 7],
        q => {
            let q = q.strip_prefix(':').ok_or_else(err)?;
            let (shorthand, components) = match q.find('(') {
                Some(open) => {
                    let inner = q[open..]
                        .strip_prefix('(')
                        .and_then(|c| c.strip_suffix(')'))
                        .ok_or_else(err)?;
                    (&q[..open], Some(inner))
                }
                None => (q, None),
            };
            let mut set: Vec<i32> = if shorthand.is_empty() {
                if components.is_none() {
                    return Err(err());
                }
                vec![0]
            } else {
                shorthand_intervals(shorthand).ok_or_else(err)?.to_vec()
            };
            if let Some(components) = components {
                for component in components.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                    if let Some(removed) = component.strip_prefix('*') {
                        let st = parse_degree(removed).ok_or_else(err)?;
                        set.retain(|&i| (i - st).rem_euclid(12) != 0);
                    } else {
                        set.push(parse_degree(component).ok_or_else(err)?);
                    }
                }
            }
            set
        }
    };
    intervals.sort_unstable();
    Ok(ChordLabel::Chord { root, mode: mode_from_intervals(&intervals) })
}

/// Parses a chord symbol as found in tabs and chord sheets (`D7/F#`, `Am`,
/// `Bbmaj7`, `C#m7b5`, `Asus4`, `E5`, `Cadd9`, `F+`) and reduces it to the
/// vocabulary. The symbol is split into root, chord type and optional bass.
pub fn parse_chord_symbol(token: &str) -> Result<ChordLabel, ChordError> {
    let err = || ChordError::UnparsableChord(token.to_string());
    let token = token.trim();
    if token.is_empty() {
        return Err(err());
    }
    if token == "N" || token == "N.C." || token.eq_ignore_ascii_case("nc") {
        return Ok(ChordLabel::NoChord);
    }
    let normalized = token.replacen("flat", "b", 1).replacen("sharp", "#", 1);
    let (root, rest) = parse_root(&normalized).ok_or_else(err)?;
    let (kind, bass) = match rest.split_once('/') {
        Some((k, b)) => (k, Some(b)),
        None => (rest, None),
    };
    if let Some(bass) = bass {
        if PitchClass::from_name(bass).is_none() && parse_degree(bass).is_none() {
            return Err(err());
        }
    }
    if !kind.chars().all(|c| c.is_ascii_alphanumeric() || "#+-()Δ°ø".contains(c)) {
        return Err(err());
    }
    let kind_body = kind.trim_start_matches('(');
    let mode = if kind_body.starts_with("maj") || kind_body.starts_with('M') || kind_body.starts_with('Δ') {
        Mode::Major
    } else if kind_body.starts_with("min")
        || kind_body.starts_with('m')
        || kind_body.starts_with('-')
        || kind_body.starts_with("dim")
        || kind_body.starts_with('°')
        || kind_body.starts_with('ø')
        || kind_body.starts_with('o')
    {
        Mode::Minor
    } else {
        Mode::Major
    };
    let known = [
        "maj", "min", "m", "M", "dim", "aug", "sus", "add", "b", "#", "+", "-", "(", ")", "Δ", "°", "ø",
        "o", "no", "alt",
    ];
    let mut remaining = kind;
    while !remaining.is_empty() {
        if let Some(after) = remaining.strip_prefix(|c: char| c.is_ascii_digit()) {
            remaining = after;
            continue;
        }
        match known.iter().find(|k| remaining.starts_with(*k)) {
            Some(k) => remaining = &remaining[k.len()..],
            None => return Err(err()),
        }
    }
    Ok(ChordLabel::Chord { root, mode })
}

/// A binary chord template: 1 at the chord's pitch classes, 0 elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordTemplate {
    pub chroma: [f64; 12],
    pub label: ChordLabel,
}

impl ChordTemplate {
    pub fn new(label: ChordLabel) -> Self {
        ChordTemplate { chroma: label.template(), label }
    }
}

/// The 25-label major/minor vocabulary, ordered `N`, C..B major, C..B minor.
#[derive(Debug, Clone)]
pub struct ChordVocabulary {
    labels: Vec<ChordLabel>,
    templates: Vec<ChordTemplate>,
}

pub const VOCABULARY_SIZE: usize = 25;

impl ChordVocabulary {
    pub fn major_minor() -> Self {
        let labels: Vec<ChordLabel> =
            (0..VOCABULARY_SIZE).filter_map(ChordLabel::from_vocabulary_index).collect();
        let templates = labels[1..].iter().map(|&l| ChordTemplate::new(l)).collect();
        ChordVocabulary { labels, templates }
    }

    pub fn labels(&self) -> &[ChordLabel] {
        &self.labels
    }

    /// The 24 chord templates (no template for `N`).
    pub fn templates(&self) -> &[ChordTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: ChordLabel) -> usize {
        label.vocabulary_index()
    }
}

impl Default for ChordVocabulary {
    fn default() -> Self {
        Self::major_minor()
    }
}

fn cosine_similarity(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Nearest vocabulary chord (minimum cosine distance) to the binary chroma
/// of a set of pitch classes. Ties go to the earlier vocabulary entry.
pub fn chord_from_pitch_classes<I>(notes: I) -> ChordLabel
where
    I: IntoIterator<Item = PitchClass>,
{
    let mut chroma = [0.0; 12];
    for pc in notes {
        chroma[pc.index()] = 1.0;
    }
    if chroma.iter().all(|&x| x == 0.0) {
        return ChordLabel::NoChord;
    }
    let vocabulary = ChordVocabulary::major_minor();
    let mut best = (ChordLabel::NoChord, f64::INFINITY);
    for template in vocabulary.templates() {
        let distance = 1.0 - cosine_similarity(&chroma, &template.chroma);
        if distance < best.1 - 1e-12 {
            best = (template.label, distance);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pcs(names: &[&str]) -> Vec<PitchClass> {
        names.iter().map(|n| PitchClass::from_name(n).unwrap()).collect()
    }

    #[test]
    fn parses_annotation_labels() {
        assert_eq!(parse_harte("E:7/3").unwrap(), ChordLabel::major(4));
        assert_eq!(parse_harte("N").unwrap(), ChordLabel::NoChord);
        assert_eq!(parse_harte("A:min/b3").unwrap(), ChordLabel::minor(9));
        assert_eq!(parse_harte("E").unwrap(), ChordLabel::major(4));
        assert_eq!(parse_harte("Bb:min7").unwrap(), ChordLabel::minor(10));
        assert_eq!(parse_harte("C#:hdim7").unwrap(), ChordLabel::minor(1));
        assert_eq!(parse_harte("D:sus4").unwrap(), ChordLabel::major(2));
        assert_eq!(parse_harte("G:aug").unwrap(), ChordLabel::major(7));
        assert_eq!(parse_harte("C:(1,b3,5)").unwrap(), ChordLabel::minor(0));
        assert_eq!(parse_harte("C:min(*b3,3)").unwrap(), ChordLabel::major(0));
        assert_eq!(parse_harte("F:maj/5").unwrap(), ChordLabel::major(5));
    }

    #[test]
    fn rejects_malformed_labels() {
        for bad in ["", "H", "C:", "C:foo", "C:maj(3", "C/x", "c:maj", "X:min"] {
            assert!(parse_harte(bad).is_err(), "{bad} should not parse");
        }
    }

    #[test]
    fn formats_with_sharps() {
        assert_eq!(format_harte(ChordLabel::NoChord), "N");
        assert_eq!(format_harte(ChordLabel::minor(0)), "C:min");
        assert_eq!(format_harte(ChordLabel::major(6)), "F#:maj");
        assert_eq!(format_harte(parse_harte("Gb:maj").unwrap()), "F#:maj");
    }

    #[test]
    fn transposition_examples() {
        assert_eq!(ChordLabel::major(0).transpose(0), ChordLabel::major(0));
        assert_eq!(ChordLabel::minor(11).transpose(1), ChordLabel::minor(0));
        assert_eq!(ChordLabel::NoChord.transpose(5), ChordLabel::NoChord);
    }

    #[test]
    fn nearest_chord_from_notes() {
        assert_eq!(chord_from_pitch_classes(pcs(&["E", "G#", "B", "D"])), ChordLabel::major(4));
        assert_eq!(chord_from_pitch_classes(Vec::new()), ChordLabel::NoChord);
        assert_eq!(chord_from_pitch_classes(pcs(&["D", "F", "A"])), ChordLabel::minor(2));
    }

    #[test]
    fn vocabulary_layout() {
        let vocab = ChordVocabulary::major_minor();
        assert_eq!(vocab.len(), 25);
        assert_eq!(vocab.templates().len(), 24);
        assert_eq!(vocab.labels()[0], ChordLabel::NoChord);
        assert_eq!(vocab.labels()[1], ChordLabel::major(0));
        assert_eq!(vocab.labels()[13], ChordLabel::minor(0));
        let mut seen = vocab.labels().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 25);
        for (i, &l) in vocab.labels().iter().enumerate() {
            assert_eq!(vocab.index_of(l), i);
        }
        assert_eq!(ChordLabel::minor(2).template(), [0., 0., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn tab_symbols() {
        assert_eq!(parse_chord_symbol("D7/F#").unwrap(), ChordLabel::major(2));
        assert_eq!(parse_chord_symbol("Am/C").unwrap(), ChordLabel::minor(9));
        assert_eq!(parse_chord_symbol("Bbm7").unwrap(), ChordLabel::minor(10));
        assert_eq!(parse_chord_symbol("C#m7b5").unwrap(), ChordLabel::minor(1));
        assert_eq!(parse_chord_symbol("Gmaj7").unwrap(), ChordLabel::major(7));
        assert_eq!(parse_chord_symbol("Asus4").unwrap(), ChordLabel::major(9));
        assert_eq!(parse_chord_symbol("Cadd9").unwrap(), ChordLabel::major(0));
        assert_eq!(parse_chord_symbol("Bdim").unwrap(), ChordLabel::minor(11));
        assert_eq!(parse_chord_symbol("F+").unwrap(), ChordLabel::major(5));
        assert_eq!(parse_chord_symbol("Emin").unwrap(), ChordLabel::minor(4));
        assert_eq!(parse_chord_symbol("e").unwrap(), ChordLabel::major(4));
        assert!(parse_chord_symbol("Dog").is_err());
        assert!(parse_chord_symbol("C/Q").is_err());
    }

    fn any_label() -> impl Strategy<Value = ChordLabel> {
        (0usize..25).prop_map(|i| ChordLabel::from_vocabulary_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn harte_round_trip(label in any_label()) {
            prop_assert_eq!(parse_harte(&format_harte(label)).unwrap(), label);
        }

        #[test]
        fn transposition_is_a_group_action(label in any_label(), a in -30i32..30, b in -30i32..30) {
            prop_assert_eq!(label.transpose(a).transpose(b), label.transpose(a + b));
            prop_assert_eq!(label.transpose(12), label);
        }

        #[test]
        fn template_rotates_with_transposition(label in any_label(), k in 0i32..12) {
            let original = label.template();
            let shifted = label.transpose(k).template();
            for i in 0..12 {
                prop_assert_eq!(shifted[(i + k as usize) % 12], original[i]);
            }
        }
    }

    #[test]
    fn exact_triads_are_recovered() {
        for index in 1..25 {
            let label = ChordLabel::from_vocabulary_index(index).unwrap();
            let notes: Vec<PitchClass> = label
                .template()
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| PitchClass::new(i as i32))
                .collect();
            assert_eq!(chord_from_pitch_classes(notes), label);
        }
    }
}
