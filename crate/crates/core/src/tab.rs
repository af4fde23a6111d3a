//! Guitar tab and chord sheet parsing into untimed chord sequences.
//!
//! Lines are classified by heuristics, grouped into segments at empty
//! lines, matched against six system patterns, and chords are read from
//! each system once: from the chord line when there is one, otherwise from
//! the bracketed chords or the tablature columns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chord::{chord_from_pitch_classes, parse_chord_symbol, ChordLabel, PitchClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineType {
    Empty,
    Chords,
    TuningDefinition,
    CapoChange,
    StructuralMarker,
    ChordDefinition,
    Tablature,
    Lyrics,
    ChordsAndLyrics,
    Undefined,
}

const ALLOWED_WORDS: [&str; 7] = ["min", "add", "aug", "dim", "maj", "sus", "flat"];
const STRUCTURE_WORDS: [&str; 9] =
    ["verse", "chorus", "bridge", "intro", "outro", "solo", "interlude", "refrain", "coda"];
const TAB_CHARS: &str = "0123456789-|/hbp ";

fn has_digit_run(s: &str, len: usize, exact: bool) -> bool {
    s.split(|c: char| !c.is_ascii_digit())
        .any(|run| if exact { run.len() == len } else { run.len() >= len })
}

/// Splits an alphabetic run into chord-type words, e.g. `minmaj`.
fn segments_into_words(run: &str) -> bool {
    if run.is_empty() {
        return true;
    }
    ALLOWED_WORDS
        .iter()
        .any(|w| run.starts_with(w) && segments_into_words(&run[w.len()..]))
}

/// True if `token` looks like a chord symbol.
pub fn is_chord_element(token: &str) -> bool {
    if token.is_empty() || token.len() > 10 || !token.is_ascii() {
        return false;
    }
    let first = token.as_bytes()[0].to_ascii_lowercase();
    if !(b'a'..=b'g').contains(&first) {
        return false;
    }
    if has_digit_run(token, 4, false) {
        return false;
    }
    let allowed = |c: char| {
        matches!(c, 'A'..='G' | 'a'..='g' | '0'..='9' | '#' | '/' | ':' | '(' | ')' | '+')
            || "dimaugsusjnflat".contains(c)
    };
    if !token.chars().all(allowed) {
        return false;
    }
    // Alphabetic runs after the root (and any accidental) of three or
    // more letters must be made of chord-type words.
    let body = token[1..].trim_start_matches(['#', 'b']);
    body.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|run| run.len() >= 3)
        .all(|run| {
            // a slash-bass like `/Bb` reaches here as its own run only if long
            segments_into_words(&run.to_ascii_lowercase())
        })
}

fn tokens_with_offsets<'a>(line: &'a str, separators: &[char]) -> Vec<(usize, &'a str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if separators.contains(&c) || c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

fn is_chord_line(line: &str) -> bool {
    let tokens = tokens_with_offsets(line, &['|']);
    !tokens.is_empty() && tokens.iter().all(|(_, t)| is_chord_element(t))
}

fn is_tablature(line: &str) -> bool {
    let counted = line.chars().filter(|c| TAB_CHARS.contains(*c)).count();
    let hyphens = line.chars().filter(|&c| c == '-').count();
    let spaces = line.chars().filter(|&c| c == ' ').count();
    counted >= 10 && hyphens > spaces
}

fn is_lyrics(line: &str) -> bool {
    if line.contains(['[', ']', '=', '@']) {
        return false;
    }
    if line.chars().filter(|&c| c == '-').count() > 10 {
        return false;
    }
    let words: Vec<&str> = line.split_whitespace().collect();
    match words.as_slice() {
        [] => false,
        [word] => {
            let letters = word.chars().all(|c| c.is_alphabetic());
            let chars: Vec<char> = word.chars().collect();
            letters && chars.windows(3).any(|w| w[0] == w[1] && w[1] == w[2])
        }
        _ => true,
    }
}

fn contains_word(lower: &str, word: &str) -> bool {
    lower
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w == word || (w.starts_with(word) && w[word.len()..].chars().all(|c| c.is_ascii_digit())))
}

fn is_structural_marker(line: &str) -> bool {
    let lower = line.to_lowercase();
    let short = line.trim_start().starts_with('[') || line.split_whitespace().count() <= 4;
    short && STRUCTURE_WORDS.iter().any(|w| contains_word(&lower, w))
}

/// Bracketed chord tokens with byte offsets of their `[`.
fn bracketed(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut rest = 0;
    while let Some(open) = line[rest..].find('[') {
        let open = rest + open;
        let Some(close) = line[open..].find(']') else { break };
        let close = open + close;
        out.push((open, &line[open + 1..close]));
        rest = close + 1;
    }
    out
}

fn strip_brackets(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut depth = 0;
    for c in line.chars() {
        match c {
            '[' => depth += 1,
            ']' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

fn is_chords_and_lyrics(line: &str) -> bool {
    let chords = bracketed(line);
    !chords.is_empty()
        && chords.iter().all(|(_, c)| is_chord_element(c.trim()))
        && is_lyrics(&strip_brackets(line))
}

/// Assigns one line type, testing rules in a fixed order.
pub fn classify_line(line: &str) -> LineType {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return LineType::Empty;
    }
    let lower = trimmed.to_lowercase();
    if has_digit_run(trimmed, 6, true) {
        LineType::ChordDefinition
    } else if is_tablature(line) {
        LineType::Tablature
    } else if is_chord_line(trimmed) {
        LineType::Chords
    } else if lower.contains("tuning") {
        LineType::TuningDefinition
    } else if lower.contains("capo") {
        LineType::CapoChange
    } else if is_structural_marker(trimmed) {
        LineType::StructuralMarker
    } else if is_chords_and_lyrics(trimmed) {
        LineType::ChordsAndLyrics
    } else if is_lyrics(trimmed) {
        LineType::Lyrics
    } else {
        LineType::Undefined
    }
}

/// A classified line with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct TabLine {
    pub line_no: usize,
    pub text: String,
    pub kind: LineType,
}

/// Maximal runs of non-empty lines.
pub fn segment_tab(lines: &[TabLine]) -> Vec<Vec<TabLine>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for line in lines {
        if line.kind == LineType::Empty {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.clone());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    ChordsAndLyrics,
    Chords,
    ChordsTab,
    ChordsTabLyrics,
    Tab,
    TabLyrics,
}

impl SystemKind {
    /// Whether chords come from the tablature columns.
    pub fn reads_tablature(self) -> bool {
        matches!(self, SystemKind::Tab | SystemKind::TabLyrics)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabSystem {
    pub kind: SystemKind,
    pub lines: Vec<TabLine>,
}

fn run_length(seg: &[TabLine], from: usize, kind: LineType, max: usize) -> usize {
    seg[from..].iter().take(max).take_while(|l| l.kind == kind).count()
}

/// Greedy longest match of the six system patterns, top to bottom.
pub fn detect_systems(segment: &[TabLine]) -> Vec<TabSystem> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < segment.len() {
        let kind = segment[i].kind;
        let matched = match kind {
            LineType::ChordsAndLyrics => Some((SystemKind::ChordsAndLyrics, 1)),
            LineType::Chords => {
                let tabs = run_length(segment, i + 1, LineType::Tablature, 7);
                if tabs == 6 {
                    let lyrics = run_length(segment, i + 7, LineType::Lyrics, 3);
                    if lyrics > 0 {
                        Some((SystemKind::ChordsTabLyrics, 7 + lyrics))
                    } else {
                        Some((SystemKind::ChordsTab, 7))
                    }
                } else {
                    Some((SystemKind::Chords, 1))
                }
            }
            LineType::Tablature => {
                let tabs = run_length(segment, i, LineType::Tablature, 7);
                if tabs == 6 {
                    let lyrics = run_length(segment, i + 6, LineType::Lyrics, 3);
                    if lyrics > 0 {
                        Some((SystemKind::TabLyrics, 6 + lyrics))
                    } else {
                        Some((SystemKind::Tab, 6))
                    }
                } else {
                    None
                }
            }
            _ => None,
        };
        match matched {
            Some((kind, len)) => {
                out.push(TabSystem { kind, lines: segment[i..i + len].to_vec() });
                i += len;
            }
            None => {
                // skip a tablature run that is not exactly six lines as a whole
                i += if kind == LineType::Tablature {
                    run_length(segment, i, LineType::Tablature, usize::MAX).max(1)
                } else {
                    1
                };
            }
        }
    }
    out
}

/// One chord of an untimed chord sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcsEntry {
    pub label: ChordLabel,
    #[serde(rename = "line")]
    pub line_no: usize,
    #[serde(rename = "char")]
    pub char_index: usize,
    pub line_start: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UntimedChordSequence {
    pub entries: Vec<UcsEntry>,
}

impl UntimedChordSequence {
    pub fn from_labels_by_line(lines: &[Vec<ChordLabel>]) -> Self {
        let mut entries = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            for (j, &label) in line.iter().enumerate() {
                entries.push(UcsEntry { label, line_no: i + 1, char_index: j * 4, line_start: j == 0 });
            }
        }
        UntimedChordSequence { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<ChordLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn transpose(&self, k: i32) -> Self {
        UntimedChordSequence {
            entries: self.entries.iter().map(|e| UcsEntry { label: e.label.transpose(k), ..*e }).collect(),
        }
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable entry") + "\n")
            .collect()
    }
}

/// Standard tuning, high string first: E4 B3 G3 D3 A2 E2.
pub const STANDARD_TUNING: [u8; 6] = [64, 59, 55, 50, 45, 40];
const MAX_FRET: u32 = 24;

/// Fret of the digit run covering column `col`, or `None` for a muted string.
fn fret_at(line: &[u8], col: usize) -> Option<Option<u32>> {
    let c = *line.get(col)?;
    if c == b'x' || c == b'X' {
        return Some(None);
    }
    if !c.is_ascii_digit() {
        return None;
    }
    let mut lo = col;
    while lo > 0 && line[lo - 1].is_ascii_digit() {
        lo -= 1;
    }
    let mut hi = col + 1;
    while hi < line.len() && line[hi].is_ascii_digit() {
        hi += 1;
    }
    let fret: u32 = std::str::from_utf8(&line[lo..hi]).ok()?.parse().ok()?;
    Some((fret <= MAX_FRET).then_some(fret))
}

/// Chords read column by column from six tablature lines.
pub fn tablature_chords(lines: &[&str; 6]) -> Vec<(usize, ChordLabel)> {
    let bytes: Vec<&[u8]> = lines.iter().map(|l| l.as_bytes()).collect();
    let width = bytes.iter().map(|b| b.len()).min().unwrap_or(0);
    let mut out: Vec<(usize, ChordLabel)> = Vec::new();
    let mut previous: Option<Vec<Option<u32>>> = None;
    let mut previous_col = usize::MAX;
    for col in 0..width {
        let frets: Option<Vec<Option<u32>>> = bytes.iter().map(|b| fret_at(b, col)).collect();
        let Some(frets) = frets else {
            previous = None;
            continue;
        };
        // a multi-digit fret spans several columns; keep one entry per run
        if previous.as_ref() == Some(&frets) && previous_col + 1 == col {
            previous_col = col;
            continue;
        }
        let pitches = frets
            .iter()
            .zip(STANDARD_TUNING)
            .filter_map(|(f, open)| f.map(|f| PitchClass::from_midi(open + f as u8)));
        let label = chord_from_pitch_classes(pitches);
        if !label.is_no_chord() {
            out.push((col, label));
        }
        previous = Some(frets);
        previous_col = col;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabParse {
    pub ucs: UntimedChordSequence,
    pub lines: Vec<TabLine>,
    pub systems: Vec<TabSystem>,
    /// Tokens on chord lines that could not be parsed.
    pub skipped_tokens: usize,
}

/// Chords of one system with (line number, character index).
pub fn extract_chords(system: &TabSystem) -> (Vec<(usize, usize, ChordLabel)>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    match system.kind {
        SystemKind::ChordsAndLyrics => {
            let line = &system.lines[0];
            for (offset, token) in bracketed(&line.text) {
                match parse_chord_symbol(token.trim()) {
                    Ok(label) => out.push((line.line_no, offset, label)),
                    Err(_) => skipped += 1,
                }
            }
        }
        SystemKind::Chords | SystemKind::ChordsTab | SystemKind::ChordsTabLyrics => {
            let line = &system.lines[0];
            for (offset, token) in tokens_with_offsets(&line.text, &['|']) {
                match parse_chord_symbol(token) {
                    Ok(label) => out.push((line.line_no, offset, label)),
                    Err(_) => skipped += 1,
                }
            }
        }
        SystemKind::Tab | SystemKind::TabLyrics => {
            let texts: Vec<&str> = system.lines[..6].iter().map(|l| l.text.as_str()).collect();
            let six: [&str; 6] = texts.try_into().expect("six tablature lines");
            let line_no = system.lines[0].line_no;
            out.extend(tablature_chords(&six).into_iter().map(|(col, label)| (line_no, col, label)));
        }
    }
    (out, skipped)
}

pub fn parse_tab_text(text: &str) -> TabParse {
    let lines: Vec<TabLine> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.trim_end_matches('\r');
            TabLine { line_no: i + 1, text: l.to_string(), kind: classify_line(l) }
        })
        .collect();
    let mut systems = Vec::new();
    for segment in segment_tab(&lines) {
        systems.extend(detect_systems(&segment));
    }
    let mut found = Vec::new();
    let mut skipped_tokens = 0;
    for system in &systems {
        let (chords, skipped) = extract_chords(system);
        found.extend(chords);
        skipped_tokens += skipped;
    }
    found.sort_by_key(|&(line, col, _)| (line, col));
    let mut entries = Vec::with_capacity(found.len());
    let mut last_line = None;
    for (line_no, char_index, label) in found {
        entries.push(UcsEntry { label, line_no, char_index, line_start: last_line != Some(line_no) });
        last_line = Some(line_no);
    }
    TabParse { ucs: UntimedChordSequence { entries }, lines, systems, skipped_tokens }
}

pub fn parse_tab(path: impl AsRef<Path>) -> std::io::Result<TabParse> {
    let bytes = std::fs::read(path)?;
    Ok(parse_tab_text(&String::from_utf8_lossy(&bytes)))
}
