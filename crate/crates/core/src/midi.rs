//! Standard MIDI File parsing, beat grids, time remapping and
//! synthesis-free alignment features.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::annotations::BeatGrid;
use crate::audio::{l1_normalize_rows, log_compress, spread_like_cqt, ChromaSequence, CqtLayout};
use crate::dtw::TimeMap;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed chunk: {0}")]
    MalformedChunk(String),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("alignment path is empty")]
    EmptyPath,
}

pub const DRUM_CHANNEL: u8 = 9;
pub const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub start: f64,
    pub end: f64,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

impl NoteEvent {
    pub fn is_drum(&self) -> bool {
        self.channel == DRUM_CHANNEL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiSong {
    pub notes: Vec<NoteEvent>,
    /// `(tick, microseconds per quarter)`, sorted, first entry at tick 0.
    pub tempo_map: Vec<(u64, u32)>,
    /// `(tick, numerator, denominator)`, sorted.
    pub time_signatures: Vec<(u64, u8, u8)>,
    pub ticks_per_quarter: u16,
    pub end_tick: u64,
    /// Map from file seconds to target seconds, set by [`remap_times`].
    pub warp: Option<TimeMap>,
}

impl MidiSong {
    /// File seconds of `tick`, integrating the tempo map.
    pub fn tick_to_seconds(&self, tick: u64) -> f64 {
        let tpq = self.ticks_per_quarter as f64;
        let mut seconds = 0.0;
        let mut prev_tick = 0u64;
        let mut tempo = DEFAULT_TEMPO;
        for &(t, us) in &self.tempo_map {
            if t >= tick {
                break;
            }
            seconds += (t - prev_tick) as f64 * tempo as f64 / 1e6 / tpq;
            prev_tick = t;
            tempo = us;
        }
        seconds + (tick - prev_tick) as f64 * tempo as f64 / 1e6 / tpq
    }

    /// Target seconds of `tick`: file seconds passed through the warp.
    pub fn time(&self, tick: u64) -> f64 {
        let s = self.tick_to_seconds(tick);
        match &self.warp {
            Some(w) => w.map(s),
            None => s,
        }
    }

    pub fn end_time(&self) -> f64 {
        let notes_end = self.notes.iter().map(|n| n.end).fold(0.0, f64::max);
        notes_end.max(self.time(self.end_tick))
    }

    pub fn pitched_notes(&self) -> impl Iterator<Item = &NoteEvent> {
        self.notes.iter().filter(|n| !n.is_drum())
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, what: &str) -> MidiError {
        MidiError::MalformedChunk(format!("{what} at byte {}", self.pos))
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.data.get(self.pos).ok_or_else(|| self.err("unexpected end"))?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(self.err("unexpected end"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err("variable-length quantity too long"))
    }
}

struct RawNote {
    start: u64,
    end: u64,
    pitch: u8,
    velocity: u8,
    channel: u8,
}

struct TrackData {
    notes: Vec<RawNote>,
    tempos: Vec<(u64, u32)>,
    signatures: Vec<(u64, u8, u8)>,
    end: u64,
}

fn parse_track(data: &[u8]) -> Result<TrackData, MidiError> {
    let mut r = Reader { data, pos: 0 };
    let mut tick = 0u64;
    let mut status = 0u8;
    let mut open: BTreeMap<(u8, u8), VecDeque<(u64, u8)>> = BTreeMap::new();
    let mut track = TrackData { notes: Vec::new(), tempos: Vec::new(), signatures: Vec::new(), end: 0 };
    while r.pos < data.len() {
        tick += r.vlq()? as u64;
        let mut first = r.u8()?;
        if first & 0x80 != 0 {
            if first < 0xf0 {
                status = first;
            }
        } else {
            if status == 0 {
                return Err(r.err("data byte without running status"));
            }
            r.pos -= 1;
            first = status;
        }
        match first {
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let payload = r.bytes(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if us > 0 {
                            track.tempos.push((tick, us));
                        }
                    }
                    0x58 if len >= 2 => {
                        let denominator = 1u8.checked_shl(payload[1] as u32).unwrap_or(4);
                        if payload[0] > 0 {
                            track.signatures.push((tick, payload[0], denominator));
                        }
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.bytes(len)?;
            }
            0xf1..=0xfe => return Err(r.err("system message inside track")),
            _ => {
                let channel = first & 0x0f;
                match first & 0xf0 {
                    0x80 | 0x90 => {
                        let pitch = r.u8()? & 0x7f;
                        let velocity = r.u8()? & 0x7f;
                        let queue = open.entry((channel, pitch)).or_default();
                        if first & 0xf0 == 0x90 && velocity > 0 {
                            queue.push_back((tick, velocity));
                        } else if let Some((start, velocity)) = queue.pop_front() {
                            track.notes.push(RawNote { start, end: tick, pitch, velocity, channel });
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        r.bytes(2)?;
                    }
                    0xc0 | 0xd0 => {
                        r.u8()?;
                    }
                    _ => return Err(r.err("unknown status")),
                }
            }
        }
    }
    track.end = tick;
    for ((channel, pitch), queue) in open {
        for (start, velocity) in queue {
            track.notes.push(RawNote { start, end: tick, pitch, velocity, channel });
        }
    }
    Ok(track)
}

pub fn parse_midi_bytes(data: &[u8]) -> Result<MidiSong, MidiError> {
    let mut r = Reader { data, pos: 0 };
    if r.bytes(4).map_err(|_| MidiError::MalformedChunk("truncated header".into()))? != b"MThd" {
        return Err(MidiError::MalformedChunk("missing MThd".into()));
    }
    let header_err = |_| MidiError::MalformedChunk("truncated header".into());
    let len = r.u32().map_err(header_err)? as usize;
    if len < 6 {
        return Err(MidiError::MalformedChunk("short header".into()));
    }
    let header = r.bytes(len).map_err(header_err)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::MalformedChunk("zero ticks per quarter".into()));
    }

    let mut raw_notes = Vec::new();
    let mut tempos = Vec::new();
    let mut signatures = Vec::new();
    let mut end_tick = 0u64;
    let mut found = 0;
    while found < ntracks && r.pos < data.len() {
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        let body = r.bytes(len)?;
        if id != b"MTrk" {
            continue;
        }
        found += 1;
        let track = parse_track(body)?;
        raw_notes.extend(track.notes);
        tempos.extend(track.tempos);
        signatures.extend(track.signatures);
        end_tick = end_tick.max(track.end);
    }
    if found < ntracks {
        return Err(MidiError::MalformedChunk(format!("expected {ntracks} tracks, found {found}")));
    }

    tempos.sort_by_key(|t| t.0);
    if tempos.first().is_none_or(|t| t.0 != 0) {
        tempos.insert(0, (0, DEFAULT_TEMPO));
    }
    tempos.dedup_by(|later, earlier| {
        if later.0 == earlier.0 {
            earlier.1 = later.1;
            true
        } else {
            false
        }
    });
    signatures.sort_by_key(|s| s.0);
    signatures.dedup_by(|later, earlier| {
        if later.0 == earlier.0 {
            *earlier = *later;
            true
        } else {
            false
        }
    });

    let mut song = MidiSong {
        notes: Vec::new(),
        tempo_map: tempos,
        time_signatures: signatures,
        ticks_per_quarter: division,
        end_tick,
        warp: None,
    };
    let mut notes: Vec<NoteEvent> = raw_notes
        .iter()
        .filter(|n| n.end > n.start)
        .map(|n| NoteEvent {
            start: song.tick_to_seconds(n.start),
            end: song.tick_to_seconds(n.end),
            pitch: n.pitch,
            velocity: n.velocity.max(1),
            channel: n.channel,
        })
        .collect();
    notes.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.pitch.cmp(&b.pitch)));
    song.notes = notes;
    Ok(song)
}

pub fn parse_midi(path: impl AsRef<Path>) -> Result<MidiSong, MidiError> {
    parse_midi_bytes(&std::fs::read(path)?)
}

/// Beats at each time-signature beat unit, with downbeats at bar starts.
pub fn beats_and_downbeats(m: &MidiSong) -> BeatGrid {
    let tpq = m.ticks_per_quarter as u64;
    let mut signatures = m.time_signatures.clone();
    if signatures.first().is_none_or(|s| s.0 != 0) {
        signatures.insert(0, (0, 4, 4));
    }
    let mut ticks = Vec::new();
    let mut flags = Vec::new();
    for (i, &(start, numerator, denominator)) in signatures.iter().enumerate() {
        let stop = signatures.get(i + 1).map_or(m.end_tick, |s| s.0.min(m.end_tick));
        let unit = (tpq * 4 / denominator.max(1) as u64).max(1);
        let mut tick = start;
        let mut beat = 0u64;
        while tick < stop {
            ticks.push(tick);
            flags.push(beat.is_multiple_of(numerator as u64));
            tick += unit;
            beat += 1;
        }
    }
    let mut times = Vec::with_capacity(ticks.len());
    let mut kept = Vec::with_capacity(ticks.len());
    for (tick, flag) in ticks.into_iter().zip(flags) {
        let t = m.time(tick);
        if times.last().is_none_or(|&last| t > last) {
            times.push(t);
            kept.push(flag);
        } else if flag {
            // a warp collapsed this beat onto the previous one; keep the bar start
            if let Some(last) = kept.last_mut() {
                *last = true;
            }
        }
    }
    BeatGrid { times, downbeats: Some(kept) }
}

/// Maps every note through `map` (file seconds → target seconds) and
/// records the map so beat times follow. Notes that collapse are dropped.
pub fn remap_times(m: &MidiSong, map: &TimeMap) -> Result<MidiSong, MidiError> {
    if map.pairs.is_empty() {
        return Err(MidiError::EmptyPath);
    }
    let warp = match &m.warp {
        None => map.clone(),
        Some(existing) => TimeMap {
            pairs: existing.pairs.iter().map(|&(s, t)| (s, map.map(t))).collect(),
            confidence: map.confidence,
        },
    };
    let mut notes: Vec<NoteEvent> = m
        .notes
        .iter()
        .map(|n| NoteEvent { start: map.map(n.start), end: map.map(n.end), ..*n })
        .filter(|n| n.end > n.start)
        .collect();
    notes.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.pitch.cmp(&b.pitch)));
    Ok(MidiSong { notes, warp: Some(warp), ..m.clone() })
}

/// Harmonic partial weights used by [`midi_alignment_features`].
pub const PARTIAL_WEIGHTS: [f64; 4] = [1.0, 0.5, 0.33, 0.25];

pub struct MidiFeatures {
    /// Linear pitch-bin energy, frames × layout bins.
    pub pitch: Array2<f64>,
    /// Log-compressed pitch-bin energy.
    pub log_pitch: Array2<f64>,
    pub chroma: ChromaSequence,
}

/// Renders sounding notes straight into constant-Q bin space. Frames are
/// centred at multiples of `hop` seconds.
pub fn midi_alignment_features(m: &MidiSong, hop: f64, layout: &CqtLayout) -> MidiFeatures {
    let frames = (m.end_time() / hop).floor() as usize + 1;
    let mut pitch = Array2::zeros((frames, layout.n_bins));
    for note in m.pitched_notes() {
        let first = (note.start / hop).ceil() as usize;
        let f0 = 440.0 * 2f64.powf((note.pitch as f64 - 69.0) / 12.0);
        let gain = note.velocity as f64 / 127.0;
        let bins: Vec<(usize, f64)> = PARTIAL_WEIGHTS
            .iter()
            .enumerate()
            .filter_map(|(h, &w)| layout.bin_of(f0 * (h + 1) as f64).map(|b| (b, w * gain)))
            .collect();
        let mut f = first;
        while f < frames && (f as f64) * hop < note.end {
            for &(b, w) in &bins {
                pitch[[f, b]] += w;
            }
            f += 1;
        }
    }
    let mut chroma = Array2::zeros((frames, 12));
    for k in 0..layout.n_bins {
        let mut col = chroma.column_mut(layout.pitch_class(k));
        col += &pitch.column(k);
    }
    l1_normalize_rows(&mut chroma);
    MidiFeatures {
        log_pitch: log_compress(spread_like_cqt(&pitch, layout)),
        pitch,
        chroma: ChromaSequence { vectors: chroma, frame_period: hop },
    }
}
