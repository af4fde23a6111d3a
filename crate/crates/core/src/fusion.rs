//! Source selection and label integration over 10 ms samples.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{merge_samples, sample, ChordSequence, SampledSequence};
use crate::chord::{ChordLabel, VOCABULARY_SIZE};

pub const FUSION_SAMPLE_PERIOD: f64 = 0.01;
pub const DF_ITERATIONS: usize = 5;
/// Source accuracies are kept inside `[ACCURACY_CLAMP, 1 - ACCURACY_CLAMP]`.
pub const ACCURACY_CLAMP: f64 = 1e-6;
/// MIDI files aligned worse than this are never selected.
pub const MAX_ALIGNMENT_CONFIDENCE: f64 = 0.85;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("song has no audio chord estimate")]
    NoAudioSource,
    #[error("no sources to fuse")]
    NoSources,
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceOrigin {
    Audio,
    MidiBar,
    MidiBeat,
    Tab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub id: String,
    pub origin: SourceOrigin,
    pub sequence: ChordSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiCandidate {
    pub id: String,
    pub confidence: f64,
    pub ats_bar: f64,
    pub ats_beat: f64,
    pub bar: ChordSequence,
    pub beat: ChordSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabCandidate {
    pub id: String,
    pub log_likelihood: f64,
    pub sequence: ChordSequence,
}

/// Everything estimated for one song.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SongSources {
    pub audio: Vec<(String, ChordSequence)>,
    pub midis: Vec<MidiCandidate>,
    pub tabs: Vec<TabCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MidiLevels {
    #[default]
    Both,
    Bar,
    Beat,
}

macro_rules! keyword_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = FusionError;
            fn from_str(s: &str) -> Result<Self, FusionError> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(FusionError::Unknown { kind: $kind, value: s.to_string() }),
                }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text,)+ })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    All,
    #[default]
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rnd,
    Mv,
    #[default]
    Df,
}

keyword_enum!(Strategy, "strategy", { All => "all", Best => "best" });
keyword_enum!(Method, "method", { Rnd => "rnd", Mv => "mv", Df => "df" });
keyword_enum!(MidiLevels, "midi levels", { Both => "both", Bar => "bar", Beat => "beat" });

fn audio_sources(song: &SongSources) -> Result<Vec<Source>, FusionError> {
    if song.audio.is_empty() {
        return Err(FusionError::NoAudioSource);
    }
    Ok(song
        .audio
        .iter()
        .map(|(id, seq)| Source { id: id.clone(), origin: SourceOrigin::Audio, sequence: seq.clone() })
        .collect())
}

fn midi_sources(m: &MidiCandidate, levels: MidiLevels) -> Vec<Source> {
    let mut out = Vec::new();
    if levels != MidiLevels::Beat {
        out.push(Source { id: format!("{}#bar", m.id), origin: SourceOrigin::MidiBar, sequence: m.bar.clone() });
    }
    if levels != MidiLevels::Bar {
        out.push(Source { id: format!("{}#beat", m.id), origin: SourceOrigin::MidiBeat, sequence: m.beat.clone() });
    }
    out
}

fn tab_source(t: &TabCandidate) -> Source {
    Source { id: t.id.clone(), origin: SourceOrigin::Tab, sequence: t.sequence.clone() }
}

/// Every audio estimate, both levels of every MIDI file and every tab.
pub fn select_sources_all(song: &SongSources) -> Result<Vec<Source>, FusionError> {
    let mut out = audio_sources(song)?;
    for m in &song.midis {
        out.extend(midi_sources(m, MidiLevels::Both));
    }
    out.extend(song.tabs.iter().map(tab_source));
    Ok(out)
}

/// Index of the first maximum of `key` over `items`.
fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.iter().enumerate() {
        let k = key(item);
        if best.is_none_or(|(_, b)| k > b) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Audio estimates, the well-aligned MIDI file with the highest ATS and
/// the tab with the highest alignment log likelihood.
pub fn select_sources_best(song: &SongSources, levels: MidiLevels) -> Result<Vec<Source>, FusionError> {
    let mut out = audio_sources(song)?;
    let aligned: Vec<&MidiCandidate> =
        song.midis.iter().filter(|m| m.confidence <= MAX_ALIGNMENT_CONFIDENCE).collect();
    let ats = |m: &&MidiCandidate| match levels {
        MidiLevels::Both => 0.5 * (m.ats_bar + m.ats_beat),
        MidiLevels::Bar => m.ats_bar,
        MidiLevels::Beat => m.ats_beat,
    };
    if let Some(i) = argmax_by(&aligned, ats) {
        out.extend(midi_sources(aligned[i], levels));
    }
    if let Some(i) = argmax_by(&song.tabs, |t| t.log_likelihood) {
        out.push(tab_source(&song.tabs[i]));
    }
    Ok(out)
}

/// Sources sampled on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub ids: Vec<String>,
    pub origins: Vec<SourceOrigin>,
    pub samples: Vec<SampledSequence>,
}

impl SourceSet {
    /// Samples every source over the longest source's span; gaps read as `N`.
    pub fn new(sources: &[Source], period: f64) -> Result<Self, FusionError> {
        if sources.is_empty() {
            return Err(FusionError::NoSources);
        }
        let duration = sources.iter().map(|s| if s.sequence.is_empty() { 0.0 } else { s.sequence.end() }).fold(0.0, f64::max);
        Ok(SourceSet {
            ids: sources.iter().map(|s| s.id.clone()).collect(),
            origins: sources.iter().map(|s| s.origin).collect(),
            samples: sources.iter().map(|s| sample(&s.sequence, period, duration)).collect(),
        })
    }

    pub fn from_samples(samples: Vec<SampledSequence>) -> Self {
        SourceSet {
            ids: (0..samples.len()).map(|i| format!("s{i}")).collect(),
            origins: vec![SourceOrigin::Audio; samples.len()],
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    fn period(&self) -> f64 {
        self.samples.first().map_or(FUSION_SAMPLE_PERIOD, |s| s.sample_period)
    }

    fn label(&self, source: usize, x: usize) -> usize {
        self.samples[source].labels[x].vocabulary_index()
    }
}

/// Each sample from a uniformly chosen source.
pub fn fuse_rnd(set: &SourceSet, seed: u64) -> SampledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..set.sample_count())
        .map(|x| set.samples[rng.random_range(0..set.len())].labels[x])
        .collect();
    SampledSequence { labels, sample_period: set.period() }
}

/// Most frequent label per sample; ties broken uniformly at random.
pub fn fuse_mv(set: &SourceSet, seed: u64) -> SampledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(set.sample_count());
    for x in 0..set.sample_count() {
        let mut counts = [0usize; VOCABULARY_SIZE];
        for s in 0..set.len() {
            counts[set.label(s, x)] += 1;
        }
        let top = *counts.iter().max().expect("vocabulary");
        let tied: Vec<usize> = (0..VOCABULARY_SIZE).filter(|&v| counts[v] == top).collect();
        let pick = if tied.len() == 1 { tied[0] } else { tied[rng.random_range(0..tied.len())] };
        labels.push(ChordLabel::from_vocabulary_index(pick).expect("index"));
    }
    SampledSequence { labels, sample_period: set.period() }
}

/// Source accuracies and label probabilities after the last iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DfState {
    pub accuracy: Vec<f64>,
    /// Samples x 25.
    pub probabilities: Array2<f64>,
}

impl DfState {
    /// Highest-probability label per sample, ties to vocabulary order.
    pub fn labels(&self) -> Vec<ChordLabel> {
        self.probabilities
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for v in 1..row.len() {
                    if row[v] > row[best] {
                        best = v;
                    }
                }
                ChordLabel::from_vocabulary_index(best).expect("index")
            })
            .collect()
    }
}

/// Runs the accuracy / vote count / probability updates `iterations`
/// times, starting from label frequencies.
pub fn df_iterate(set: &SourceSet, iterations: usize) -> DfState {
    let n = set.sample_count();
    let v_count = VOCABULARY_SIZE;
    let mut p = Array2::zeros((n, v_count));
    for x in 0..n {
        for s in 0..set.len() {
            p[[x, set.label(s, x)]] += 1.0 / set.len() as f64;
        }
    }
    let mut accuracy = vec![0.0; set.len()];
    for _ in 0..iterations {
        for (s, a) in accuracy.iter_mut().enumerate() {
            let total: f64 = (0..n).map(|x| p[[x, set.label(s, x)]]).sum();
            let mean = if n > 0 { total / n as f64 } else { 1.0 };
            *a = mean.clamp(ACCURACY_CLAMP, 1.0 - ACCURACY_CLAMP);
        }
        let weights: Vec<f64> =
            accuracy.iter().map(|a| ((v_count as f64 - 1.0) * a / (1.0 - a)).ln()).collect();
        for x in 0..n {
            let mut vc = [0.0; VOCABULARY_SIZE];
            for (s, w) in weights.iter().enumerate() {
                vc[set.label(s, x)] += w;
            }
            let max = vc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vc.iter().map(|v| (v - max).exp()).sum();
            for v in 0..v_count {
                p[[x, v]] = (vc[v] - max).exp() / z;
            }
        }
    }
    DfState { accuracy, probabilities: p }
}

pub fn fuse_df(set: &SourceSet) -> (SampledSequence, DfState) {
    let state = df_iterate(set, DF_ITERATIONS);
    (SampledSequence { labels: state.labels(), sample_period: set.period() }, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: Method,
    pub strategy: Strategy,
    pub seed: u64,
    pub midi_levels: MidiLevels,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { method: Method::Df, strategy: Strategy::Best, seed: 0, midi_levels: MidiLevels::Both }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub id: String,
    pub origin: SourceOrigin,
    /// Final accuracy, for data fusion only.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub method: Method,
    pub strategy: Strategy,
    pub seed: u64,
    pub sources: Vec<SourceReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub sequence: ChordSequence,
    pub report: FusionReport,
}

/// Integrates already selected sources. The result tiles
/// `[0, longest source end]`.
pub fn fuse_sources(sources: &[Source], cfg: &FusionConfig) -> Result<FusionOutput, FusionError> {
    let set = SourceSet::new(sources, FUSION_SAMPLE_PERIOD)?;
    let (samples, accuracy) = match cfg.method {
        Method::Rnd => (fuse_rnd(&set, cfg.seed), None),
        Method::Mv => (fuse_mv(&set, cfg.seed), None),
        Method::Df => {
            let (s, state) = fuse_df(&set);
            (s, Some(state.accuracy))
        }
    };
    let duration = samples.duration();
    let sequence = merge_samples(&samples).padded(duration);
    let report = FusionReport {
        method: cfg.method,
        strategy: cfg.strategy,
        seed: cfg.seed,
        sources: sources
            .iter()
            .enumerate()
            .map(|(i, s)| SourceReport { id: s.id.clone(), origin: s.origin, accuracy: accuracy.as_ref().map(|a| a[i]) })
            .collect(),
    };
    Ok(FusionOutput { sequence, report })
}

/// Selects with the configured strategy, then integrates.
pub fn fuse(song: &SongSources, cfg: &FusionConfig) -> Result<FusionOutput, FusionError> {
    let sources = match cfg.strategy {
        Strategy::All => select_sources_all(song)?,
        Strategy::Best => select_sources_best(song, cfg.midi_levels)?,
    };
    fuse_sources(&sources, cfg)
}
