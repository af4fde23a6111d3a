//! Corpus manifests, per-song orchestration with content-hash caching, and
//! report and plot-table output.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotations::{beat_sync_labels, format_lab, read_lab, write_lab, BeatGrid, ChordSequence};
use crate::audio::{load_wav, ChromaSequence};
use crate::cassette::{self, SegmentationLevel};
use crate::chord::ChordLabel;
use crate::dtw::{align_midi_to_audio, DtwConfig, TimeMap};
use crate::evaluation::{evaluate, wcsr, EvalReport, MatchingPolicy};
use crate::fusion::{fuse, FusionConfig, MidiCandidate, SongSources, SourceOrigin, TabCandidate};
use crate::hmm::HmmParameters;
use crate::jump::{jump_align, preprocess_audio, JumpConfig};
use crate::midi::{parse_midi_bytes, remap_times};
use crate::tab::parse_tab_text;

/// Bumped whenever a cached stage changes its output.
const CACHE_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("manifest {pointer}: file not found: {path}")]
    MissingFile { pointer: String, path: PathBuf },
    #[error("{0}")]
    Stage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn stage<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage(format!("{what}: {e}"))
}

/// Input files for one song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongBundle {
    pub id: String,
    pub audio: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub ace_labs: Vec<PathBuf>,
    pub midis: Vec<PathBuf>,
    pub tabs: Vec<PathBuf>,
}

fn schema(pointer: String, message: impl Into<String>) -> PipelineError {
    PipelineError::Schema { pointer, message: message.into() }
}

fn existing_path(base: &Path, v: &Value, pointer: String) -> Result<PathBuf, PipelineError> {
    let s = v.as_str().ok_or_else(|| schema(pointer.clone(), "expected a path string"))?;
    let path = base.join(s);
    if !path.is_file() {
        return Err(PipelineError::MissingFile { pointer, path });
    }
    Ok(path)
}

fn path_list(base: &Path, song: &serde_json::Map<String, Value>, key: &str, at: &str) -> Result<Vec<PathBuf>, PipelineError> {
    match song.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| existing_path(base, v, format!("{at}/{key}/{i}")))
            .collect(),
        Some(_) => Err(schema(format!("{at}/{key}"), "expected an array")),
    }
}

/// Parses a manifest; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SongBundle>, PipelineError> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema(String::new(), e.to_string()))?;
    let songs = root
        .get("songs")
        .ok_or_else(|| schema(String::new(), "missing `songs`"))?
        .as_array()
        .ok_or_else(|| schema("/songs".into(), "expected an array"))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(songs.len());
    for (i, song) in songs.iter().enumerate() {
        let at = format!("/songs/{i}");
        let obj = song.as_object().ok_or_else(|| schema(at.clone(), "expected an object"))?;
        let id = obj
            .get("id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema(format!("{at}/id"), "expected a non-empty string"))?;
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(schema(format!("{at}/id"), "id must be usable as a directory name"));
        }
        if !seen.insert(id.to_string()) {
            return Err(schema(format!("{at}/id"), format!("duplicate song id `{id}`")));
        }
        let audio = existing_path(
            base,
            obj.get("audio").ok_or_else(|| schema(format!("{at}/audio"), "missing audio"))?,
            format!("{at}/audio"),
        )?;
        let ground_truth = match obj.get("ground_truth") {
            None | Some(Value::Null) => None,
            Some(v) => Some(existing_path(base, v, format!("{at}/ground_truth"))?),
        };
        out.push(SongBundle {
            id: id.to_string(),
            audio,
            ground_truth,
            ace_labs: path_list(base, obj, "ace_labs", &at)?,
            midis: path_list(base, obj, "midis", &at)?,
            tabs: path_list(base, obj, "tabs", &at)?,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SongBundle>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// `key=value` pairs on one line.
pub fn format_sidecar(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    body.join(" ") + "\n"
}

pub fn parse_sidecar(text: &str) -> BTreeMap<String, String> {
    text.split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

pub fn sidecar_path(lab: &Path) -> PathBuf {
    let mut s = lab.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn sidecar_value(lab: &Path, key: &str) -> Result<f64, PipelineError> {
    let path = sidecar_path(lab);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_sidecar(&text)
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PipelineError::Stage(format!("{}: missing `{key}`", path.display())))
}

/// A MIDI candidate from `<stem>.bar.lab` and `<stem>.beat.lab` with sidecars.
pub fn load_midi_candidate(stem: &Path) -> Result<MidiCandidate, PipelineError> {
    let bar_path = PathBuf::from(format!("{}.bar.lab", stem.display()));
    let beat_path = PathBuf::from(format!("{}.beat.lab", stem.display()));
    Ok(MidiCandidate {
        id: stem.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        confidence: sidecar_value(&bar_path, "confidence")?,
        ats_bar: sidecar_value(&bar_path, "ats")?,
        ats_beat: sidecar_value(&beat_path, "ats")?,
        bar: read_lab(&bar_path).map_err(stage("bar labels"))?,
        beat: read_lab(&beat_path).map_err(stage("beat labels"))?,
    })
}

pub fn load_tab_candidate(lab: &Path) -> Result<TabCandidate, PipelineError> {
    Ok(TabCandidate {
        id: lab.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        log_likelihood: sidecar_value(lab, "loglik")?,
        sequence: read_lab(lab).map_err(stage("tab labels"))?,
    })
}

/// CSV lanes for plotting: one row per (source, segment). The fused lane
/// is written last under the id `fused`.
pub fn emit_plot_data(sources: &[(String, ChordSequence)], fused: Option<&ChordSequence>) -> String {
    let mut out = String::from("source_id,start,end,label\n");
    let lanes = sources.iter().map(|(id, s)| (id.as_str(), s)).chain(fused.map(|f| ("fused", f)));
    for (id, seq) in lanes {
        for seg in seq.segments() {
            out.push_str(&format!("{},{:.6},{:.6},{}\n", csv_field(id), seg.start, seg.end, seg.label));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub dtw: DtwConfig,
    pub jump: JumpConfig,
    pub hmm: HmmParameters,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub use_cache: bool,
}

impl RunConfig {
    pub fn new(hmm: HmmParameters, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            fusion: FusionConfig::default(),
            dtw: DtwConfig::default(),
            jump: JumpConfig::default(),
            hmm,
            output_dir: output_dir.into(),
            workers: 4,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub computed: usize,
    pub cached: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub id: String,
    pub origin: SourceOrigin,
    pub lab: PathBuf,
    pub confidence: Option<f64>,
    pub ats: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub transposition: Option<i32>,
    pub csr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongReport {
    pub id: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Sources dropped because a stage failed.
    pub failures: Vec<String>,
    pub fused_lab: Option<PathBuf>,
    pub evaluation: Option<EvalReport>,
    pub sources: Vec<SourceSummary>,
    pub stages: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub songs: Vec<SongReport>,
    pub fused_wcsr: Option<f64>,
    pub failed_songs: usize,
    pub failed_sources: usize,
}

impl CorpusReport {
    /// True when any song or source stage failed.
    pub fn has_failures(&self) -> bool {
        self.failed_songs > 0 || self.failed_sources > 0
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp{}-{n}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Cache<'a> {
    dir: PathBuf,
    enabled: bool,
    stats: &'a mut StageStats,
}

impl Cache<'_> {
    /// Loads `key` or computes and stores it. Either way the value goes
    /// through its serialized form, so warm and cold runs agree exactly.
    fn get<T, F>(&mut self, key: &str, compute: F) -> Result<T, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, PipelineError>,
    {
        let path = self.dir.join(format!("{key}.json"));
        if self.enabled {
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(v) = serde_json::from_slice(&bytes) {
                    self.stats.cached += 1;
                    return Ok(v);
                }
            }
        }
        let value = compute()?;
        self.stats.computed += 1;
        let bytes = serde_json::to_vec(&value).map_err(stage("cache encode"))?;
        if self.enabled {
            write_atomic(&path, &bytes)?;
        }
        serde_json::from_slice(&bytes).map_err(stage("cache decode"))
    }
}

#[derive(Serialize, Deserialize)]
struct Features {
    chroma: Vec<[f64; 12]>,
    frame_period: f64,
    beats: BeatGrid,
}

impl Features {
    fn chroma(&self) -> ChromaSequence {
        let mut v = ndarray::Array2::zeros((self.chroma.len(), 12));
        for (i, row) in self.chroma.iter().enumerate() {
            for d in 0..12 {
                v[[i, d]] = row[d];
            }
        }
        ChromaSequence { vectors: v, frame_period: self.frame_period }
    }
}

#[derive(Serialize, Deserialize)]
struct CassetteCached {
    confidence: f64,
    time_map: Vec<(f64, f64)>,
    bar: ChordSequence,
    ats_bar: f64,
    beat: ChordSequence,
    ats_beat: f64,
}

#[derive(Serialize, Deserialize)]
struct JumpCached {
    sequence: ChordSequence,
    log_likelihood: f64,
    transposition: i32,
    ucs_json_lines: String,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(io_err(path))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "source".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Gives each path a unique stem-based name.
fn unique_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    paths
        .iter()
        .map(|p| {
            let base = stem(p);
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 { base } else { format!("{base}-{n}") }
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    write_atomic(path, text.as_bytes())
}

fn write_lab_file(path: &Path, seq: &ChordSequence) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_lab(seq, path).map_err(stage("write lab"))
}

fn process_song(bundle: &SongBundle, cfg: &RunConfig, hmm_hash: &str) -> SongReport {
    let started = Instant::now();
    let mut stats = StageStats::default();
    let mut report = SongReport {
        id: bundle.id.clone(),
        ok: false,
        error: None,
        failures: Vec::new(),
        fused_lab: None,
        evaluation: None,
        sources: Vec::new(),
        stages: stats,
    };
    let result = run_song(bundle, cfg, hmm_hash, &mut stats, &mut report);
    stats.seconds = started.elapsed().as_secs_f64();
    report.stages = stats;
    match result {
        Ok(()) => report.ok = true,
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

fn run_song(
    bundle: &SongBundle,
    cfg: &RunConfig,
    hmm_hash: &str,
    stats: &mut StageStats,
    report: &mut SongReport,
) -> Result<(), PipelineError> {
    let song_dir = cfg.output_dir.join(&bundle.id);
    fs::create_dir_all(&song_dir).map_err(io_err(&song_dir))?;
    let mut cache = Cache { dir: cfg.output_dir.join("cache"), enabled: cfg.use_cache, stats };

    let audio_bytes = read_bytes(&bundle.audio)?;
    let audio_hash = sha_hex(&[&audio_bytes]);
    let waveform = std::cell::OnceCell::new();
    let load_audio = || -> Result<crate::audio::Waveform, PipelineError> {
        load_wav(&bundle.audio).map_err(stage("audio"))
    };

    let mut sources = SongSources::default();
    let ground_truth = match &bundle.ground_truth {
        Some(p) => Some(read_lab(p).map_err(stage("ground truth"))?),
        None => None,
    };

    for (path, name) in bundle.ace_labs.iter().zip(unique_names(&bundle.ace_labs)) {
        match read_lab(path) {
            Ok(seq) => {
                report.sources.push(SourceSummary {
                    id: format!("ace:{name}"),
                    origin: SourceOrigin::Audio,
                    lab: path.clone(),
                    confidence: None,
                    ats: None,
                    log_likelihood: None,
                    transposition: None,
                    csr: None,
                });
                sources.audio.push((format!("ace:{name}"), seq));
            }
            Err(e) => report.failures.push(format!("{}: {e}", path.display())),
        }
    }

    let dtw_key = format!("{:?}", cfg.dtw);
    for (path, name) in bundle.midis.iter().zip(unique_names(&bundle.midis)) {
        let outcome = (|| -> Result<CassetteCached, PipelineError> {
            let bytes = read_bytes(path)?;
            let key = sha_hex(&[b"cassette", CACHE_VERSION.as_bytes(), audio_hash.as_bytes(), &bytes, dtw_key.as_bytes()]);
            cache.get(&key, || {
                let song = parse_midi_bytes(&bytes).map_err(stage("midi"))?;
                let w = match waveform.get() {
                    Some(w) => w,
                    None => {
                        let loaded = load_audio()?;
                        waveform.get_or_init(|| loaded)
                    }
                };
                let map = align_midi_to_audio(&song, w, &cfg.dtw).map_err(stage("alignment"))?;
                let aligned = remap_times(&song, &map).map_err(stage("remap"))?;
                let bar = cassette::estimate(&aligned, SegmentationLevel::Bar).map_err(stage("cassette"))?;
                let beat = cassette::estimate(&aligned, SegmentationLevel::Beat).map_err(stage("cassette"))?;
                Ok(CassetteCached {
                    confidence: map.confidence,
                    time_map: map.pairs,
                    bar: bar.sequence,
                    ats_bar: bar.ats,
                    beat: beat.sequence,
                    ats_beat: beat.ats,
                })
            })
        })();
        match outcome {
            Ok(c) => {
                let dir = song_dir.join("midi");
                let bar_lab = dir.join(format!("{name}.bar.lab"));
                let beat_lab = dir.join(format!("{name}.beat.lab"));
                write_lab_file(&bar_lab, &c.bar)?;
                write_lab_file(&beat_lab, &c.beat)?;
                let conf = c.confidence.to_string();
                write_text(&sidecar_path(&bar_lab), &format_sidecar(&[("confidence", conf.clone()), ("ats", c.ats_bar.to_string())]))?;
                write_text(&sidecar_path(&beat_lab), &format_sidecar(&[("confidence", conf), ("ats", c.ats_beat.to_string())]))?;
                TimeMap { pairs: c.time_map.clone(), confidence: c.confidence }
                    .write(dir.join(format!("{name}.align")))
                    .map_err(io_err(&dir))?;
                for (lab, ats, origin, level) in
                    [(&bar_lab, c.ats_bar, SourceOrigin::MidiBar, "bar"), (&beat_lab, c.ats_beat, SourceOrigin::MidiBeat, "beat")]
                {
                    report.sources.push(SourceSummary {
                        id: format!("midi:{name}#{level}"),
                        origin,
                        lab: lab.clone(),
                        confidence: Some(c.confidence),
                        ats: Some(ats),
                        log_likelihood: None,
                        transposition: None,
                        csr: None,
                    });
                }
                sources.midis.push(MidiCandidate {
                    id: format!("midi:{name}"),
                    confidence: c.confidence,
                    ats_bar: c.ats_bar,
                    ats_beat: c.ats_beat,
                    bar: c.bar,
                    beat: c.beat,
                });
            }
            Err(e) => report.failures.push(format!("{}: {e}", path.display())),
        }
    }

    if !bundle.tabs.is_empty() {
        let features_key = sha_hex(&[b"features", CACHE_VERSION.as_bytes(), audio_hash.as_bytes()]);
        let features = cache.get(&features_key, || {
            let w = match waveform.get() {
                Some(w) => w,
                None => {
                    let loaded = load_audio()?;
                    waveform.get_or_init(|| loaded)
                }
            };
            let (chroma, beats) = preprocess_audio(w).map_err(stage("features"))?;
            Ok(Features {
                chroma: (0..chroma.frames()).map(|t| chroma.frame(t)).collect(),
                frame_period: chroma.frame_period,
                beats,
            })
        });
        let features = match features {
            Ok(f) => f,
            Err(e) => {
                report.failures.extend(bundle.tabs.iter().map(|p| format!("{}: {e}", p.display())));
                return finish_song(&song_dir, sources, ground_truth, cfg, report);
            }
        };
        let chroma = features.chroma();
        let jump_key = format!("{:?}", cfg.jump);
        for (path, name) in bundle.tabs.iter().zip(unique_names(&bundle.tabs)) {
            let outcome = (|| -> Result<JumpCached, PipelineError> {
                let bytes = read_bytes(path)?;
                let key = sha_hex(&[
                    b"jump",
                    CACHE_VERSION.as_bytes(),
                    features_key.as_bytes(),
                    &bytes,
                    hmm_hash.as_bytes(),
                    jump_key.as_bytes(),
                ]);
                cache.get(&key, || {
                    let parsed = parse_tab_text(&String::from_utf8_lossy(&bytes));
                    let a = jump_align(&parsed.ucs, &chroma, &features.beats, &cfg.hmm, &cfg.jump)
                        .map_err(stage("jump alignment"))?;
                    Ok(JumpCached {
                        sequence: a.sequence,
                        log_likelihood: a.log_likelihood,
                        transposition: a.transposition,
                        ucs_json_lines: parsed.ucs.to_json_lines(),
                    })
                })
            })();
            match outcome {
                Ok(j) => {
                    let dir = song_dir.join("tab");
                    let lab = dir.join(format!("{name}.lab"));
                    write_lab_file(&lab, &j.sequence)?;
                    write_text(
                        &sidecar_path(&lab),
                        &format_sidecar(&[("loglik", j.log_likelihood.to_string()), ("transposition", j.transposition.to_string())]),
                    )?;
                    write_text(&dir.join(format!("{name}.ucs.jsonl")), &j.ucs_json_lines)?;
                    report.sources.push(SourceSummary {
                        id: format!("tab:{name}"),
                        origin: SourceOrigin::Tab,
                        lab,
                        confidence: None,
                        ats: None,
                        log_likelihood: Some(j.log_likelihood),
                        transposition: Some(j.transposition),
                        csr: None,
                    });
                    sources.tabs.push(TabCandidate { id: format!("tab:{name}"), log_likelihood: j.log_likelihood, sequence: j.sequence });
                }
                Err(e) => report.failures.push(format!("{}: {e}", path.display())),
            }
        }
    }

    finish_song(&song_dir, sources, ground_truth, cfg, report)
}

fn finish_song(
    song_dir: &Path,
    sources: SongSources,
    ground_truth: Option<ChordSequence>,
    cfg: &RunConfig,
    report: &mut SongReport,
) -> Result<(), PipelineError> {
    let fused = fuse(&sources, &cfg.fusion).map_err(stage("fusion"))?;
    let fused_lab = song_dir.join("fused.lab");
    write_text(&fused_lab, &format_lab(&fused.sequence))?;
    write_text(
        &song_dir.join("fusion.json"),
        &serde_json::to_string_pretty(&fused.report).map_err(stage("fusion report"))?,
    )?;
    report.fused_lab = Some(fused_lab);

    let mut lanes: Vec<(String, ChordSequence)> = sources.audio.clone();
    for m in &sources.midis {
        lanes.push((format!("{}#bar", m.id), m.bar.clone()));
        lanes.push((format!("{}#beat", m.id), m.beat.clone()));
    }
    lanes.extend(sources.tabs.iter().map(|t| (t.id.clone(), t.sequence.clone())));
    write_text(&song_dir.join("plot.csv"), &emit_plot_data(&lanes, Some(&fused.sequence)))?;

    if let Some(gt) = ground_truth {
        let policy = MatchingPolicy::MajMin;
        report.evaluation = Some(evaluate(&fused.sequence, &gt, policy).map_err(stage("evaluation"))?);
        for (summary, (_, seq)) in report.sources.iter_mut().zip(lanes.iter()) {
            summary.csr = crate::evaluation::csr(seq, &gt, policy).ok();
        }
        write_text(
            &song_dir.join("evaluation.json"),
            &serde_json::to_string_pretty(&report.evaluation).map_err(stage("evaluation report"))?,
        )?;
    }
    Ok(())
}

/// Runs every song on a bounded worker pool and writes `report.json`.
pub fn run_pipeline(bundles: &[SongBundle], cfg: &RunConfig) -> Result<CorpusReport, PipelineError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let hmm_json = serde_json::to_vec(&cfg.hmm).map_err(stage("hmm"))?;
    let hmm_hash = sha_hex(&[&hmm_json]);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(stage("worker pool"))?;
    let songs: Vec<SongReport> = pool.install(|| bundles.par_iter().map(|b| process_song(b, cfg, &hmm_hash)).collect());

    let mut pairs = Vec::new();
    for (bundle, song) in bundles.iter().zip(&songs) {
        if let (Some(gt), Some(lab)) = (&bundle.ground_truth, &song.fused_lab) {
            if let (Ok(gt), Ok(est)) = (read_lab(gt), read_lab(lab)) {
                pairs.push((est, gt));
            }
        }
    }
    let report = CorpusReport {
        fused_wcsr: wcsr(&pairs, MatchingPolicy::MajMin).ok(),
        failed_songs: songs.iter().filter(|s| !s.ok).count(),
        failed_sources: songs.iter().map(|s| s.failures.len()).sum(),
        songs,
    };
    let path = cfg.output_dir.join("report.json");
    write_text(&path, &serde_json::to_string_pretty(&report).map_err(stage("report"))?)?;
    Ok(report)
}

/// Beat-synchronous chroma and labels for HMM training.
pub fn training_pair(audio: &Path, labels: &Path) -> Result<(ChromaSequence, Vec<ChordLabel>), PipelineError> {
    let w = load_wav(audio).map_err(stage("audio"))?;
    let (chroma, beats) = preprocess_audio(&w).map_err(stage("features"))?;
    let seq = read_lab(labels).map_err(stage("labels"))?;
    Ok((chroma, beat_sync_labels(&seq, &beats)))
}

/// Writes a small rendered corpus with a manifest and returns the
/// manifest path. Each song gets a ground truth, a degraded audio estimate,
/// a MIDI rendition and a chord sheet transposed by two semitones.
pub fn write_demo_corpus(dir: &Path, songs: usize, seed: u64) -> Result<PathBuf, PipelineError> {
    use crate::synth::{chords_to_midi, degrade, render_chords, SyntheticSong};
    use rand::SeedableRng;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(songs);
    for i in 0..songs {
        let random = SyntheticSong::random(&mut rng, 0.05);
        let song = SyntheticSong::from_lines(random.lines[..2].to_vec(), vec![0, 1, 0, 1], 0.05, &mut rng);
        let id = format!("song{:02}", i + 1);
        let triples: Vec<(f64, f64, ChordLabel)> =
            song.truth.segments().iter().map(|s| (s.start, s.end, s.label)).collect();
        let wav = dir.join(format!("{id}.wav"));
        crate::audio::write_wav(&render_chords(&triples, 120.0, true), &wav).map_err(stage("demo audio"))?;
        fs::write(dir.join(format!("{id}.gt.lab")), format_lab(&song.truth)).map_err(io_err(dir))?;
        fs::write(dir.join(format!("{id}.ace.lab")), format_lab(&degrade(&song, 0.25, &mut rng)))
            .map_err(io_err(dir))?;
        fs::write(dir.join(format!("{id}.mid")), chords_to_midi(&song.truth, 120.0)).map_err(io_err(dir))?;
        fs::write(dir.join(format!("{id}.tab.txt")), song.chord_sheet(2)).map_err(io_err(dir))?;
        entries.push(serde_json::json!({
            "id": id,
            "audio": format!("{id}.wav"),
            "ground_truth": format!("{id}.gt.lab"),
            "ace_labs": [format!("{id}.ace.lab")],
            "midis": [format!("{id}.mid")],
            "tabs": [format!("{id}.tab.txt")],
        }));
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "songs": entries })).map_err(stage("manifest"))?;
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    Ok(manifest)
}
