use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chordfuse::annotations::{read_lab, write_lab, ChordSequence};
use chordfuse::audio::load_wav;
use chordfuse::cassette::{self, SegmentationLevel};
use chordfuse::dtw::{align_midi_to_audio, DtwConfig, Penalty, TimeMap};
use chordfuse::evaluation::{evaluate, wcsr, EvalReport, MatchingPolicy};
use chordfuse::fusion::{fuse, FusionConfig, Method, MidiLevels, SongSources, Strategy};
use chordfuse::hmm::{train_hmm, HmmParameters};
use chordfuse::jump::{jump_align, preprocess_audio, JumpConfig};
use chordfuse::midi::{parse_midi, remap_times};
use chordfuse::pipeline::{
    emit_plot_data, format_sidecar, load_manifest, load_midi_candidate, load_tab_candidate, run_pipeline,
    sidecar_path, training_pair, write_demo_corpus, RunConfig,
};
use chordfuse::synth::{bundled_hmm, synthetic_hmm};
use chordfuse::tab::parse_tab;

#[derive(Parser)]
#[command(name = "chordfuse", version, about = "Chord sequences from audio, MIDI and tabs, aligned and fused")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the untimed chord sequence of a tab as JSON lines.
    ParseTab {
        tab: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Align a MIDI file to audio and write the time map.
    AlignMidi {
        midi: PathBuf,
        audio: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        dtw: DtwArgs,
    },
    /// Estimate chords from a MIDI file, optionally after aligning it to audio.
    Cassette {
        midi: PathBuf,
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Precomputed time map from `align-midi`.
        #[arg(long, conflicts_with = "audio")]
        time_map: Option<PathBuf>,
        #[arg(long, default_value = "bar", value_parser = parse_level)]
        level: SegmentationLevel,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        dtw: DtwArgs,
    },
    /// Align a tab to audio with the jump-aware HMM.
    JumpAlign {
        tab: PathBuf,
        audio: PathBuf,
        #[command(flatten)]
        hmm: HmmArg,
        #[command(flatten)]
        jump: JumpArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train HMM parameters from audio/label pairs or a synthetic corpus.
    TrainHmm {
        /// `AUDIO:LAB` pairs.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(PathBuf, PathBuf)>,
        /// Use every song with ground truth in a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Train on generated chroma with this seed instead.
        #[arg(long)]
        synthetic: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fuse chord sequences of one song.
    Fuse {
        /// Audio chord estimate `.lab` files.
        #[arg(long = "audio-lab", required = true)]
        audio_labs: Vec<PathBuf>,
        /// MIDI output stems: `<stem>.bar.lab` and `<stem>.beat.lab` with sidecars.
        #[arg(long = "midi")]
        midis: Vec<PathBuf>,
        /// Tab `.lab` files with sidecars.
        #[arg(long = "tab")]
        tabs: Vec<PathBuf>,
        #[command(flatten)]
        fusion: FusionArgs,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the fusion report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score estimates against ground truth as CSV.
    Evaluate {
        /// `ESTIMATE:GROUND_TRUTH` pairs.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(PathBuf, PathBuf)>,
        /// Score `<run-dir>/<id>/fused.lab` for every song of a manifest.
        #[arg(long, requires = "run_dir")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Compare roots only.
        #[arg(long)]
        root_only: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a lane table for plotting.
    PlotData {
        /// `ID=LAB` lanes.
        #[arg(long = "lane", value_parser = parse_lane)]
        lanes: Vec<(String, PathBuf)>,
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run every stage over a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[command(flatten)]
        hmm: HmmArg,
        #[command(flatten)]
        fusion: FusionArgs,
        #[command(flatten)]
        dtw: DtwArgs,
        #[command(flatten)]
        jump: JumpArgs,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        no_cache: bool,
    },
    /// Write a rendered synthetic corpus and its manifest.
    Demo {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        songs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DtwArgs {
    /// Feature hop in samples at 22050 Hz.
    #[arg(long, default_value_t = 1024)]
    hop: usize,
    /// Non-diagonal step penalty; defaults to the cost-matrix median.
    #[arg(long)]
    penalty: Option<f64>,
    /// Fraction of the start and end of the alignment that may be skipped.
    #[arg(long, default_value_t = 0.96)]
    gully: f64,
}

impl DtwArgs {
    fn config(&self) -> DtwConfig {
        DtwConfig { hop: self.hop, penalty: self.penalty.map_or(Penalty::Median, Penalty::Fixed), gully: self.gully }
    }
}

#[derive(Args)]
struct JumpArgs {
    #[arg(long, default_value_t = 0.05)]
    p_f: f64,
    #[arg(long, default_value_t = 0.05)]
    p_b: f64,
}

#[derive(Args)]
struct HmmArg {
    /// HMM parameter file; the bundled synthetic model when omitted.
    #[arg(long)]
    hmm: Option<PathBuf>,
}

#[derive(Args)]
struct FusionArgs {
    #[arg(long, default_value = "df", value_parser = |s: &str| s.parse::<Method>().map_err(|e| e.to_string()))]
    method: Method,
    #[arg(long, default_value = "best", value_parser = |s: &str| s.parse::<Strategy>().map_err(|e| e.to_string()))]
    strategy: Strategy,
    /// Seed for random picking and vote ties.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "both", value_parser = |s: &str| s.parse::<MidiLevels>().map_err(|e| e.to_string()))]
    midi_levels: MidiLevels,
}

impl FusionArgs {
    fn config(&self) -> FusionConfig {
        FusionConfig { method: self.method, strategy: self.strategy, seed: self.seed, midi_levels: self.midi_levels }
    }
}

fn parse_level(s: &str) -> Result<SegmentationLevel, String> {
    match s {
        "bar" => Ok(SegmentationLevel::Bar),
        "beat" => Ok(SegmentationLevel::Beat),
        _ => Err(format!("unknown level `{s}`, expected bar or beat")),
    }
}

fn parse_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    s.split_once(':')
        .map(|(a, b)| (PathBuf::from(a), PathBuf::from(b)))
        .ok_or_else(|| format!("expected A:B, got `{s}`"))
}

fn parse_lane(s: &str) -> Result<(String, PathBuf), String> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), PathBuf::from(b)))
        .ok_or_else(|| format!("expected ID=LAB, got `{s}`"))
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Processing(String),
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn processing<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Processing(e.to_string())
}

fn load_hmm(arg: &HmmArg) -> Result<HmmParameters, Failure> {
    match &arg.hmm {
        Some(p) => HmmParameters::read(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))),
        None => Ok(bundled_hmm()),
    }
}

fn write_or_print(output: Option<&Path>, text: &str) -> Result<(), Failure> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Processing(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_lab_to(seq: &ChordSequence, path: &Path) -> Result<(), Failure> {
    write_lab(seq, path).map_err(|e| Failure::Processing(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Processing(format!("{}: {e}", path.display())))
}

fn eval_rows(rows: &[(String, EvalReport)], corpus: Option<f64>) -> String {
    let mut out = String::from("song_id,csr,overseg,underseg,seg,duration\n");
    for (id, r) in rows {
        out.push_str(&format!("{id},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.csr, r.overseg, r.underseg, r.seg, r.duration));
    }
    if let Some(w) = corpus {
        let total: f64 = rows.iter().map(|(_, r)| r.duration).sum();
        let weighted = |f: fn(&EvalReport) -> f64| rows.iter().map(|(_, r)| f(r) * r.duration).sum::<f64>() / total;
        out.push_str(&format!(
            "corpus,{w:.6},{:.6},{:.6},{:.6},{total:.6}\n",
            weighted(|r| r.overseg),
            weighted(|r| r.underseg),
            weighted(|r| r.seg)
        ));
    }
    out
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ParseTab { tab, output } => {
            let parsed = parse_tab(&tab).map_err(|e| Failure::Config(format!("{}: {e}", tab.display())))?;
            if parsed.skipped_tokens > 0 {
                eprintln!("skipped {} unparseable chord tokens", parsed.skipped_tokens);
            }
            write_or_print(output.as_deref(), &parsed.ucs.to_json_lines())
        }
        Command::AlignMidi { midi, audio, output, dtw } => {
            let song = parse_midi(&midi).map_err(processing)?;
            let wav = load_wav(&audio).map_err(processing)?;
            let map = align_midi_to_audio(&song, &wav, &dtw.config()).map_err(processing)?;
            map.write(&output).map_err(processing)?;
            println!("confidence={}", map.confidence);
            Ok(())
        }
        Command::Cassette { midi, audio, time_map, level, output, dtw } => {
            let mut song = parse_midi(&midi).map_err(processing)?;
            let mut confidence = None;
            let map = match (audio, time_map) {
                (Some(a), _) => {
                    let wav = load_wav(&a).map_err(processing)?;
                    Some(align_midi_to_audio(&song, &wav, &dtw.config()).map_err(processing)?)
                }
                (None, Some(t)) => Some(TimeMap::read(&t).map_err(config)?),
                (None, None) => None,
            };
            if let Some(map) = map {
                confidence = Some(map.confidence);
                song = remap_times(&song, &map).map_err(processing)?;
            }
            let result = cassette::estimate(&song, level).map_err(processing)?;
            write_lab_to(&result.sequence, &output)?;
            let mut pairs = Vec::new();
            if let Some(c) = confidence {
                pairs.push(("confidence", c.to_string()));
            }
            pairs.push(("ats", result.ats.to_string()));
            write_file(&sidecar_path(&output), &format_sidecar(&pairs))
        }
        Command::JumpAlign { tab, audio, hmm, jump, output } => {
            let hmm = load_hmm(&hmm)?;
            let cfg = JumpConfig { p_f: jump.p_f, p_b: jump.p_b };
            cfg.validate().map_err(config)?;
            let parsed = parse_tab(&tab).map_err(processing)?;
            let wav = load_wav(&audio).map_err(processing)?;
            let (chroma, beats) = preprocess_audio(&wav).map_err(processing)?;
            let a = jump_align(&parsed.ucs, &chroma, &beats, &hmm, &cfg).map_err(processing)?;
            write_lab_to(&a.sequence, &output)?;
            write_file(&sidecar_path(&output), &a.sidecar())
        }
        Command::TrainHmm { pairs, manifest, synthetic, output } => {
            let hmm = if let Some(seed) = synthetic {
                synthetic_hmm(seed)
            } else {
                let mut inputs = pairs;
                if let Some(m) = manifest {
                    for song in load_manifest(&m).map_err(config)? {
                        if let Some(gt) = song.ground_truth {
                            inputs.push((song.audio, gt));
                        }
                    }
                }
                if inputs.is_empty() {
                    return Err(Failure::Config("no training pairs given".into()));
                }
                let corpus = inputs
                    .iter()
                    .map(|(a, l)| training_pair(a, l))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(processing)?;
                train_hmm(&corpus).map_err(processing)?
            };
            hmm.write(&output).map_err(processing)
        }
        Command::Fuse { audio_labs, midis, tabs, fusion, output, report } => {
            let mut song = SongSources::default();
            for p in &audio_labs {
                let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                song.audio.push((id, read_lab(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?));
            }
            for m in &midis {
                song.midis.push(load_midi_candidate(m).map_err(config)?);
            }
            for t in &tabs {
                song.tabs.push(load_tab_candidate(t).map_err(config)?);
            }
            let fused = fuse(&song, &fusion.config()).map_err(processing)?;
            write_lab_to(&fused.sequence, &output)?;
            if let Some(r) = report {
                write_file(&r, &serde_json::to_string_pretty(&fused.report).map_err(processing)?)?;
            }
            Ok(())
        }
        Command::Evaluate { pairs, manifest, run_dir, root_only, output } => {
            let policy = if root_only { MatchingPolicy::Root } else { MatchingPolicy::MajMin };
            let mut labelled: Vec<(String, PathBuf, PathBuf)> = pairs
                .into_iter()
                .map(|(e, g)| (e.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()), e, g))
                .collect();
            if let (Some(m), Some(dir)) = (manifest, run_dir) {
                for song in load_manifest(&m).map_err(config)? {
                    if let Some(gt) = song.ground_truth {
                        labelled.push((song.id.clone(), dir.join(&song.id).join("fused.lab"), gt));
                    }
                }
            }
            if labelled.is_empty() {
                return Err(Failure::Config("nothing to evaluate".into()));
            }
            let mut rows = Vec::new();
            let mut seqs = Vec::new();
            for (id, est, gt) in labelled {
                let est = read_lab(&est).map_err(|e| Failure::Processing(format!("{}: {e}", est.display())))?;
                let gt = read_lab(&gt).map_err(|e| Failure::Processing(format!("{}: {e}", gt.display())))?;
                rows.push((id, evaluate(&est, &gt, policy).map_err(processing)?));
                seqs.push((est, gt));
            }
            let corpus = if rows.len() > 1 { Some(wcsr(&seqs, policy).map_err(processing)?) } else { None };
            write_or_print(output.as_deref(), &eval_rows(&rows, corpus))
        }
        Command::PlotData { lanes, fused, output } => {
            let mut loaded = Vec::with_capacity(lanes.len());
            for (id, p) in lanes {
                loaded.push((id, read_lab(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?));
            }
            let fused = match fused {
                Some(p) => Some(read_lab(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?),
                None => None,
            };
            write_or_print(output.as_deref(), &emit_plot_data(&loaded, fused.as_ref()))
        }
        Command::Run { manifest, output_dir, hmm, fusion, dtw, jump, workers, no_cache } => {
            let bundles = load_manifest(&manifest).map_err(config)?;
            let mut cfg = RunConfig::new(load_hmm(&hmm)?, output_dir);
            cfg.hmm.validate().map_err(config)?;
            cfg.fusion = fusion.config();
            cfg.dtw = dtw.config();
            cfg.jump = JumpConfig { p_f: jump.p_f, p_b: jump.p_b };
            cfg.jump.validate().map_err(config)?;
            cfg.workers = workers;
            cfg.use_cache = !no_cache;
            let report = run_pipeline(&bundles, &cfg).map_err(processing)?;
            let rows: Vec<(String, EvalReport)> =
                report.songs.iter().filter_map(|s| s.evaluation.map(|e| (s.id.clone(), e))).collect();
            print!("{}", eval_rows(&rows, report.fused_wcsr));
            for song in &report.songs {
                if let Some(e) = &song.error {
                    eprintln!("{}: failed: {e}", song.id);
                }
                for f in &song.failures {
                    eprintln!("{}: dropped source: {f}", song.id);
                }
            }
            if report.has_failures() {
                Err(Failure::Processing(format!(
                    "{} songs failed, {} sources dropped",
                    report.failed_songs, report.failed_sources
                )))
            } else {
                Ok(())
            }
        }
        Command::Demo { output_dir, songs, seed } => {
            let manifest = write_demo_corpus(&output_dir, songs, seed).map_err(processing)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Processing(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
