//! Waveforms and spectral features: STFT, constant-Q transform, chroma,
//! median-filter harmonic/percussive separation and beat tracking.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::annotations::BeatGrid;

pub const SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("signal too short: {samples} samples, need {needed}")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("highest constant-Q bin at {freq:.1} Hz exceeds Nyquist ({nyquist:.1} Hz)")]
    NyquistExceeded { freq: f64, nyquist: f64 },
    #[error("bin layout with {0} bins per octave cannot fold to 12 pitch classes")]
    IncompatibleBinLayout(usize),
    #[error("spectrogram too small for separation ({frames}×{bins})")]
    TooSmall { frames: usize, bins: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Waveform { samples: self.samples.clone(), sample_rate: target_rate };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = (self.samples.len() as f64 / ratio).round() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = pos - i0 as f64;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform { samples, sample_rate: target_rate }
    }
}

/// Reads 16-bit PCM WAV, folds to mono and resamples to 22050 Hz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::UnsupportedEncoding(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(AudioError::UnsupportedEncoding(format!("{channels} channels")));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|e| AudioError::UnsupportedEncoding(e.to_string()))?;
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&v| v as f64 / 32768.0).sum::<f64>() / frame.len() as f64)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate).resample(SAMPLE_RATE))
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::UnsupportedEncoding(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &x in &w.samples {
        writer.write_sample((x.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

/// Magnitudes, frames × bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub hop: usize,
    pub sample_rate: u32,
    pub bin_frequencies: Vec<f64>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn bins(&self) -> usize {
        self.magnitudes.ncols()
    }

    pub fn frame_period(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    fn with_magnitudes(&self, magnitudes: Array2<f64>) -> Spectrogram {
        Spectrogram { magnitudes, ..self.clone() }
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed short-time Fourier transform magnitudes, bins 0..=N/2.
pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<Spectrogram, AudioError> {
    if window_size == 0 || hop == 0 {
        return Err(AudioError::InvalidParameter("window and hop must be positive".into()));
    }
    if w.samples.len() < window_size {
        return Err(AudioError::SignalTooShort { samples: w.samples.len(), needed: window_size });
    }
    let frames = (w.samples.len() - window_size) / hop + 1;
    let bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let mut magnitudes = Array2::zeros((frames, bins));
    magnitudes
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each_init(
            || vec![Complex64::new(0.0, 0.0); window_size],
            |buf, (f, mut row)| {
                let offset = f * hop;
                for (i, slot) in buf.iter_mut().enumerate() {
                    *slot = Complex64::new(w.samples[offset + i] * window[i], 0.0);
                }
                fft.process(buf);
                for (k, v) in row.iter_mut().enumerate() {
                    *v = buf[k].norm();
                }
            },
        );
    let bin_frequencies = (0..bins).map(|k| k as f64 * w.sample_rate as f64 / window_size as f64).collect();
    Ok(Spectrogram { magnitudes, hop, sample_rate: w.sample_rate, bin_frequencies })
}

/// Geometric bin layout of a constant-Q transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CqtLayout {
    pub f_min: f64,
    pub bins_per_octave: usize,
    pub n_bins: usize,
}

/// C2.
pub const C2_HZ: f64 = 65.406_391_325_149_66;

impl Default for CqtLayout {
    fn default() -> Self {
        CqtLayout { f_min: C2_HZ, bins_per_octave: 12, n_bins: 60 }
    }
}

impl CqtLayout {
    pub fn frequency(&self, k: usize) -> f64 {
        self.f_min * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_bins).map(|k| self.frequency(k)).collect()
    }

    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    /// Window length of bin `k` in samples.
    pub fn window_length(&self, k: usize, sample_rate: u32) -> usize {
        (self.q() * sample_rate as f64 / self.frequency(k)).ceil() as usize
    }

    /// Bin index nearest to `freq`, if inside the layout.
    pub fn bin_of(&self, freq: f64) -> Option<usize> {
        if freq <= 0.0 {
            return None;
        }
        let k = (self.bins_per_octave as f64 * (freq / self.f_min).log2()).round();
        (k >= 0.0 && (k as usize) < self.n_bins).then_some(k as usize)
    }

    /// Pitch class of bin `k` (0 = C).
    pub fn pitch_class(&self, k: usize) -> usize {
        let midi = 69.0 + 12.0 * (self.frequency(k) / 440.0).log2();
        (midi.round() as i64).rem_euclid(12) as usize
    }

    fn validate(&self, sample_rate: u32) -> Result<(), AudioError> {
        if !(self.f_min > 0.0) || self.bins_per_octave == 0 || self.n_bins == 0 {
            return Err(AudioError::InvalidParameter("bad constant-Q layout".into()));
        }
        let top = self.frequency(self.n_bins - 1);
        let nyquist = sample_rate as f64 / 2.0;
        if top >= nyquist {
            return Err(AudioError::NyquistExceeded { freq: top, nyquist });
        }
        Ok(())
    }
}

/// Precomputed sparse spectral kernels for one layout and sample rate.
pub struct CqtKernel {
    layout: CqtLayout,
    sample_rate: u32,
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
    /// Per bin: (fft index, weight).
    rows: Vec<Vec<(usize, Complex64)>>,
}

/// Spectral-kernel entries below this fraction of the row peak are dropped.
const KERNEL_SPARSITY: f64 = 1e-4;

impl CqtKernel {
    pub fn new(layout: CqtLayout, sample_rate: u32) -> Result<Self, AudioError> {
        layout.validate(sample_rate)?;
        let longest = layout.window_length(0, sample_rate);
        let fft_len = longest.next_power_of_two();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
        let q = layout.q();
        let rows = (0..layout.n_bins)
            .map(|k| {
                let n_k = layout.window_length(k, sample_rate);
                let window = hann(n_k);
                let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
                let offset = fft_len / 2 - n_k / 2;
                for n in 0..n_k {
                    let phase = 2.0 * std::f64::consts::PI * q * n as f64 / n_k as f64;
                    // conjugate of the temporal kernel
                    buf[offset + n] = Complex64::from_polar(window[n] / n_k as f64, phase);
                }
                fft.process(&mut buf);
                let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
                buf.iter()
                    .enumerate()
                    .filter(|(_, c)| c.norm() >= KERNEL_SPARSITY * peak)
                    .map(|(f, c)| (f, c.conj() / fft_len as f64))
                    .collect()
            })
            .collect();
        Ok(CqtKernel { layout, sample_rate, fft_len, fft, rows })
    }

    pub fn layout(&self) -> &CqtLayout {
        &self.layout
    }

    /// Constant-Q magnitudes with frames centred at multiples of `hop`.
    pub fn transform(&self, samples: &[f64], hop: usize) -> Array2<f64> {
        let frames = samples.len() / hop + 1;
        let half = self.fft_len as isize / 2;
        let mut out = Array2::zeros((frames, self.layout.n_bins));
        out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each_init(
            || vec![Complex64::new(0.0, 0.0); self.fft_len],
            |buf, (m, mut row)| {
                let start = (m * hop) as isize - half;
                for (j, slot) in buf.iter_mut().enumerate() {
                    let idx = start + j as isize;
                    let x = if idx >= 0 && (idx as usize) < samples.len() { samples[idx as usize] } else { 0.0 };
                    *slot = Complex64::new(x, 0.0);
                }
                self.fft.process(buf);
                for (k, kernel) in self.rows.iter().enumerate() {
                    let v: Complex64 = kernel.iter().map(|&(f, w)| buf[f] * w).sum();
                    row[k] = v.norm();
                }
            },
        );
        out
    }

    /// The transform evaluated straight from its definition, one frame.
    pub fn direct_frame(&self, samples: &[f64], centre: usize) -> Vec<f64> {
        let q = self.layout.q();
        (0..self.layout.n_bins)
            .map(|k| {
                let n_k = self.layout.window_length(k, self.sample_rate);
                let window = hann(n_k);
                let start = centre as isize - (n_k / 2) as isize;
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..n_k {
                    let idx = start + n as isize;
                    if idx < 0 || idx as usize >= samples.len() {
                        continue;
                    }
                    let phase = -2.0 * std::f64::consts::PI * q * n as f64 / n_k as f64;
                    acc += Complex64::from_polar(window[n] / n_k as f64, phase) * samples[idx as usize];
                }
                acc.norm()
            })
            .collect()
    }
}

pub fn cqt(w: &Waveform, layout: &CqtLayout, hop: usize) -> Result<Spectrogram, AudioError> {
    if hop == 0 {
        return Err(AudioError::InvalidParameter("hop must be positive".into()));
    }
    let kernel = CqtKernel::new(*layout, w.sample_rate)?;
    Ok(Spectrogram {
        magnitudes: kernel.transform(&w.samples, hop),
        hop,
        sample_rate: w.sample_rate,
        bin_frequencies: layout.frequencies(),
    })
}

/// Magnitude response of a Hann-windowed kernel to a sinusoid `delta`
/// DFT bins away from its centre, normalized to 1 at the centre.
pub fn hann_response(delta: f64) -> f64 {
    let d = delta.abs();
    if d < 1e-9 {
        1.0
    } else if (d - 1.0).abs() < 1e-9 {
        0.5
    } else {
        let sinc = (std::f64::consts::PI * d).sin() / (std::f64::consts::PI * d);
        (sinc / (1.0 - d * d)).abs()
    }
}

/// Neighbour offsets considered by [`spread_like_cqt`].
pub const LEAKAGE_REACH: i32 = 3;

/// Redistributes energy placed at exact bin centres the way the
/// constant-Q kernel responds to a pure tone at that centre.
pub fn spread_like_cqt(x: &Array2<f64>, layout: &CqtLayout) -> Array2<f64> {
    let b = layout.bins_per_octave as f64;
    let q = layout.q();
    let profile: Vec<(i32, f64)> = (-LEAKAGE_REACH..=LEAKAGE_REACH)
        .map(|d| (d, hann_response(q * (2f64.powf(-d as f64 / b) - 1.0))))
        .collect();
    let bins = x.ncols() as i32;
    let mut out = Array2::zeros(x.dim());
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
        for (j, &v) in src.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for &(d, w) in &profile {
                let k = j as i32 + d;
                if (0..bins).contains(&k) {
                    dst[k as usize] += v * w;
                }
            }
        }
    }
    out
}

/// Log-compressed constant-Q features for alignment: `ln(1 + x)` after
/// scaling so the loudest cell is [`LOG_FEATURE_GAIN`].
pub fn log_cqt_features(w: &Waveform, layout: &CqtLayout, hop: usize) -> Result<Array2<f64>, AudioError> {
    let spec = cqt(w, layout, hop)?;
    Ok(log_compress(spec.magnitudes))
}

/// Peak value of a feature matrix before log compression.
pub const LOG_FEATURE_GAIN: f64 = 100.0;

pub fn log_compress(mut x: Array2<f64>) -> Array2<f64> {
    let peak = x.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        let scale = LOG_FEATURE_GAIN / peak;
        x.mapv_inplace(|v| (v * scale).ln_1p());
    }
    x
}

/// Per-frame 12-bin pitch-class profiles, L1-normalized (silent frames stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaSequence {
    pub vectors: Array2<f64>,
    pub frame_period: f64,
}

impl ChromaSequence {
    pub fn frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn frame(&self, i: usize) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (o, v) in out.iter_mut().zip(self.vectors.row(i)) {
            *o = *v;
        }
        out
    }

    /// Rotates every frame so energy at pitch class `i` moves to `i + k`.
    pub fn rotate(&self, k: i32) -> ChromaSequence {
        let mut vectors = Array2::zeros(self.vectors.dim());
        for i in 0..12 {
            let j = (i as i32 + k).rem_euclid(12) as usize;
            vectors.column_mut(j).assign(&self.vectors.column(i));
        }
        ChromaSequence { vectors, frame_period: self.frame_period }
    }
}

pub fn l1_normalize_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

/// Folds constant-Q bins onto pitch classes.
pub fn chroma_from_cqt(spec: &Spectrogram, layout: &CqtLayout) -> Result<ChromaSequence, AudioError> {
    if !layout.bins_per_octave.is_multiple_of(12) || spec.bins() != layout.n_bins {
        return Err(AudioError::IncompatibleBinLayout(layout.bins_per_octave));
    }
    let mut vectors = Array2::zeros((spec.frames(), 12));
    for k in 0..layout.n_bins {
        let pc = layout.pitch_class(k);
        let mut col = vectors.column_mut(pc);
        col += &spec.magnitudes.column(k);
    }
    l1_normalize_rows(&mut vectors);
    Ok(ChromaSequence { vectors, frame_period: spec.frame_period() })
}

/// Median-filter length used by [`hpss`].
pub const HPSS_KERNEL: usize = 17;

fn median_of(window: &mut [f64]) -> f64 {
    let len = window.len();
    let mid = len / 2;
    let (lower, &mut m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
    if len % 2 == 1 {
        m
    } else {
        0.5 * (m + lower.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Median filter along one axis with a window truncated at the edges.
fn median_filter(x: &Array2<f64>, axis: Axis, len: usize) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    let half = len / 2;
    let mut scratch = Vec::with_capacity(len);
    for (lane_in, mut lane_out) in x.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = lane_in.len();
        for i in 0..n {
            scratch.clear();
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            scratch.extend(lane_in.slice(s![lo..hi]).iter().copied());
            lane_out[i] = median_of(&mut scratch);
        }
    }
    out
}

/// Splits magnitudes into harmonic and percussive parts with soft masks.
pub fn hpss(spec: &Spectrogram) -> Result<(Spectrogram, Spectrogram), AudioError> {
    let (frames, bins) = spec.magnitudes.dim();
    if frames < 3 || bins < 3 {
        return Err(AudioError::TooSmall { frames, bins });
    }
    let h = median_filter(&spec.magnitudes, Axis(0), HPSS_KERNEL);
    let p = median_filter(&spec.magnitudes, Axis(1), HPSS_KERNEL);
    let mut harmonic = Array2::zeros((frames, bins));
    let mut percussive = Array2::zeros((frames, bins));
    ndarray::Zip::from(&mut harmonic)
        .and(&mut percussive)
        .and(&spec.magnitudes)
        .and(&h)
        .and(&p)
        .for_each(|ho, po, &x, &hv, &pv| {
            let (h2, p2) = (hv * hv, pv * pv);
            let mask_h = if h2 + p2 > 0.0 { h2 / (h2 + p2) } else { 0.5 };
            *ho = x * mask_h;
            *po = x * (1.0 - mask_h);
        });
    Ok((spec.with_magnitudes(harmonic), spec.with_magnitudes(percussive)))
}

const BEAT_WINDOW: usize = 2048;
const BEAT_HOP: usize = 512;
const MIN_BPM: f64 = 60.0;
const MAX_BPM: f64 = 200.0;
const FALLBACK_BPM: f64 = 120.0;
/// Weight of tempo regularity against onset strength in beat placement.
const BEAT_TIGHTNESS: f64 = 100.0;

/// Half-wave rectified spectral flux of log magnitudes, one value per frame.
pub fn onset_strength(spec: &Spectrogram) -> Array1<f64> {
    let logmag = spec.magnitudes.mapv(f64::ln_1p);
    let mut env = Array1::zeros(spec.frames());
    for t in 1..spec.frames() {
        let diff = &logmag.row(t) - &logmag.row(t - 1);
        env[t] = diff.iter().map(|d| d.max(0.0)).sum();
    }
    env
}

/// Width in octaves of the log-normal tempo prior centred on 120 BPM.
const TEMPO_PRIOR_OCTAVES: f64 = 1.0;

fn smooth(x: &Array1<f64>) -> Array1<f64> {
    const KERNEL: [f64; 5] = [1.0, 2.0, 3.0, 2.0, 1.0];
    let n = x.len();
    Array1::from_shape_fn(n, |i| {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (j, w) in KERNEL.iter().enumerate() {
            let idx = i as isize + j as isize - 2;
            if idx >= 0 && (idx as usize) < n {
                acc += w * x[idx as usize];
                norm += w;
            }
        }
        acc / norm
    })
}

/// Tempo in BPM from the prior-weighted autocorrelation peak of an onset
/// envelope.
pub fn estimate_tempo(onset: &Array1<f64>, frame_rate: f64) -> Option<f64> {
    let smoothed = smooth(onset);
    let n = smoothed.len();
    let mean = smoothed.mean()?;
    let centred: Vec<f64> = smoothed.iter().map(|v| v - mean).collect();
    let min_lag = (60.0 * frame_rate / MAX_BPM).floor().max(1.0) as usize;
    let max_lag = (60.0 * frame_rate / MIN_BPM).ceil() as usize;
    if max_lag + 2 >= n {
        return None;
    }
    let ac = |lag: usize| -> f64 {
        let raw = centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let octaves = (60.0 * frame_rate / lag as f64 / FALLBACK_BPM).log2() / TEMPO_PRIOR_OCTAVES;
        raw * (-0.5 * octaves * octaves).exp()
    };
    let values: Vec<f64> = (min_lag - 1..=max_lag + 1).map(ac).collect();
    let mut best = None;
    for i in 1..values.len() - 1 {
        let lag = min_lag - 1 + i;
        if lag < min_lag || lag > max_lag {
            continue;
        }
        let peak = values[i] > 0.0 && values[i] >= values[i - 1] && values[i] >= values[i + 1];
        if peak && best.is_none_or(|(_, v)| values[i] > v) {
            best = Some((i, values[i]));
        }
    }
    let (i, _) = best?;
    let (a, b, c) = (values[i - 1], values[i], values[i + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let lag = (min_lag - 1 + i) as f64 + shift;
    let bpm = 60.0 * frame_rate / lag;
    (MIN_BPM * 0.97..=MAX_BPM * 1.03).contains(&bpm).then_some(bpm)
}

/// Places beats by dynamic programming over an onset envelope.
pub fn place_beats(onset: &Array1<f64>, period: f64) -> Vec<usize> {
    let n = onset.len();
    if n == 0 || period <= 1.0 {
        return Vec::new();
    }
    let mut score = vec![0.0; n];
    let mut back: Vec<Option<usize>> = vec![None; n];
    let lo = (period / 2.0).round() as usize;
    let hi = (2.0 * period).round() as usize;
    for t in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for gap in lo.max(1)..=hi {
            if gap > t {
                break;
            }
            let p = t - gap;
            let dev = (gap as f64 / period).ln();
            let cand = score[p] - BEAT_TIGHTNESS * dev * dev;
            if best.is_none_or(|(_, b)| cand > b) {
                best = Some((p, cand));
            }
        }
        match best {
            Some((p, b)) if b > 0.0 => {
                score[t] = onset[t] + b;
                back[t] = Some(p);
            }
            _ => score[t] = onset[t],
        }
    }
    let tail_start = n.saturating_sub(period.ceil() as usize);
    let mut t = (tail_start..n).fold(tail_start, |best, i| if score[i] > score[best] { i } else { best });
    let mut beats = vec![t];
    while let Some(p) = back[t] {
        beats.push(p);
        t = p;
    }
    beats.reverse();
    beats
}

fn fallback_grid(duration: f64) -> BeatGrid {
    BeatGrid::uniform(0.0, duration, 60.0 / FALLBACK_BPM)
}

/// Beat times from the percussive part of the signal. Falls back to a
/// uniform 120 BPM grid when no periodicity is found.
pub fn beat_track(w: &Waveform) -> Result<BeatGrid, AudioError> {
    let min_len = 5 * w.sample_rate as usize;
    if w.samples.len() < min_len {
        return Err(AudioError::SignalTooShort { samples: w.samples.len(), needed: min_len });
    }
    let spec = stft(w, BEAT_WINDOW, BEAT_HOP)?;
    let (_, percussive) = hpss(&spec)?;
    let onset = onset_strength(&percussive);
    let frame_rate = w.sample_rate as f64 / BEAT_HOP as f64;
    let std = onset.std(0.0);
    if !(std > 1e-9) {
        return Ok(fallback_grid(w.duration()));
    }
    let normalized = onset.mapv(|v| v / std);
    let Some(bpm) = estimate_tempo(&normalized, frame_rate) else {
        return Ok(fallback_grid(w.duration()));
    };
    let period = 60.0 * frame_rate / bpm;
    let frames = place_beats(&normalized, period);
    // Frame t covers samples from t*hop; report the window centre.
    let offset = BEAT_WINDOW as f64 / 2.0 / w.sample_rate as f64;
    let mut times: Vec<f64> = frames.iter().map(|&f| f as f64 / frame_rate + offset).collect();
    times.dedup_by(|a, b| *a <= *b);
    if times.len() < 2 {
        return Ok(fallback_grid(w.duration()));
    }
    Ok(BeatGrid::new(times, None).expect("increasing beat times"))
}

/// Tempo of a beat grid from its median inter-beat interval.
pub fn median_tempo(beats: &BeatGrid) -> Option<f64> {
    let mut gaps: Vec<f64> = beats.times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(60.0 / gaps[gaps.len() / 2])
}

/// Mean chroma per inter-beat interval, L1-renormalized. Intervals that
/// contain no frame take the frame nearest to their start.
pub fn beat_sync_chroma(chroma: &ChromaSequence, beats: &BeatGrid) -> ChromaSequence {
    let intervals = beats.times.len().saturating_sub(1);
    let mut vectors = Array2::zeros((intervals, 12));
    let n = chroma.frames();
    if n == 0 {
        return ChromaSequence { vectors, frame_period: 0.0 };
    }
    for (i, w) in beats.times.windows(2).enumerate() {
        let lo = (w[0] / chroma.frame_period).ceil().max(0.0) as usize;
        let hi = ((w[1] / chroma.frame_period).ceil().max(0.0) as usize).min(n);
        let mut row = vectors.row_mut(i);
        if lo < hi {
            let mean = chroma.vectors.slice(s![lo..hi, ..]).mean_axis(Axis(0)).expect("non-empty");
            row.assign(&mean);
        } else {
            let nearest = ((w[0] / chroma.frame_period).round() as usize).min(n - 1);
            row.assign(&chroma.vectors.row(nearest));
        }
    }
    l1_normalize_rows(&mut vectors);
    let period = if intervals > 0 {
        (beats.times[intervals] - beats.times[0]) / intervals as f64
    } else {
        0.0
    };
    ChromaSequence { vectors, frame_period: period }
}
