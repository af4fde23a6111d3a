//! Gaussian-emission hidden Markov model over the 25-label vocabulary and
//! log-domain Viterbi decoding.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::ChromaSequence;
use crate::chord::{ChordLabel, VOCABULARY_SIZE};

pub const HMM_FORMAT_VERSION: u32 = 1;
/// Ridge added to every covariance diagonal.
pub const COVARIANCE_EPSILON: f64 = 1e-4;
const DIM: usize = 12;

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("training corpus contains no frames")]
    EmptyCorpus,
    #[error("song {song}: {frames} chroma frames but {labels} labels")]
    LengthMismatch { song: usize, frames: usize, labels: usize },
    #[error("no state has a finite emission density at frame {frame}")]
    DegenerateEmission { frame: usize },
    #[error("observation sequence is empty")]
    NoFrames,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("covariance of state {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Initial, transition and Gaussian emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParameters {
    pub version: u32,
    pub p_ini: Vec<f64>,
    pub p_tr: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    /// Row-major 12x12 matrices.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

fn normalized_counts(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// Counts with add-one smoothing, sample means and covariances per label.
/// Labels with fewer than two frames get the template mean (or the single
/// frame) and the pooled per-dimension variance times the identity.
pub fn train_hmm(corpus: &[(ChromaSequence, Vec<ChordLabel>)]) -> Result<HmmParameters, HmmError> {
    let s = VOCABULARY_SIZE;
    let mut ini = vec![1.0; s];
    let mut tr = vec![vec![1.0; s]; s];
    let mut frames: Vec<Vec<[f64; DIM]>> = vec![Vec::new(); s];
    let mut total = 0;
    for (song, (chroma, labels)) in corpus.iter().enumerate() {
        if chroma.frames() != labels.len() {
            return Err(HmmError::LengthMismatch { song, frames: chroma.frames(), labels: labels.len() });
        }
        if labels.is_empty() {
            continue;
        }
        ini[labels[0].vocabulary_index()] += 1.0;
        for w in labels.windows(2) {
            tr[w[0].vocabulary_index()][w[1].vocabulary_index()] += 1.0;
        }
        for (t, label) in labels.iter().enumerate() {
            frames[label.vocabulary_index()].push(chroma.frame(t));
        }
        total += labels.len();
    }
    if total == 0 {
        return Err(HmmError::EmptyCorpus);
    }

    let all: Vec<&[f64; DIM]> = frames.iter().flatten().collect();
    let pooled_variance = {
        let n = all.len() as f64;
        let mut var = 0.0;
        for d in 0..DIM {
            let mean = all.iter().map(|f| f[d]).sum::<f64>() / n;
            var += all.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        }
        (var / DIM as f64).max(1e-3)
    };

    let mut means = Vec::with_capacity(s);
    let mut covariances = Vec::with_capacity(s);
    for (i, observed) in frames.iter().enumerate() {
        let n = observed.len();
        let mean: Vec<f64> = match n {
            0 => {
                let label = ChordLabel::from_vocabulary_index(i).expect("vocabulary index");
                let t = if label.is_no_chord() { [1.0; DIM] } else { label.template() };
                let sum: f64 = t.iter().sum();
                t.iter().map(|v| v / sum).collect()
            }
            _ => (0..DIM).map(|d| observed.iter().map(|f| f[d]).sum::<f64>() / n as f64).collect(),
        };
        let mut cov = vec![vec![0.0; DIM]; DIM];
        if n >= 2 {
            for f in observed {
                for a in 0..DIM {
                    for b in 0..DIM {
                        cov[a][b] += (f[a] - mean[a]) * (f[b] - mean[b]);
                    }
                }
            }
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v /= (n - 1) as f64;
                }
            }
        } else {
            for (d, row) in cov.iter_mut().enumerate() {
                row[d] = pooled_variance;
            }
        }
        for (d, row) in cov.iter_mut().enumerate() {
            row[d] += COVARIANCE_EPSILON;
        }
        means.push(mean);
        covariances.push(cov);
    }

    Ok(HmmParameters {
        version: HMM_FORMAT_VERSION,
        p_ini: normalized_counts(&ini),
        p_tr: tr.iter().map(|row| normalized_counts(row)).collect(),
        means,
        covariances,
    })
}

impl HmmParameters {
    pub fn validate(&self) -> Result<(), HmmError> {
        let s = VOCABULARY_SIZE;
        let bad = |m: &str| Err(HmmError::InvalidParameters(m.to_string()));
        if self.version != HMM_FORMAT_VERSION {
            return bad("unsupported version");
        }
        if self.p_ini.len() != s || self.p_tr.len() != s || self.means.len() != s || self.covariances.len() != s {
            return bad("expected 25 states");
        }
        let is_dist = |v: &[f64]| v.iter().all(|p| *p >= 0.0 && p.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-6;
        if !is_dist(&self.p_ini) {
            return bad("initial probabilities do not sum to 1");
        }
        if self.p_tr.iter().any(|row| row.len() != s || !is_dist(row)) {
            return bad("a transition row does not sum to 1");
        }
        if self.means.iter().any(|m| m.len() != DIM) {
            return bad("means must be 12-dimensional");
        }
        if self.covariances.iter().any(|c| c.len() != DIM || c.iter().any(|r| r.len() != DIM)) {
            return bad("covariances must be 12x12");
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, HmmError> {
        let params: HmmParameters = serde_json::from_slice(&std::fs::read(path)?)?;
        params.validate()?;
        Ok(params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), HmmError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn emissions(&self) -> Result<GaussianEmissions, HmmError> {
        GaussianEmissions::new(&self.means, &self.covariances)
    }
}

/// Multivariate normal densities prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub struct GaussianEmissions {
    states: Vec<(DVector<f64>, Cholesky<f64, Dyn>, f64)>,
}

impl GaussianEmissions {
    pub fn new(means: &[Vec<f64>], covariances: &[Vec<Vec<f64>>]) -> Result<Self, HmmError> {
        let mut states = Vec::with_capacity(means.len());
        for (i, (mean, cov)) in means.iter().zip(covariances).enumerate() {
            let d = mean.len();
            let m = DMatrix::from_fn(d, d, |r, c| cov[r][c]);
            let chol = Cholesky::new(m).ok_or(HmmError::NotPositiveDefinite(i))?;
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            states.push((DVector::from_column_slice(mean), chol, log_norm));
        }
        Ok(GaussianEmissions { states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn log_density(&self, state: usize, x: &[f64]) -> f64 {
        let (mean, chol, log_norm) = &self.states[state];
        let diff = DVector::from_column_slice(x) - mean;
        let z = chol.l_dirty().solve_lower_triangular(&diff).expect("non-singular factor");
        log_norm - 0.5 * z.norm_squared()
    }

    /// T x S matrix of log densities.
    pub fn log_likelihoods(&self, obs: &ChromaSequence) -> Array2<f64> {
        let mut out = Array2::zeros((obs.frames(), self.len()));
        for t in 0..obs.frames() {
            let x = obs.frame(t);
            for s in 0..self.len() {
                out[[t, s]] = self.log_density(s, &x);
            }
        }
        out
    }
}

/// Transitions stored per destination: `incoming[j]` lists `(i, ln P(j|i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransitions {
    pub incoming: Vec<Vec<(usize, f64)>>,
}

impl SparseTransitions {
    pub fn from_dense(p: &[Vec<f64>]) -> Self {
        let n = p.len();
        let mut incoming = vec![Vec::new(); n];
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    incoming[j].push((i, v.ln()));
                }
            }
        }
        SparseTransitions { incoming }
    }
}

/// Most likely state path and its joint log likelihood. `log_ini` has one
/// entry per state, `log_obs` is T x S. Equal scores go to the lower state index.
pub fn viterbi_log(
    log_ini: &[f64],
    transitions: &SparseTransitions,
    log_obs: &Array2<f64>,
) -> Result<(Vec<usize>, f64), HmmError> {
    let (t_len, s) = log_obs.dim();
    if t_len == 0 {
        return Err(HmmError::NoFrames);
    }
    for t in 0..t_len {
        if !log_obs.row(t).iter().any(|v| v.is_finite()) {
            return Err(HmmError::DegenerateEmission { frame: t });
        }
    }
    let mut v: Vec<f64> = (0..s).map(|i| log_ini[i] + log_obs[[0, i]]).collect();
    let mut back = vec![0u32; (t_len - 1) * s];
    let mut next = vec![f64::NEG_INFINITY; s];
    for t in 1..t_len {
        for j in 0..s {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for &(i, lp) in &transitions.incoming[j] {
                let cand = v[i] + lp;
                if cand > best || (cand == best && i < arg) {
                    best = cand;
                    arg = i;
                }
            }
            back[(t - 1) * s + j] = arg as u32;
            next[j] = best + log_obs[[t, j]];
        }
        std::mem::swap(&mut v, &mut next);
    }
    let mut last = 0;
    for i in 1..s {
        if v[i] > v[last] {
            last = i;
        }
    }
    let loglik = v[last];
    let mut path = vec![last; t_len];
    for t in (1..t_len).rev() {
        path[t - 1] = back[(t - 1) * s + path[t]] as usize;
    }
    Ok((path, loglik))
}

/// Decodes a chroma sequence into vocabulary labels.
pub fn viterbi(obs: &ChromaSequence, hmm: &HmmParameters) -> Result<(Vec<ChordLabel>, f64), HmmError> {
    let emissions = hmm.emissions()?;
    let log_obs = emissions.log_likelihoods(obs);
    let log_ini: Vec<f64> = hmm.p_ini.iter().map(|p| p.ln()).collect();
    let (path, loglik) = viterbi_log(&log_ini, &SparseTransitions::from_dense(&hmm.p_tr), &log_obs)?;
    let labels = path
        .into_iter()
        .map(|i| ChordLabel::from_vocabulary_index(i).expect("vocabulary index"))
        .collect();
    Ok((labels, loglik))
}
