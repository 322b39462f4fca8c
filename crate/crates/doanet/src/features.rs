//! Input features (Mag + IPD), SPS label encoding, per-source VAD and the
//! angle-sorting branch assignment for MIMO targets.
//!
//! Angles live in [0, 180] degrees measured from the array axis. The SPS
//! grid has 210 indices with a 15 degree pad on each side, so index `i`
//! represents angle `i - 15`.

use ndarray::{Array1, Array2};

use crate::dsp::{ComplexSpectrogram, MultichannelWaveform};
use crate::error::{Error, Result};

pub const SPS_BINS: usize = 210;
pub const SPS_PAD: f64 = 15.0;
pub const DEFAULT_SIGMA: f64 = 8.0;
pub const REFERENCE_CHANNELS: usize = 6;

/// VAD threshold relative to the loudest frame of the utterance, in dB.
pub const VAD_THRESHOLD_DB: f64 = -40.0;

/// Likelihood-over-angle target vector: 210 values in [0, 1].
pub type SpatialPseudoSpectrum = Array1<f64>;

/// Gaussian-bump SPS encoding of a set of ground-truth angles.
///
/// `p(i) = max over angles a of exp(-(i - (a + 15))^2 / sigma^2)`, all zeros
/// for the empty set. Distance is plain index difference, no wraparound.
pub fn encode_sps(angles_deg: &[f64], sigma: f64) -> Result<SpatialPseudoSpectrum> {
    if sigma <= 0.0 {
        return Err(Error::InvalidInput(format!("sigma must be > 0, got {sigma}")));
    }
    for &a in angles_deg {
        if !(0.0..=180.0).contains(&a) {
            return Err(Error::InvalidInput(format!("angle {a} outside [0, 180]")));
        }
    }
    let mut sps = Array1::zeros(SPS_BINS);
    if angles_deg.is_empty() {
        return Ok(sps);
    }
    for i in 0..SPS_BINS {
        let mut best: f64 = 0.0;
        for &a in angles_deg {
            let d = i as f64 - (a + SPS_PAD);
            best = best.max((-(d * d) / (sigma * sigma)).exp());
        }
        sps[i] = best;
    }
    Ok(sps)
}

/// Per-frame input feature rows: `[mag(bins) | cos IPD x pairs | sin IPD x pairs]`
/// where pair k compares channel k+1 against channel 1.
#[derive(Debug, Clone)]
pub struct InputFeatureSequence {
    /// `[frames x dim]`, dim = bins * (1 + 2 * (channels - 1)).
    pub data: Array2<f64>,
    pub bins: usize,
    pub channels: usize,
}

pub fn feature_dim(channels: usize, bins: usize) -> usize {
    bins * (1 + 2 * (channels - 1))
}

/// Mag + IPD features for the production 6-channel array.
pub fn compute_features(spec: &ComplexSpectrogram) -> Result<InputFeatureSequence> {
    if spec.channels() != REFERENCE_CHANNELS {
        return Err(Error::InvalidInput(format!(
            "expected {REFERENCE_CHANNELS} channels, got {}",
            spec.channels()
        )));
    }
    compute_features_any(spec)
}

/// Same layout for an arbitrary channel count (used by reduced test
/// configurations); channel 1 is always the reference.
pub fn compute_features_any(spec: &ComplexSpectrogram) -> Result<InputFeatureSequence> {
    let channels = spec.channels();
    if channels < 2 {
        return Err(Error::InvalidInput("need at least 2 channels for IPD".into()));
    }
    let bins = spec.bins();
    let frames = spec.frames();
    let pairs = channels - 1;
    let dim = feature_dim(channels, bins);
    let mut data = Array2::zeros((frames, dim));
    for t in 0..frames {
        let reference = &spec.values[0][t];
        for f in 0..bins {
            data[[t, f]] = reference[f].norm();
        }
        for p in 0..pairs {
            let other = &spec.values[p + 1][t];
            for f in 0..bins {
                let r = reference[f];
                let o = other[f];
                let denom = r.norm() * o.norm();
                let (c, s) = if denom < 1e-300 {
                    // 0/0 phase: define the IPD as zero.
                    (1.0, 0.0)
                } else {
                    let cross = o * r.conj();
                    (cross.re / denom, cross.im / denom)
                };
                data[[t, bins + p * bins + f]] = c;
                data[[t, bins * (1 + pairs) + p * bins + f]] = s;
            }
        }
    }
    Ok(InputFeatureSequence { data, bins, channels })
}

/// Per-frame energy VAD on channel 1, framed identically to the STFT.
/// A frame is active iff its energy is within 40 dB of the loudest frame.
pub fn vad(wave: &MultichannelWaveform, frame_size: usize, hop: usize) -> Vec<bool> {
    let n = wave.num_samples();
    if n < frame_size {
        return Vec::new();
    }
    let num_frames = (n - frame_size) / hop + 1;
    let ch = &wave.samples[0];
    let energies: Vec<f64> = (0..num_frames)
        .map(|t| (0..frame_size).map(|i| ch[t * hop + i] * ch[t * hop + i]).sum())
        .collect();
    let max = energies.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![false; num_frames];
    }
    let threshold = max * 10f64.powf(VAD_THRESHOLD_DB / 10.0);
    energies.iter().map(|&e| e >= threshold).collect()
}

/// Sorts one frame's per-source activity onto N branches: silent sources
/// become all-zero targets and sort before any angle, remaining angles
/// ascend, branch i takes the i-th slot.
pub fn sort_and_assign(frame_angles: &[Option<f64>], n: usize) -> Result<Vec<Option<f64>>> {
    let mut active: Vec<f64> = frame_angles.iter().filter_map(|a| *a).collect();
    if active.len() > n {
        return Err(Error::InvalidInput(format!(
            "{} active sources exceed {n} branches",
            active.len()
        )));
    }
    active.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = vec![None; n - active.len()];
    out.extend(active.into_iter().map(Some));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Miso,
    Mimo,
}

/// Frame-level training targets for one utterance.
#[derive(Debug, Clone)]
pub struct FrameLabelSet {
    pub mode: LabelMode,
    /// One `[frames x 210]` target per branch (single branch for MISO).
    pub targets: Vec<Array2<f64>>,
    /// `vad[source][frame]`.
    pub vad: Vec<Vec<bool>>,
    /// Ground-truth angle of each source, degrees.
    pub angles: Vec<f64>,
}

impl FrameLabelSet {
    pub fn frames(&self) -> usize {
        self.targets[0].nrows()
    }

    /// Angles active at frame `t` (VAD true), ascending.
    pub fn active_angles(&self, t: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .angles
            .iter()
            .zip(&self.vad)
            .filter(|(_, v)| v[t])
            .map(|(a, _)| *a)
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }
}

/// Builds MISO (pooled SPS) or MIMO (sorted per-branch SPS) targets from
/// per-source angles and VAD tracks.
pub fn build_labels(
    angles: &[f64],
    vad_flags: &[Vec<bool>],
    n: usize,
    mode: LabelMode,
    sigma: f64,
) -> Result<FrameLabelSet> {
    if angles.len() != vad_flags.len() {
        return Err(Error::InvalidInput("angles / vad length mismatch".into()));
    }
    if angles.is_empty() {
        return Err(Error::InvalidInput("need at least one source".into()));
    }
    let frames = vad_flags[0].len();
    if vad_flags.iter().any(|v| v.len() != frames) {
        return Err(Error::InvalidInput("vad tracks have unequal lengths".into()));
    }
    let branches = match mode {
        LabelMode::Miso => 1,
        LabelMode::Mimo => n,
    };
    let mut targets = vec![Array2::zeros((frames, SPS_BINS)); branches];
    for t in 0..frames {
        match mode {
            LabelMode::Miso => {
                let active: Vec<f64> = angles
                    .iter()
                    .zip(vad_flags)
                    .filter(|(_, v)| v[t])
                    .map(|(a, _)| *a)
                    .collect();
                let sps = encode_sps(&active, sigma)?;
                targets[0].row_mut(t).assign(&sps);
            }
            LabelMode::Mimo => {
                let frame_angles: Vec<Option<f64>> = angles
                    .iter()
                    .zip(vad_flags)
                    .map(|(a, v)| if v[t] { Some(*a) } else { None })
                    .collect();
                let assigned = sort_and_assign(&frame_angles, n)?;
                for (b, slot) in assigned.iter().enumerate() {
                    if let Some(a) = slot {
                        let sps = encode_sps(&[*a], sigma)?;
                        targets[b].row_mut(t).assign(&sps);
                    }
                }
            }
        }
    }
    Ok(FrameLabelSet { mode, targets, vad: vad_flags.to_vec(), angles: angles.to_vec() })
}
