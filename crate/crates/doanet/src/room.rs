//! Shoebox image-source simulation and seeded dataset generation.
//!
//! Geometry convention: the room occupies `[0,L] x [0,W] x [0,H]` with
//! `W <= L`. The 6-mic linear array sits on the longer wall (y = 0),
//! centered at `(L/2, 0.5, 2.0)` with its axis along +x; azimuth is
//! measured from that axis, so 0 degrees points toward the near end wall
//! and 90 degrees is broadside into the room. Sources share the array
//! height so the azimuth fully determines the direction.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SirMode};
use crate::dsp::{fft_convolve, write_wav, MultichannelWaveform, WavFormat};
use crate::error::{Error, Result};
use crate::features::vad;

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Consecutive mic spacings in meters.
pub const MIC_SPACINGS: [f64; 5] = [0.04, 0.04, 0.12, 0.04, 0.04];
pub const ARRAY_WALL_OFFSET: f64 = 0.5;
pub const ARRAY_HEIGHT: f64 = 2.0;
/// Margin kept between a source and every wall, and between source and array.
pub const SOURCE_MARGIN: f64 = 0.5;
/// Half-width of the Hann-windowed sinc used for fractional delays.
const SINC_HALF_WIDTH: i64 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Middle,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Middle, SizeClass::Large];

    /// (length range, rt60 range) in meters / seconds.
    pub fn ranges(self) -> ((f64, f64), (f64, f64)) {
        match self {
            SizeClass::Small => ((4.0, 6.0), (0.2, 0.5)),
            SizeClass::Middle => ((6.0, 10.0), (0.3, 0.6)),
            SizeClass::Large => ((10.0, 15.0), (0.4, 0.7)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length_m: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub rt60_s: f64,
    pub size_class: SizeClass,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        let ((lmin, lmax), (rmin, rmax)) = self.size_class.ranges();
        if !(lmin..=lmax).contains(&self.length_m) || !(rmin..=rmax).contains(&self.rt60_s) {
            return Err(Error::InvalidInput(format!(
                "room outside {:?} ranges: length {}, rt60 {}",
                self.size_class, self.length_m, self.rt60_s
            )));
        }
        if !(3.0 <= self.width_m && self.width_m <= self.length_m) {
            return Err(Error::InvalidInput(format!("width {} outside [3, length]", self.width_m)));
        }
        if !(3.0..=3.5).contains(&self.height_m) {
            return Err(Error::InvalidInput(format!("height {} outside [3, 3.5]", self.height_m)));
        }
        Ok(())
    }
}

/// Uniform sampling within the class intervals; width is resampled from
/// [3, class max] until it does not exceed the drawn length.
pub fn sample_room(size_class: SizeClass, rng: &mut impl Rng) -> RoomSpec {
    let ((lmin, lmax), (rmin, rmax)) = size_class.ranges();
    let length_m = rng.gen_range(lmin..=lmax);
    let mut width_m = rng.gen_range(3.0..=lmax);
    while width_m > length_m {
        width_m = rng.gen_range(3.0..=lmax);
    }
    let height_m = rng.gen_range(3.0..=3.5);
    let rt60_s = rng.gen_range(rmin..=rmax);
    RoomSpec { length_m, width_m, height_m, rt60_s, size_class }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
    pub center: [f64; 3],
    /// Unit vector along the array, parallel to its wall.
    pub axis: [f64; 3],
}

/// Offsets of the 6 mics from the array center along its axis.
pub fn mic_offsets() -> [f64; 6] {
    let total: f64 = MIC_SPACINGS.iter().sum();
    let mut offsets = [0.0; 6];
    let mut acc = -total / 2.0;
    offsets[0] = acc;
    for (i, s) in MIC_SPACINGS.iter().enumerate() {
        acc += s;
        offsets[i + 1] = acc;
    }
    offsets
}

/// Array centered on the longer wall's midpoint, 0.5 m into the room at
/// 2 m height, axis parallel to that wall.
pub fn place_array(room: &RoomSpec) -> Result<ArrayGeometry> {
    let aperture = MIC_SPACINGS.iter().sum::<f64>();
    if room.width_m < ARRAY_WALL_OFFSET * 2.0
        || room.height_m < ARRAY_HEIGHT
        || room.length_m < aperture
    {
        return Err(Error::InvalidInput("room too small for the array".into()));
    }
    let center = [room.length_m / 2.0, ARRAY_WALL_OFFSET, ARRAY_HEIGHT];
    let mic_positions = mic_offsets()
        .iter()
        .map(|&o| [center[0] + o, center[1], center[2]])
        .collect();
    Ok(ArrayGeometry { mic_positions, center, axis: [1.0, 0.0, 0.0] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeClass {
    Near,
    Medium,
    Far,
}

impl RangeClass {
    pub const ALL: [RangeClass; 3] = [RangeClass::Near, RangeClass::Medium, RangeClass::Far];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub angle_deg: f64,
    pub range_class: RangeClass,
    pub position: [f64; 3],
    pub distance_m: f64,
}

/// Maximum usable source distance along the ray at `angle_deg`: the exit
/// distance from the margin-shrunk room, minus one further margin for the
/// array itself.
pub fn max_source_distance(room: &RoomSpec, array: &ArrayGeometry, angle_deg: f64) -> Result<f64> {
    if !(0.0..=180.0).contains(&angle_deg) {
        return Err(Error::InvalidInput(format!("angle {angle_deg} outside [0, 180]")));
    }
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.cos(), theta.sin());
    let (cx, cy) = (array.center[0], array.center[1]);
    let mut exit = f64::INFINITY;
    if dx > 1e-12 {
        exit = exit.min((room.length_m - SOURCE_MARGIN - cx) / dx);
    } else if dx < -1e-12 {
        exit = exit.min((SOURCE_MARGIN - cx) / dx);
    }
    if dy > 1e-12 {
        exit = exit.min((room.width_m - SOURCE_MARGIN - cy) / dy);
    }
    Ok(exit - SOURCE_MARGIN)
}

/// Splits the feasible radial interval `[0.5, r_max]` into three equal
/// thirds and samples a distance uniformly within the requested third.
pub fn place_source(
    room: &RoomSpec,
    array: &ArrayGeometry,
    angle_deg: f64,
    range_class: RangeClass,
    rng: &mut impl Rng,
) -> Result<SourcePlacement> {
    let r_max = max_source_distance(room, array, angle_deg)?;
    if r_max < SOURCE_MARGIN * 2.0 {
        return Err(Error::Placement(format!(
            "angle {angle_deg} leaves no room: r_max {r_max:.3} m"
        )));
    }
    let third = (r_max - SOURCE_MARGIN) / 3.0;
    let (lo, hi) = match range_class {
        RangeClass::Near => (SOURCE_MARGIN, SOURCE_MARGIN + third),
        RangeClass::Medium => (SOURCE_MARGIN + third, SOURCE_MARGIN + 2.0 * third),
        RangeClass::Far => (SOURCE_MARGIN + 2.0 * third, r_max),
    };
    let r = rng.gen_range(lo..=hi);
    let theta = angle_deg.to_radians();
    let position = [
        array.center[0] + r * theta.cos(),
        array.center[1] + r * theta.sin(),
        ARRAY_HEIGHT,
    ];
    let recomputed = source_angle(array, &position);
    debug_assert!((recomputed - angle_deg).abs() < 0.1);
    Ok(SourcePlacement { angle_deg, range_class, position, distance_m: r })
}

/// Azimuth of a position as seen from the array center, degrees in [0, 180].
pub fn source_angle(array: &ArrayGeometry, position: &[f64; 3]) -> f64 {
    let dx = position[0] - array.center[0];
    let dy = position[1] - array.center[1];
    dy.atan2(dx).to_degrees()
}

/// Uniform wall reflection coefficient from Eyring's inverse formula.
pub fn eyring_reflection(room: &RoomSpec) -> f64 {
    let v = room.length_m * room.width_m * room.height_m;
    let s = 2.0
        * (room.length_m * room.width_m
            + room.length_m * room.height_m
            + room.width_m * room.height_m);
    let absorption = 1.0 - (-0.161 * v / (s * room.rt60_s)).exp();
    (1.0 - absorption).sqrt()
}

fn windowed_sinc(x: f64) -> f64 {
    let half = SINC_HALF_WIDTH as f64;
    if x.abs() > half {
        return 0.0;
    }
    let sinc = if x.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    };
    let hann = 0.5 * (1.0 + (std::f64::consts::PI * x / half).cos());
    sinc * hann
}

/// Image-source RIR with uniform `reflection` coefficient, truncated at
/// `duration_s`. Each image contributes `reflection^order / (4 pi d)` at
/// delay `d / c` through an 81-tap Hann-windowed sinc. Reflected-image
/// kernels are made zero-mean so the all-positive pulses cannot pile up
/// into a nonphysical low-frequency pedestal that slows the measured
/// decay; the direct path keeps its exact 1/(4 pi d) peak.
pub fn simulate_rir_custom(
    room: &RoomSpec,
    src: &[f64; 3],
    mic: &[f64; 3],
    fs: u32,
    reflection: f64,
    duration_s: f64,
) -> Vec<f64> {
    let dims = [room.length_m, room.width_m, room.height_m];
    let max_dist = duration_s * SPEED_OF_SOUND;
    let min_dim = dims.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_order = if reflection == 0.0 {
        0
    } else {
        (duration_s * SPEED_OF_SOUND / min_dim).ceil() as i64 + 1
    };
    let len = (duration_s * fs as f64).ceil() as usize + SINC_HALF_WIDTH as usize + 1;
    let mut h = vec![0.0; len];

    // Per-axis image coordinates and reflection counts. Images farther than
    // max_dist along a single axis can never pass the distance cull, so each
    // axis only needs enough orders to span that radius.
    let axis_images = |axis: usize| -> Vec<(f64, u32)> {
        let mut v = Vec::new();
        let l = dims[axis];
        let s = src[axis];
        let order = max_order.min((max_dist / (2.0 * l)).ceil() as i64 + 1);
        for n in -order..=order {
            for q in [0i64, 1] {
                let coord = 2.0 * n as f64 * l + if q == 0 { s } else { -s };
                let refl = (n - q).unsigned_abs() as u32 + n.unsigned_abs() as u32;
                v.push((coord, refl));
            }
        }
        v
    };
    let xs = axis_images(0);
    let ys = axis_images(1);
    let zs = axis_images(2);

    let fs = fs as f64;
    let num_taps = (2 * SINC_HALF_WIDTH + 2) as usize;
    let mut kernel = vec![0.0; num_taps];
    for &(ix, rx) in &xs {
        let ddx = ix - mic[0];
        for &(iy, ry) in &ys {
            let ddy = iy - mic[1];
            let planar = ddx * ddx + ddy * ddy;
            if planar > max_dist * max_dist {
                continue;
            }
            for &(iz, rz) in &zs {
                let ddz = iz - mic[2];
                let dist = (planar + ddz * ddz).sqrt();
                if dist > max_dist || dist < 1e-6 {
                    continue;
                }
                let total_refl = rx + ry + rz;
                let amp = reflection.powi(total_refl as i32) / (4.0 * std::f64::consts::PI * dist);
                if amp.abs() < 1e-12 {
                    continue;
                }
                let delay = dist / SPEED_OF_SOUND * fs;
                let base = delay.floor() as i64 - SINC_HALF_WIDTH;
                let mut mean = 0.0;
                for (k, slot) in kernel.iter_mut().enumerate() {
                    let v = windowed_sinc((base + k as i64) as f64 - delay);
                    *slot = v;
                    mean += v;
                }
                // The direct path keeps its raw kernel: a single pulse adds
                // no meaningful pedestal and its peak must stay 1/(4 pi d).
                mean /= num_taps as f64;
                if total_refl == 0 {
                    mean = 0.0;
                }
                for (k, &v) in kernel.iter().enumerate() {
                    let j = base + k as i64;
                    if j >= 0 && (j as usize) < len {
                        h[j as usize] += amp * (v - mean);
                    }
                }
            }
        }
    }
    h
}

/// RIR for the room's own reverberation time, with the wall coefficient
/// derived from rt60 by Eyring's formula.
pub fn simulate_rir(room: &RoomSpec, src: &[f64; 3], mic: &[f64; 3], fs: u32) -> Vec<f64> {
    simulate_rir_custom(room, src, mic, fs, eyring_reflection(room), room.rt60_s)
}

/// Reverberation time estimated from the Schroeder backward integral,
/// extrapolated from the -5 dB to -25 dB span.
pub fn schroeder_t60(rir: &[f64], fs: u32) -> Option<f64> {
    let mut edc: Vec<f64> = Vec::with_capacity(rir.len());
    let mut acc = 0.0;
    for &v in rir.iter().rev() {
        acc += v * v;
        edc.push(acc);
    }
    edc.reverse();
    let total = edc.first().copied()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / total).log10()).collect();
    let t_at = |level: f64| db.iter().position(|&d| d <= level).map(|i| i as f64 / fs as f64);
    let t5 = t_at(-5.0)?;
    let t25 = t_at(-25.0)?;
    if t25 <= t5 {
        return None;
    }
    Some(3.0 * (t25 - t5))
}

/// Seeded description of one simulated mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub sources: Vec<SourcePlacement>,
    /// Per-source SIR in dB against source 0 (entry 0 is always 0).
    pub sir_db: Vec<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self, min_separation_deg: f64) -> Result<()> {
        if self.sources.len() < 2 {
            return Err(Error::InvalidInput("mixture needs at least 2 sources".into()));
        }
        if self.sir_db.len() != self.sources.len() {
            return Err(Error::InvalidInput("sir_db length mismatch".into()));
        }
        for (i, a) in self.sources.iter().enumerate() {
            for b in self.sources.iter().skip(i + 1) {
                if (a.angle_deg - b.angle_deg).abs() < min_separation_deg {
                    return Err(Error::InvalidInput(format!(
                        "angles {} and {} closer than {min_separation_deg} degrees",
                        a.angle_deg, b.angle_deg
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Convolves each dry source with its RIRs, scales interferers to the
/// requested SIR (measured on channel 1 over voice-active frames) and sums.
/// Returns the mixture and the scaled per-source images; the mixture equals
/// their exact sum.
pub fn render_mixture(
    spec: &MixtureSpec,
    dry_sources: &[Vec<f64>],
    fs: u32,
    frame_size: usize,
    hop: usize,
) -> Result<(MultichannelWaveform, Vec<MultichannelWaveform>)> {
    if dry_sources.len() != spec.sources.len() {
        return Err(Error::InvalidInput("dry source count mismatch".into()));
    }
    let n = dry_sources
        .first()
        .map(|d| d.len())
        .ok_or_else(|| Error::InvalidInput("no dry sources".into()))?;
    if dry_sources.iter().any(|d| d.len() != n) {
        return Err(Error::InvalidInput("dry sources must have equal length".into()));
    }

    let mics = &spec.array.mic_positions;
    let mut images: Vec<MultichannelWaveform> = Vec::with_capacity(spec.sources.len());
    for (src, dry) in spec.sources.iter().zip(dry_sources) {
        let channels: Vec<Vec<f64>> = mics
            .iter()
            .map(|mic| {
                let rir = simulate_rir(&spec.room, &src.position, mic, fs);
                let mut y = fft_convolve(dry, &rir);
                y.truncate(n);
                y
            })
            .collect();
        images.push(MultichannelWaveform::new(channels, fs)?);
    }

    // Active-frame power on channel 1 of each reverberant image.
    let mut powers = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let flags = vad(img, frame_size, hop);
        let mut energy = 0.0;
        let mut count = 0usize;
        for (t, &f) in flags.iter().enumerate() {
            if f {
                for i in 0..frame_size {
                    let v = img.samples[0][t * hop + i];
                    energy += v * v;
                }
                count += frame_size;
            }
        }
        if count == 0 || energy <= 0.0 {
            return Err(Error::InvalidInput(format!("source {k} is silent (zero active power)")));
        }
        powers.push(energy / count as f64);
    }

    for (k, img) in images.iter_mut().enumerate() {
        let scale = if k == 0 {
            1.0
        } else {
            (powers[0] / (powers[k] * 10f64.powf(spec.sir_db[k] / 10.0))).sqrt()
        };
        if scale != 1.0 {
            for ch in img.samples.iter_mut() {
                ch.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }

    let mut mixture = MultichannelWaveform::zeros(mics.len(), n, fs);
    for img in &images {
        for (mch, ich) in mixture.samples.iter_mut().zip(&img.samples) {
            for (m, i) in mch.iter_mut().zip(ich) {
                *m += i;
            }
        }
    }
    Ok((mixture, images))
}

/// Deterministic desk-scale dry source: a harmonic complex with randomized
/// phases plus a little noise, amplitude-modulated, with one silence gap.
pub fn synth_dry_source(rng: &mut impl Rng, num_samples: usize, fs: u32) -> Vec<f64> {
    let fs = fs as f64;
    let fundamental = rng.gen_range(110.0..320.0);
    let num_harmonics = ((4000.0 / fundamental) as usize).max(3);
    let harmonics: Vec<(f64, f64, f64)> = (1..=num_harmonics)
        .map(|k| {
            let freq = fundamental * k as f64;
            let amp = rng.gen_range(0.3..1.0) / k as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (freq, amp, phase)
        })
        .collect();
    let am_rate = rng.gen_range(1.0..4.0);
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let gap_len = (num_samples as f64 * rng.gen_range(0.15..0.25)) as usize;
    let gap_start = rng.gen_range(0..num_samples - gap_len);
    let ramp = (0.01 * fs) as usize;

    // Broadband aspirated component at a power comparable to the harmonic
    // stack, so every frequency bin carries a usable inter-mic phase cue.
    let tone_rms = (harmonics.iter().map(|&(_, a, _)| a * a).sum::<f64>() / 2.0).sqrt();
    let noise_gain = tone_rms * rng.gen_range(0.4..1.0);
    let tilt = rng.gen_range(0.2..0.6);
    let mut lp = 0.0;

    let mut out: Vec<f64> = (0..num_samples)
        .map(|i| {
            let t = i as f64 / fs;
            let am = 1.0 + 0.4 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
            let tone: f64 = harmonics
                .iter()
                .map(|&(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            let white = rng.gen_range(-1.0f64..1.0);
            lp += tilt * (white - lp);
            let noise = noise_gain * (white * 0.5 + lp);
            am * (tone + noise)
        })
        .collect();

    // Silence gap with short cosine ramps.
    for i in 0..gap_len {
        let idx = gap_start + i;
        let edge = i.min(gap_len - 1 - i);
        let g = if edge < ramp {
            let x = edge as f64 / ramp as f64;
            0.5 * (1.0 + (std::f64::consts::PI * x).cos())
        } else {
            0.0
        };
        out[idx] *= g;
    }

    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let s = 0.5 / peak;
        out.iter_mut().for_each(|v| *v *= s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRecord {
    pub angle_deg: f64,
    pub range_class: RangeClass,
    pub position: [f64; 3],
    pub distance_m: f64,
    pub sir_db: f64,
    /// Paths relative to the dataset root.
    pub dry_path: String,
    pub image_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub sources: Vec<SourceRecord>,
    pub sir_mode: SirMode,
    pub mixture_path: String,
}

impl ManifestEntry {
    pub fn angles(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.angle_deg).collect()
    }

    pub fn min_angle_gap(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.sources.iter().enumerate() {
            for b in self.sources.iter().skip(i + 1) {
                min = min.min((a.angle_deg - b.angle_deg).abs());
            }
        }
        min
    }
}

/// Seeded description of a generated dataset: rooms, geometries, angles,
/// SIRs and file paths. Regenerating from the same config reproduces it
/// byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop: usize,
    /// The array sits on the longer wall; recorded because the choice is a
    /// convention, not physics.
    pub array_convention: String,
    pub entries: Vec<ManifestEntry>,
}

impl ExperimentManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("manifest {}: {e}", path.display())))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent RNG stream per (seed, split, utterance).
pub fn utterance_seed(base: u64, split: Split, index: usize) -> u64 {
    let split_id = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    splitmix64(splitmix64(base ^ (split_id << 56)) ^ index as u64)
}

const MAX_ATTEMPTS: usize = 500;

/// Samples integer angles in [0, 180] with pairwise separation at least
/// `min_sep`; with `small_angle` at least one pair must be closer than 15.
fn sample_angles(rng: &mut impl Rng, count: usize, min_sep: f64, small_angle: bool) -> Result<Vec<f64>> {
    'outer: for _ in 0..MAX_ATTEMPTS {
        let mut angles: Vec<f64> = Vec::with_capacity(count);
        for _ in 0..count {
            let a = rng.gen_range(0..=180) as f64;
            if angles.iter().any(|&b| (a - b).abs() < min_sep) {
                continue 'outer;
            }
            angles.push(a);
        }
        if small_angle {
            let has_close = angles.iter().enumerate().any(|(i, &a)| {
                angles.iter().skip(i + 1).any(|&b| (a - b).abs() < 15.0)
            });
            if !has_close {
                continue 'outer;
            }
        }
        return Ok(angles);
    }
    Err(Error::Generation(format!(
        "could not sample {count} angles with separation {min_sep} after {MAX_ATTEMPTS} attempts"
    )))
}

fn generate_entry(cfg: &RunConfig, split: Split, index: usize, root: &Path) -> Result<ManifestEntry> {
    let seed = utterance_seed(cfg.dataset.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = cfg.dataset.sample_rate;
    let num_samples = cfg.samples_per_utterance();
    if num_samples < cfg.stft.frame_size {
        return Err(Error::Generation("utterance shorter than one frame".into()));
    }

    for _ in 0..MAX_ATTEMPTS {
        let size_class = SizeClass::ALL[rng.gen_range(0..3)];
        let room = sample_room(size_class, &mut rng);
        let array = place_array(&room)?;
        let count = cfg.dataset.source_counts[rng.gen_range(0..cfg.dataset.source_counts.len())];
        let angles = sample_angles(&mut rng, count, cfg.dataset.min_separation_deg, cfg.dataset.small_angle)?;

        let mut sources = Vec::with_capacity(count);
        let mut ok = true;
        for &angle in &angles {
            let range_class = RangeClass::ALL[rng.gen_range(0..3)];
            match place_source(&room, &array, angle, range_class, &mut rng) {
                Ok(p) => sources.push(p),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }

        let mut sir_db = vec![0.0; count];
        if cfg.dataset.sir_mode == SirMode::Random {
            for s in sir_db.iter_mut().skip(1) {
                *s = rng.gen_range(-10.0..=10.0);
            }
        }
        let spec = MixtureSpec { room, array: array.clone(), sources, sir_db, seed };
        spec.validate(cfg.dataset.min_separation_deg)?;

        let dry: Vec<Vec<f64>> =
            (0..count).map(|_| synth_dry_source(&mut rng, num_samples, fs)).collect();
        let (mixture, images) =
            render_mixture(&spec, &dry, fs, cfg.stft.frame_size, cfg.stft.hop)?;

        let rel_dir = format!("audio/{}/utt{index:04}", split.name());
        let dir = root.join(&rel_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mixture_path = format!("{rel_dir}/mixture.wav");
        write_wav(&root.join(&mixture_path), &mixture, WavFormat::Float32)?;
        let mut records = Vec::with_capacity(count);
        for (k, (placement, image)) in spec.sources.iter().zip(&images).enumerate() {
            let dry_path = format!("{rel_dir}/dry{k}.wav");
            let image_path = format!("{rel_dir}/image{k}.wav");
            let dry_wave = MultichannelWaveform::new(vec![dry[k].clone()], fs)?;
            write_wav(&root.join(&dry_path), &dry_wave, WavFormat::Float32)?;
            write_wav(&root.join(&image_path), image, WavFormat::Float32)?;
            records.push(SourceRecord {
                angle_deg: placement.angle_deg,
                range_class: placement.range_class,
                position: placement.position,
                distance_m: placement.distance_m,
                sir_db: spec.sir_db[k],
                dry_path,
                image_path,
            });
        }
        return Ok(ManifestEntry {
            id: format!("{}/utt{index:04}", split.name()),
            split,
            seed,
            room: spec.room,
            array,
            sources: records,
            sir_mode: cfg.dataset.sir_mode,
            mixture_path,
        });
    }
    Err(Error::Generation(format!("utterance {index} ({}) unsatisfiable", split.name())))
}

/// Generates all three splits under `root` and writes `manifest.json`.
/// Utterances are independent seeded streams, so generation parallelizes
/// without affecting the result.
pub fn generate_dataset(cfg: &RunConfig, root: &Path) -> Result<ExperimentManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&split| {
            let count = match split {
                Split::Train => cfg.dataset.train_count,
                Split::Val => cfg.dataset.val_count,
                Split::Test => cfg.dataset.test_count,
            };
            (0..count).map(move |i| (split, i))
        })
        .collect();

    let entries: Result<Vec<ManifestEntry>> = jobs
        .par_iter()
        .map(|&(split, index)| generate_entry(cfg, split, index, root))
        .collect();

    let manifest = ExperimentManifest {
        config_hash: cfg.data_hash(),
        seed: cfg.dataset.seed,
        sample_rate: cfg.dataset.sample_rate,
        frame_size: cfg.stft.frame_size,
        hop: cfg.stft.hop,
        array_convention: "longer-wall-y0-axis-x".into(),
        entries: entries?,
    };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sampled_rooms_respect_class_ranges() {
        let mut r = rng(1);
        for _ in 0..50 {
            let small = sample_room(SizeClass::Small, &mut r);
            assert!((4.0..=6.0).contains(&small.length_m));
            assert!((0.2..=0.5).contains(&small.rt60_s));
            small.validate().unwrap();

            let large = sample_room(SizeClass::Large, &mut r);
            assert!((10.0..=15.0).contains(&large.length_m));
            assert!((0.4..=0.7).contains(&large.rt60_s));
            large.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_gives_identical_room() {
        let a = sample_room(SizeClass::Middle, &mut rng(42));
        let b = sample_room(SizeClass::Middle, &mut rng(42));
        assert_eq!(a, b);
    }

    fn test_room() -> RoomSpec {
        RoomSpec {
            length_m: 6.0,
            width_m: 4.0,
            height_m: 3.0,
            rt60_s: 0.3,
            size_class: SizeClass::Small,
        }
    }

    #[test]
    fn array_sits_on_longer_wall_midpoint() {
        let array = place_array(&test_room()).unwrap();
        assert_eq!(array.center, [3.0, 0.5, 2.0]);
        assert_eq!(array.mic_positions.len(), 6);
        assert!((array.mic_positions[0][0] - (3.0 - 0.14)).abs() < 1e-12);
        assert!((array.mic_positions[5][0] - (3.0 + 0.14)).abs() < 1e-12);
        // Central spacing is the wide one.
        let gap = array.mic_positions[3][0] - array.mic_positions[2][0];
        assert!((gap - 0.12).abs() < 1e-12);
        // Axis parallel to the wall y = 0 (normal [0,1,0]).
        assert_eq!(array.axis[1], 0.0);
    }

    #[test]
    fn broadside_feasible_range_matches_hand_arithmetic() {
        let room = test_room();
        let array = place_array(&room).unwrap();
        let r_max = max_source_distance(&room, &array, 90.0).unwrap();
        assert!((r_max - 2.5).abs() < 1e-12, "r_max {r_max}");
        // Thirds of [0.5, 2.5].
        let mut r = rng(9);
        for (class, lo, hi) in [
            (RangeClass::Near, 0.5, 0.5 + 2.0 / 3.0),
            (RangeClass::Medium, 0.5 + 2.0 / 3.0, 0.5 + 4.0 / 3.0),
            (RangeClass::Far, 0.5 + 4.0 / 3.0, 2.5),
        ] {
            for _ in 0..20 {
                let p = place_source(&room, &array, 90.0, class, &mut r).unwrap();
                assert!(p.distance_m >= lo - 1e-9 && p.distance_m <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn endfire_range_limited_by_end_wall() {
        let room = test_room();
        let array = place_array(&room).unwrap();
        // Angle 0 walks along +x from x = 3 toward the margin at x = 5.5.
        let r_max = max_source_distance(&room, &array, 0.0).unwrap();
        assert!((r_max - 2.0).abs() < 1e-12, "r_max {r_max}");
    }

    #[test]
    fn placed_source_angle_is_consistent() {
        let room = test_room();
        let array = place_array(&room).unwrap();
        let mut r = rng(5);
        for angle in [0.0, 37.0, 90.0, 144.0, 180.0] {
            let p = place_source(&room, &array, angle, RangeClass::Medium, &mut r).unwrap();
            assert!((source_angle(&array, &p.position) - angle).abs() < 0.1);
            // Margins hold.
            assert!(p.position[0] >= 0.5 && p.position[0] <= room.length_m - 0.5);
            assert!(p.position[1] >= 0.5 && p.position[1] <= room.width_m - 0.5);
            assert!(p.distance_m >= 0.5);
        }
    }

    #[test]
    fn anechoic_rir_is_a_single_calibrated_pulse() {
        let room = test_room();
        // 3.43 m puts the direct pulse at exactly sample 160.
        let src = [3.0, 0.5 + 3.43, 2.0];
        let mic = [3.0, 0.5, 2.0];
        let h = simulate_rir_custom(&room, &src, &mic, 16_000, 0.0, 0.5);
        let peak_idx = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak_idx, 160);
        let expected = 1.0 / (4.0 * std::f64::consts::PI * 3.43);
        assert!((h[160] - expected).abs() / expected < 0.01, "amp {}", h[160]);
        // Energy concentrated at the pulse.
        let tail: f64 = h.iter().enumerate().filter(|(i, _)| (*i as i64 - 160).abs() > 41).map(|(_, v)| v * v).sum();
        assert!(tail < 1e-12);
    }

    #[test]
    fn doubling_distance_halves_peak_amplitude() {
        let room = RoomSpec { length_m: 12.0, width_m: 10.0, height_m: 3.5, rt60_s: 0.4, size_class: SizeClass::Large };
        let mic = [6.0, 0.5, 2.0];
        let near = simulate_rir_custom(&room, &[6.0, 2.5, 2.0], &mic, 16_000, 0.0, 0.2);
        let far = simulate_rir_custom(&room, &[6.0, 4.5, 2.0], &mic, 16_000, 0.0, 0.2);
        // Pulse energy is delay-invariant, so RMS tracks amplitude.
        let rms = |h: &[f64]| h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ratio = rms(&near) / rms(&far);
        assert!((ratio - 2.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn inter_mic_delay_matches_geometry() {
        let room = test_room();
        let array = place_array(&room).unwrap();
        let src = [4.5, 2.5, 2.0];
        let fs = 16_000u32;
        let mic1 = array.mic_positions[0];
        let mic6 = array.mic_positions[5];
        let d1 = ((src[0] - mic1[0]).powi(2) + (src[1] - mic1[1]).powi(2)).sqrt();
        let d6 = ((src[0] - mic6[0]).powi(2) + (src[1] - mic6[1]).powi(2)).sqrt();
        let h1 = simulate_rir_custom(&room, &src, &mic1, fs, 0.0, 0.2);
        let h6 = simulate_rir_custom(&room, &src, &mic6, fs, 0.0, 0.2);
        // Sub-sample delay via the energy centroid around each peak.
        let centroid = |h: &[f64]| {
            let num: f64 = h.iter().enumerate().map(|(i, v)| i as f64 * v * v).sum();
            let den: f64 = h.iter().map(|v| v * v).sum();
            num / den
        };
        let measured = centroid(&h6) - centroid(&h1);
        let expected = (d6 - d1) / SPEED_OF_SOUND * fs as f64;
        assert!((measured - expected).abs() < 0.5, "measured {measured}, expected {expected}");
    }

    #[test]
    fn schroeder_estimate_tracks_requested_rt60() {
        let room = RoomSpec { length_m: 8.0, width_m: 6.0, height_m: 3.2, rt60_s: 0.45, size_class: SizeClass::Middle };
        let array = place_array(&room).unwrap();
        let h = simulate_rir(&room, &[5.0, 3.0, 2.0], &array.mic_positions[2], 16_000);
        let t60 = schroeder_t60(&h, 16_000).unwrap();
        assert!(
            (t60 - 0.45).abs() / 0.45 < 0.3,
            "schroeder t60 {t60} vs requested 0.45"
        );
    }

    fn toy_mixture_spec(sir_db: Vec<f64>) -> (MixtureSpec, Vec<Vec<f64>>) {
        let room = test_room();
        let array = place_array(&room).unwrap();
        let mut r = rng(77);
        let s1 = place_source(&room, &array, 60.0, RangeClass::Near, &mut r).unwrap();
        let s2 = place_source(&room, &array, 120.0, RangeClass::Medium, &mut r).unwrap();
        let spec = MixtureSpec { room, array, sources: vec![s1, s2], sir_db, seed: 1 };
        let dry = vec![
            synth_dry_source(&mut r, 16_000, 16_000),
            synth_dry_source(&mut r, 16_000, 16_000),
        ];
        (spec, dry)
    }

    fn active_power(img: &MultichannelWaveform) -> f64 {
        let flags = vad(img, 512, 256);
        let mut e = 0.0;
        let mut c = 0usize;
        for (t, &f) in flags.iter().enumerate() {
            if f {
                for i in 0..512 {
                    let v = img.samples[0][t * 256 + i];
                    e += v * v;
                }
                c += 512;
            }
        }
        e / c as f64
    }

    #[test]
    fn sir_zero_equalizes_active_power() {
        let (spec, dry) = toy_mixture_spec(vec![0.0, 0.0]);
        let (_, images) = render_mixture(&spec, &dry, 16_000, 512, 256).unwrap();
        let p0 = active_power(&images[0]);
        let p1 = active_power(&images[1]);
        assert!((p0 - p1).abs() / p0 < 1e-9, "{p0} vs {p1}");
    }

    #[test]
    fn sir_ten_db_scales_interferer_to_tenth_power() {
        let (spec, dry) = toy_mixture_spec(vec![0.0, 10.0]);
        let (_, images) = render_mixture(&spec, &dry, 16_000, 512, 256).unwrap();
        let p0 = active_power(&images[0]);
        let p1 = active_power(&images[1]);
        assert!((p1 / p0 - 0.1).abs() < 1e-9, "ratio {}", p1 / p0);
    }

    #[test]
    fn mixture_is_exact_sum_of_images() {
        let (spec, dry) = toy_mixture_spec(vec![0.0, -4.0]);
        let (mixture, images) = render_mixture(&spec, &dry, 16_000, 512, 256).unwrap();
        for ch in 0..6 {
            for i in 0..mixture.num_samples() {
                let sum = images[0].samples[ch][i] + images[1].samples[ch][i];
                assert_eq!(mixture.samples[ch][i], sum);
            }
        }
    }

    #[test]
    fn silent_dry_source_is_an_input_error() {
        let (spec, mut dry) = toy_mixture_spec(vec![0.0, 0.0]);
        dry[1].iter_mut().for_each(|v| *v = 0.0);
        assert!(render_mixture(&spec, &dry, 16_000, 512, 256).is_err());
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.train_count = 3;
        cfg.dataset.val_count = 1;
        cfg.dataset.test_count = 1;
        cfg.dataset.utterance_secs = 0.5;
        cfg.stft.frame_size = 256;
        cfg.stft.hop = 128;
        cfg
    }

    #[test]
    fn generated_dataset_respects_constraints_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.split(Split::Train).count(), 3);
        assert_eq!(manifest.split(Split::Val).count(), 1);
        assert_eq!(manifest.split(Split::Test).count(), 1);
        for e in &manifest.entries {
            assert_eq!(e.sources.len(), 2);
            assert!(e.min_angle_gap() >= 5.0);
            for s in &e.sources {
                assert!(dir.path().join(&s.dry_path).exists());
                assert!(dir.path().join(&s.image_path).exists());
                assert!(s.angle_deg.fract() == 0.0);
            }
            assert!(dir.path().join(&e.mixture_path).exists());
        }

        let json1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path()).unwrap();
        let json2 = std::fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(json1, json2, "manifest must regenerate byte-identically");
    }

    #[test]
    fn small_angle_config_forces_a_close_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.dataset.small_angle = true;
        cfg.dataset.train_count = 5;
        cfg.dataset.val_count = 0;
        cfg.dataset.test_count = 0;
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        for e in &manifest.entries {
            assert!(e.min_angle_gap() < 15.0, "entry {} gap {}", e.id, e.min_angle_gap());
        }
    }

    #[test]
    fn three_source_entries_keep_pairwise_separation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.dataset.source_counts = vec![3];
        cfg.model.n_max = 3;
        cfg.dataset.train_count = 4;
        cfg.dataset.val_count = 0;
        cfg.dataset.test_count = 0;
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        for e in &manifest.entries {
            assert_eq!(e.sources.len(), 3);
            assert!(e.min_angle_gap() >= 5.0);
        }
    }
}
