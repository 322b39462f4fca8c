//! The MISO and MIMO DoA model graphs.
//!
//! Both models share one trunk (dense + ReLU, a GRU stack, layer norm)
//! feeding 2N linear heads that each predict a complex ratio filter (cRF):
//! a 3x3 complex tap grid per time-frequency point, shared across channels.
//! Each branch pairs a speech filter with an interference filter, applies
//! them to the input spectrogram, turns the filtered signals into
//! frame-wise spatial covariance matrices normalized by the accumulated
//! center-mask power, flattens the two Hermitian matrices and feeds the
//! concatenation to a per-branch SPS estimator (dense + ReLU, GRU stack,
//! dense to 210, sigmoid). MISO is the single-branch variant trained on a
//! pooled SPS; MIMO runs N independent branches.
//!
//! The whole graph is hand-differentiated; every backward pass here is
//! covered by finite-difference tests.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ModelKind, RunConfig};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::features::SPS_BINS;
use crate::nn::{
    clip_global_norm, mimo_loss, relu, relu_backward, sigmoid, sigmoid_backward, AdamState, Dense,
    Gru, LayerNorm, ParamStore,
};
use crate::nn::optim::warmup_scale;

/// Covariance denominator floor: frames where the accumulated center-mask
/// power vanishes would otherwise divide by zero.
pub const COV_DENOM_FLOOR: f64 = 1e-8;

/// Reals per (frame, bin) in one cRF: K*K complex taps.
pub fn crf_width(bins: usize, taps: usize) -> usize {
    2 * taps * taps * bins
}

/// Reals per frame in one flattened covariance: upper triangle including
/// the diagonal, real/imag interleaved, bin-major.
pub fn cov_flat_dim(channels: usize, bins: usize) -> usize {
    channels * (channels + 1) * bins
}

/// Complex ratio filter for a whole utterance: per (frame, bin) a K x K
/// complex tap grid over time offsets tau1 and frequency offsets tau2 in
/// {-(K-1)/2 .. +(K-1)/2}, shared across input channels.
///
/// Storage is the raw head output `[frames x 2*K*K*bins]`: bin-major, then
/// tap-major (tau1 outer, tau2 inner), real before imaginary.
#[derive(Debug, Clone)]
pub struct CrfFilter {
    pub data: Array2<f64>,
    pub bins: usize,
    pub taps: usize,
}

impl CrfFilter {
    pub fn new(data: Array2<f64>, bins: usize, taps: usize) -> Self {
        assert_eq!(data.ncols(), crf_width(bins, taps), "cRF width mismatch");
        Self { data, bins, taps }
    }

    fn slot(&self, f: usize, a: usize, b: usize) -> usize {
        2 * ((f * self.taps + a) * self.taps + b)
    }

    pub fn tap(&self, t: usize, f: usize, a: usize, b: usize) -> Complex64 {
        let i = self.slot(f, a, b);
        Complex64::new(self.data[[t, i]], self.data[[t, i + 1]])
    }

    /// Center taps (tau1 = tau2 = 0) for every (frame, bin): the cRM.
    pub fn center_mask(&self) -> Array2<Complex64> {
        let c = self.taps / 2;
        let frames = self.data.nrows();
        Array2::from_shape_fn((frames, self.bins), |(t, f)| self.tap(t, f, c, c))
    }
}

/// `S~_m(t,f) = sum_tau filt_(t,f)(tau) * Y_m(t+tau1, f+tau2)`, out-of-range
/// neighbors zero. Returns one `[frames x bins]` grid per channel.
pub fn apply_crf(y: &ComplexSpectrogram, filt: &CrfFilter) -> Vec<Array2<Complex64>> {
    let frames = y.frames();
    let bins = y.bins();
    assert_eq!(bins, filt.bins, "filter bins mismatch");
    assert_eq!(frames, filt.data.nrows(), "filter frames mismatch");
    let k = filt.taps;
    let half = (k / 2) as isize;
    let mut out = vec![Array2::<Complex64>::zeros((frames, bins)); y.channels()];
    for (m, grid) in out.iter_mut().enumerate() {
        let ych = &y.values[m];
        for t in 0..frames {
            for f in 0..bins {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..k {
                    let tt = t as isize + a as isize - half;
                    if tt < 0 || tt as usize >= frames {
                        continue;
                    }
                    let row = &ych[tt as usize];
                    for b in 0..k {
                        let ff = f as isize + b as isize - half;
                        if ff < 0 || ff as usize >= bins {
                            continue;
                        }
                        acc += filt.tap(t, f, a, b) * row[ff as usize];
                    }
                }
                grid[[t, f]] = acc;
            }
        }
    }
    out
}

/// Gradient of [`apply_crf`] with respect to the filter, given complex
/// upstream gradients `gs` on the filtered output (re = d/dRe, im = d/dIm).
/// The spectrogram itself is an input, not a parameter, so no gradient
/// flows into it.
pub fn apply_crf_backward(
    y: &ComplexSpectrogram,
    filt: &CrfFilter,
    gs: &[Array2<Complex64>],
) -> Array2<f64> {
    let frames = y.frames();
    let bins = y.bins();
    let k = filt.taps;
    let half = (k / 2) as isize;
    let mut gfilt = Array2::<f64>::zeros(filt.data.raw_dim());
    for (m, gm) in gs.iter().enumerate() {
        let ych = &y.values[m];
        for t in 0..frames {
            for f in 0..bins {
                let g = gm[[t, f]];
                if g.re == 0.0 && g.im == 0.0 {
                    continue;
                }
                for a in 0..k {
                    let tt = t as isize + a as isize - half;
                    if tt < 0 || tt as usize >= frames {
                        continue;
                    }
                    let row = &ych[tt as usize];
                    for b in 0..k {
                        let ff = f as isize + b as isize - half;
                        if ff < 0 || ff as usize >= bins {
                            continue;
                        }
                        // d(c*Y) w.r.t. c is conj(Y) paired with the complex
                        // upstream gradient.
                        let d = g * row[ff as usize].conj();
                        let i = 2 * ((f * k + a) * k + b);
                        gfilt[[t, i]] += d.re;
                        gfilt[[t, i + 1]] += d.im;
                    }
                }
            }
        }
    }
    gfilt
}

/// Per-bin covariance denominators: raw accumulated center-mask power and
/// the floored value actually divided by.
pub fn cov_denominator(crm: &Array2<Complex64>) -> (Vec<f64>, Vec<f64>) {
    let bins = crm.ncols();
    let mut raw = vec![0.0; bins];
    for t in 0..crm.nrows() {
        for f in 0..bins {
            raw[f] += crm[[t, f]].norm_sqr();
        }
    }
    let floored = raw.iter().map(|&d| d.max(COV_DENOM_FLOOR)).collect();
    (raw, floored)
}

/// Frame-wise spatial covariance sequence with its flattened real view.
#[derive(Debug, Clone)]
pub struct CovarianceSequence {
    /// `mats[t][f]` is the channels x channels Hermitian matrix.
    pub mats: Vec<Vec<Array2<Complex64>>>,
    /// Floored per-bin denominator shared by all frames.
    pub denom: Vec<f64>,
    pub channels: usize,
}

/// `Phi(t,f) = S~(t,f) S~(t,f)^H / sum_t' |cRM(t',f)|^2` over the whole
/// chunk (one utterance here), denominator floored at [`COV_DENOM_FLOOR`].
pub fn frame_covariance(s: &[Array2<Complex64>], crm: &Array2<Complex64>) -> CovarianceSequence {
    let channels = s.len();
    let frames = s[0].nrows();
    let bins = s[0].ncols();
    let (_, denom) = cov_denominator(crm);
    let mut mats = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut row = Vec::with_capacity(bins);
        for f in 0..bins {
            let d = denom[f];
            let m = Array2::from_shape_fn((channels, channels), |(i, j)| {
                s[i][[t, f]] * s[j][[t, f]].conj() / d
            });
            row.push(m);
        }
        mats.push(row);
    }
    CovarianceSequence { mats, denom, channels }
}

impl CovarianceSequence {
    pub fn frames(&self) -> usize {
        self.mats.len()
    }

    pub fn bins(&self) -> usize {
        self.denom.len()
    }

    /// Upper triangle including the diagonal, real/imag interleaved,
    /// bin-major: `[frames x channels*(channels+1)*bins]`.
    pub fn flatten(&self) -> Array2<f64> {
        let m = self.channels;
        let bins = self.bins();
        let mut out = Array2::zeros((self.frames(), cov_flat_dim(m, bins)));
        for (t, row) in self.mats.iter().enumerate() {
            let mut col = 0;
            for mat in row {
                for i in 0..m {
                    for j in i..m {
                        out[[t, col]] = mat[[i, j]].re;
                        out[[t, col + 1]] = mat[[i, j]].im;
                        col += 2;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Self::flatten`]; the dropped lower triangle is restored
    /// by Hermitian symmetry.
    pub fn unflatten(flat: &Array2<f64>, channels: usize, bins: usize) -> Vec<Vec<Array2<Complex64>>> {
        assert_eq!(flat.ncols(), cov_flat_dim(channels, bins));
        let mut mats = Vec::with_capacity(flat.nrows());
        for t in 0..flat.nrows() {
            let mut row = Vec::with_capacity(bins);
            let mut col = 0;
            for _ in 0..bins {
                let mut m = Array2::<Complex64>::zeros((channels, channels));
                for i in 0..channels {
                    for j in i..channels {
                        let v = Complex64::new(flat[[t, col]], flat[[t, col + 1]]);
                        m[[i, j]] = v;
                        if i != j {
                            m[[j, i]] = v.conj();
                        }
                        col += 2;
                    }
                }
                row.push(m);
            }
            mats.push(row);
        }
        mats
    }

    pub fn max_hermitian_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.mats {
            for mat in row {
                for i in 0..self.channels {
                    for j in 0..self.channels {
                        let d = mat[[i, j]] - mat[[j, i]].conj();
                        worst = worst.max(d.norm());
                    }
                }
            }
        }
        worst
    }
}

/// Flattened covariance computed straight from the filtered signals,
/// bypassing the matrix materialization; identical to
/// `frame_covariance(..).flatten()`.
fn flatten_cov_direct(s: &[Array2<Complex64>], denom: &[f64]) -> Array2<f64> {
    let m = s.len();
    let frames = s[0].nrows();
    let bins = s[0].ncols();
    let mut out = Array2::zeros((frames, cov_flat_dim(m, bins)));
    for t in 0..frames {
        let mut col = 0;
        for f in 0..bins {
            let d = denom[f];
            for i in 0..m {
                let si = s[i][[t, f]];
                for j in i..m {
                    let v = si * s[j][[t, f]].conj() / d;
                    out[[t, col]] = v.re;
                    out[[t, col + 1]] = v.im;
                    col += 2;
                }
            }
        }
    }
    out
}

/// Backward pass of the flattened covariance: gradients on the flattened
/// reals flow into the filtered signals and, through the shared denominator,
/// into every frame's center mask. Frames couple through D(f), so the
/// denominator term accumulates over the whole chunk. Where the raw
/// denominator sat below the floor the division used the constant floor and
/// the mask receives no gradient.
fn cov_backward(
    s: &[Array2<Complex64>],
    crm: &Array2<Complex64>,
    denom_raw: &[f64],
    denom: &[f64],
    gflat: &Array2<f64>,
) -> (Vec<Array2<Complex64>>, Array2<Complex64>) {
    let m = s.len();
    let frames = s[0].nrows();
    let bins = s[0].ncols();
    let mut gs = vec![Array2::<Complex64>::zeros((frames, bins)); m];
    let mut gdenom = vec![0.0; bins];
    for t in 0..frames {
        let mut col = 0;
        for f in 0..bins {
            let d = denom[f];
            for i in 0..m {
                let si = s[i][[t, f]];
                for j in i..m {
                    let g = Complex64::new(gflat[[t, col]], gflat[[t, col + 1]]);
                    col += 2;
                    if g.re == 0.0 && g.im == 0.0 {
                        continue;
                    }
                    let sj = s[j][[t, f]];
                    // Phi_ij = s_i conj(s_j) / D on the upper triangle;
                    // i = j contributes through both roles.
                    gs[i][[t, f]] += g * sj / d;
                    gs[j][[t, f]] += g.conj() * si / d;
                    gdenom[f] -= (g.conj() * si * sj.conj()).re / (d * d);
                }
            }
        }
    }
    let mut gcrm = Array2::<Complex64>::zeros((frames, bins));
    for f in 0..bins {
        if denom_raw[f] <= COV_DENOM_FLOOR || gdenom[f] == 0.0 {
            continue;
        }
        for t in 0..frames {
            // D(f) = sum_t |crm(t,f)|^2.
            gcrm[[t, f]] = 2.0 * gdenom[f] * crm[[t, f]];
        }
    }
    (gs, gcrm)
}

/// Concrete layer widths of one model instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub bins: usize,
    pub taps: usize,
    pub n_branches: usize,
    pub feat_dim: usize,
    pub trunk_fc: usize,
    pub trunk_gru: usize,
    pub trunk_gru_layers: usize,
    pub sps_fc: usize,
    pub sps_gru: usize,
    pub sps_gru_layers: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, kind: ModelKind) -> Self {
        let bins = cfg.stft.bins();
        Self {
            channels: cfg.model.channels,
            bins,
            taps: cfg.model.taps,
            n_branches: match kind {
                ModelKind::Miso => 1,
                ModelKind::Mimo => cfg.model.n_max,
            },
            feat_dim: crate::features::feature_dim(cfg.model.channels, bins),
            trunk_fc: cfg.model.trunk_fc,
            trunk_gru: cfg.model.trunk_gru,
            trunk_gru_layers: cfg.model.trunk_gru_layers,
            sps_fc: cfg.model.sps_fc,
            sps_gru: cfg.model.sps_gru,
            sps_gru_layers: cfg.model.sps_gru_layers,
        }
    }

    pub fn head_width(&self) -> usize {
        crf_width(self.bins, self.taps)
    }

    pub fn cov_input_dim(&self) -> usize {
        2 * cov_flat_dim(self.channels, self.bins)
    }
}

#[derive(Debug, Clone)]
struct SpsEstimator {
    fc: Dense,
    grus: Vec<Gru>,
    out: Dense,
}

impl SpsEstimator {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &ModelDims) -> Self {
        let fc = Dense::new(store, rng, &format!("{name}.fc"), dims.cov_input_dim(), dims.sps_fc);
        let mut grus = Vec::new();
        let mut in_dim = dims.sps_fc;
        for l in 0..dims.sps_gru_layers {
            grus.push(Gru::new(store, rng, &format!("{name}.gru{l}"), in_dim, dims.sps_gru));
            in_dim = dims.sps_gru;
        }
        let out = Dense::new(store, rng, &format!("{name}.out"), in_dim, SPS_BINS);
        Self { fc, grus, out }
    }
}

/// One MISO or MIMO model: parameters plus the layer graph.
#[derive(Debug, Clone)]
pub struct DoaModel {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub kind: ModelKind,
    trunk_fc: Dense,
    trunk_grus: Vec<Gru>,
    trunk_ln: LayerNorm,
    /// 2 per branch: speech filter head then interference filter head.
    heads: Vec<Dense>,
    estimators: Vec<SpsEstimator>,
}

impl DoaModel {
    pub fn new(cfg: &RunConfig, kind: ModelKind) -> Self {
        let dims = ModelDims::from_config(cfg, kind);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.init_seed);
        let trunk_fc = Dense::new(&mut store, &mut rng, "trunk.fc", dims.feat_dim, dims.trunk_fc);
        let mut trunk_grus = Vec::new();
        let mut in_dim = dims.trunk_fc;
        for l in 0..dims.trunk_gru_layers {
            trunk_grus.push(Gru::new(&mut store, &mut rng, &format!("trunk.gru{l}"), in_dim, dims.trunk_gru));
            in_dim = dims.trunk_gru;
        }
        let trunk_ln = LayerNorm::new(&mut store, "trunk.ln", in_dim);
        let head_width = dims.head_width();
        assert_eq!(head_width, 2 * dims.taps * dims.taps * dims.bins);
        let mut heads = Vec::new();
        let mut estimators = Vec::new();
        for b in 0..dims.n_branches {
            for role in ["speech", "interf"] {
                heads.push(Dense::new(&mut store, &mut rng, &format!("head{b}.{role}"), in_dim, head_width));
            }
            estimators.push(SpsEstimator::new(&mut store, &mut rng, &format!("est{b}"), &dims));
        }
        Self { store, dims, kind, trunk_fc, trunk_grus, trunk_ln, heads, estimators }
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Forward pass over one utterance. Returns the per-branch sigmoid SPS
    /// sequences `[frames x 210]` and the cache the backward pass consumes.
    pub fn forward(
        &self,
        features: &Array2<f64>,
        spec: &ComplexSpectrogram,
    ) -> Result<(Vec<Array2<f64>>, ForwardCache)> {
        let dims = &self.dims;
        if features.ncols() != dims.feat_dim {
            return Err(Error::InvalidInput(format!(
                "feature dim {} does not match model {}",
                features.ncols(),
                dims.feat_dim
            )));
        }
        if spec.channels() != dims.channels || spec.bins() != dims.bins {
            return Err(Error::InvalidInput("spectrogram shape does not match model".into()));
        }
        if spec.frames() != features.nrows() {
            return Err(Error::InvalidInput("feature/spectrogram frame mismatch".into()));
        }
        let store = &self.store;

        let (fc_pre, fc_cache) = self.trunk_fc.forward(store, features);
        let fc_out = relu(&fc_pre);
        let mut gru_caches = Vec::with_capacity(self.trunk_grus.len());
        let mut x = fc_out.clone();
        for gru in &self.trunk_grus {
            let (y, c) = gru.forward(store, &x);
            gru_caches.push(c);
            x = y;
        }
        let (trunk_out, ln_cache) = self.trunk_ln.forward(store, &x);

        let mut branches = Vec::with_capacity(dims.n_branches);
        let mut outputs = Vec::with_capacity(dims.n_branches);
        for (b, est) in self.estimators.iter().enumerate() {
            let mut roles = Vec::with_capacity(2);
            for r in 0..2 {
                let head = &self.heads[2 * b + r];
                let (raw, head_cache) = head.forward(store, &trunk_out);
                let filt = CrfFilter::new(raw, dims.bins, dims.taps);
                let s = apply_crf(spec, &filt);
                let crm = filt.center_mask();
                let (denom_raw, denom) = cov_denominator(&crm);
                roles.push(RoleCache { head_cache, filt, s, crm, denom_raw, denom });
            }
            let flat_s = flatten_cov_direct(&roles[0].s, &roles[0].denom);
            let flat_i = flatten_cov_direct(&roles[1].s, &roles[1].denom);
            let mut cov_in = Array2::zeros((flat_s.nrows(), flat_s.ncols() * 2));
            cov_in.slice_mut(s![.., ..flat_s.ncols()]).assign(&flat_s);
            cov_in.slice_mut(s![.., flat_s.ncols()..]).assign(&flat_i);

            let (efc_pre, efc_cache) = est.fc.forward(store, &cov_in);
            let efc_out = relu(&efc_pre);
            let mut egru_caches = Vec::with_capacity(est.grus.len());
            let mut ex = efc_out.clone();
            for gru in &est.grus {
                let (y, c) = gru.forward(store, &ex);
                egru_caches.push(c);
                ex = y;
            }
            let (logits, eout_cache) = est.out.forward(store, &ex);
            let sps = sigmoid(&logits);
            outputs.push(sps.clone());
            branches.push(BranchCache { roles, efc_cache, efc_out, egru_caches, eout_cache, sps });
        }

        Ok((
            outputs,
            ForwardCache { fc_cache, fc_out, gru_caches, ln_cache, branches },
        ))
    }

    /// Backward pass given per-branch gradients on the sigmoid SPS outputs.
    /// Accumulates parameter gradients into `self.store.grad`.
    pub fn backward(
        &mut self,
        spec: &ComplexSpectrogram,
        cache: &ForwardCache,
        output_grads: &[Array2<f64>],
    ) -> Result<()> {
        if output_grads.len() != self.dims.n_branches {
            return Err(Error::InvalidInput("branch gradient count mismatch".into()));
        }
        let Self { store, dims, trunk_fc, trunk_grus, trunk_ln, heads, estimators, .. } = self;

        let frames = cache.fc_out.nrows();
        let mut g_trunk = Array2::<f64>::zeros((frames, trunk_ln.dim));

        for (b, est) in estimators.iter().enumerate() {
            let bc = &cache.branches[b];
            let g = sigmoid_backward(&bc.sps, &output_grads[b]);
            let mut g = est.out.backward(store, &bc.eout_cache, &g);
            for (gru, c) in est.grus.iter().zip(&bc.egru_caches).rev() {
                g = gru.backward(store, c, &g);
            }
            let g = relu_backward(&bc.efc_out, &g);
            let g_cov = est.fc.backward(store, &bc.efc_cache, &g);

            let half = g_cov.ncols() / 2;
            for (r, role) in bc.roles.iter().enumerate() {
                let gflat = g_cov.slice(s![.., r * half..(r + 1) * half]).to_owned();
                let (gs, gcrm) =
                    cov_backward(&role.s, &role.crm, &role.denom_raw, &role.denom, &gflat);
                let mut gfilt = apply_crf_backward(spec, &role.filt, &gs);
                // The center tap also feeds the covariance denominator.
                let c = dims.taps / 2;
                for t in 0..frames {
                    for f in 0..dims.bins {
                        let i = 2 * ((f * dims.taps + c) * dims.taps + c);
                        gfilt[[t, i]] += gcrm[[t, f]].re;
                        gfilt[[t, i + 1]] += gcrm[[t, f]].im;
                    }
                }
                let head = &heads[2 * b + r];
                g_trunk += &head.backward(store, &role.head_cache, &gfilt);
            }
        }

        let mut g = trunk_ln.backward(store, &cache.ln_cache, &g_trunk);
        for (gru, c) in trunk_grus.iter().zip(&cache.gru_caches).rev() {
            g = gru.backward(store, c, &g);
        }
        let g = relu_backward(&cache.fc_out, &g);
        trunk_fc.backward(store, &cache.fc_cache, &g);
        Ok(())
    }
}

struct RoleCache {
    head_cache: crate::nn::layers::DenseCache,
    filt: CrfFilter,
    s: Vec<Array2<Complex64>>,
    crm: Array2<Complex64>,
    denom_raw: Vec<f64>,
    denom: Vec<f64>,
}

struct BranchCache {
    roles: Vec<RoleCache>,
    efc_cache: crate::nn::layers::DenseCache,
    efc_out: Array2<f64>,
    egru_caches: Vec<crate::nn::layers::GruCache>,
    eout_cache: crate::nn::layers::DenseCache,
    sps: Array2<f64>,
}

pub struct ForwardCache {
    fc_cache: crate::nn::layers::DenseCache,
    fc_out: Array2<f64>,
    gru_caches: Vec<crate::nn::layers::GruCache>,
    ln_cache: crate::nn::layers::LayerNormCache,
    branches: Vec<BranchCache>,
}

/// One utterance ready for training: input features, the multichannel STFT
/// the cRFs are applied to, and the per-branch SPS targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: Array2<f64>,
    pub spec: ComplexSpectrogram,
    pub targets: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation selection score (higher is better) when a selector is
    /// used; `None` when selection falls back to validation loss.
    pub val_score: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Selection score of the best epoch when a selector was used.
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig, batch_size: usize) -> Self {
        Self {
            learning_rate: cfg.train.learning_rate,
            max_epochs: cfg.train.max_epochs,
            patience: cfg.train.patience,
            clip_norm: cfg.train.clip_norm,
            weight_decay: cfg.train.weight_decay,
            lr_decay: cfg.train.lr_decay,
            lr_patience: cfg.train.lr_patience,
            batch_size: batch_size.max(1),
            seed: cfg.train.seed,
        }
    }
}

fn example_loss_and_grads(
    model: &DoaModel,
    ex: &TrainingExample,
) -> Result<(f64, Vec<f64>)> {
    let mut worker = model.clone();
    worker.store.zero_grad();
    let (outputs, cache) = worker.forward(&ex.features, &ex.spec)?;
    let (loss, grads) = mimo_loss(&outputs, &ex.targets)?;
    worker.backward(&ex.spec, &cache, &grads)?;
    Ok((loss, worker.store.grad))
}

fn forward_loss(model: &DoaModel, ex: &TrainingExample) -> Result<f64> {
    let (outputs, _) = model.forward(&ex.features, &ex.spec)?;
    Ok(mimo_loss(&outputs, &ex.targets)?.0)
}

fn mean_loss(model: &DoaModel, data: &[TrainingExample]) -> Result<f64> {
    let losses: Result<Vec<f64>> = data.par_iter().map(|ex| forward_loss(model, ex)).collect();
    Ok(losses?.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Epoch loop with linear warm-up over the first epoch, global-norm
/// clipping, Adam, and early stopping. Epoch selection maximizes the
/// `selector` score when one is given (e.g. a decoded validation F1);
/// otherwise it minimizes validation loss (training loss when no
/// validation split is given). Batches run in parallel; gradients reduce
/// in example order, so runs are deterministic. On success the parameters
/// are restored to the best epoch. A non-finite loss aborts with a
/// divergence error, leaving the current (diagnostic) parameters in place.
pub fn train_model(
    model: &mut DoaModel,
    train_data: &[TrainingExample],
    val_data: &[TrainingExample],
    settings: &TrainSettings,
    selector: Option<&dyn Fn(&DoaModel) -> Result<f64>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let mut adam = AdamState::new(model.store.len(), settings.learning_rate);
    adam.weight_decay = settings.weight_decay;
    let steps_per_epoch = train_data.len().div_ceil(settings.batch_size);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed);

    let mut log = Vec::new();
    let mut best_selection = f64::NEG_INFINITY;
    let mut best_val = f64::INFINITY;
    let mut best_score = None;
    let mut best_epoch = 0;
    let mut best_params: Vec<f64> = model.store.data.clone();
    // Early stopping watches validation loss regardless of the selector, so
    // a fluke selector score on a barely-trained model cannot freeze the
    // patience counter.
    let mut stop_best_val = f64::INFINITY;
    let mut epochs_since_best = 0;
    // Plateau learning-rate schedule, driven by the same loss signal.
    let mut decay_factor = 1.0;
    let mut decay_best_val = f64::INFINITY;
    let mut epochs_since_decay = 0;

    for epoch in 0..settings.max_epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut last_scale = 0.0;
        for (step, batch) in order.chunks(settings.batch_size).enumerate() {
            let results: Result<Vec<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| example_loss_and_grads(model, &train_data[i]))
                .collect();
            let results = results?;
            let inv = 1.0 / batch.len() as f64;
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for (loss, grad) in &results {
                batch_loss += loss;
                for (g, &d) in model.store.grad.iter_mut().zip(grad) {
                    *g += d * inv;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            clip_global_norm(&mut model.store.grad, settings.clip_norm);
            let scale = warmup_scale(epoch, step, steps_per_epoch) * decay_factor;
            last_scale = scale;
            adam.step(&mut model.store, scale);
        }
        let train_loss = epoch_loss / train_data.len() as f64;
        let val_loss = if val_data.is_empty() { train_loss } else { mean_loss(model, val_data)? };
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        let val_score = match selector {
            Some(f) => Some(f(model)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_score,
            lr: settings.learning_rate * last_scale,
        };
        on_epoch(&entry);
        log.push(entry);

        // Selection: best score, ties broken by the lower validation loss.
        let selection = val_score.unwrap_or(-val_loss);
        if selection > best_selection
            || (selection == best_selection && val_loss < best_val)
        {
            best_selection = selection;
            best_val = val_loss;
            best_score = val_score;
            best_epoch = epoch;
            best_params.copy_from_slice(&model.store.data);
        }
        if val_loss < stop_best_val {
            stop_best_val = val_loss;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > settings.patience {
                break;
            }
        }
        if val_loss < decay_best_val {
            decay_best_val = val_loss;
            epochs_since_decay = 0;
        } else {
            epochs_since_decay += 1;
            if settings.lr_decay < 1.0 && epochs_since_decay >= settings.lr_patience {
                decay_factor *= settings.lr_decay;
                epochs_since_decay = 0;
            }
        }
    }

    model.store.data.copy_from_slice(&best_params);
    Ok(TrainOutcome { log, best_epoch, best_val_loss: best_val, best_score })
}

/// Fisher-Yates with the given stream.
fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DOAC";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint layout (all integers and floats little-endian):
///
/// ```text
/// magic "DOAC" | version u32 | kind u8 (0 miso, 1 mimo)
/// config_hash: len u16 + utf-8 bytes
/// entry count u32, per entry: name len u16 + utf-8, rows u32, cols u32
/// params: f32 x total
/// optimizer flag u8; if 1: step u64, lr f64, m: f32 x total, v: f32 x total
/// ```
pub fn save_checkpoint(
    path: &Path,
    model: &DoaModel,
    adam: Option<&AdamState>,
    config_hash: &str,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match model.kind {
        ModelKind::Miso => 0,
        ModelKind::Mimo => 1,
    });
    buf.extend_from_slice(&(config_hash.len() as u16).to_le_bytes());
    buf.extend_from_slice(config_hash.as_bytes());
    let entries = model.store.entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
    }
    for &v in &model.store.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match adam {
        Some(a) => {
            buf.push(1);
            buf.extend_from_slice(&a.step.to_le_bytes());
            buf.extend_from_slice(&a.lr.to_le_bytes());
            for &v in a.m.iter().chain(&a.v) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from the config and overwrites its parameters from
/// the checkpoint, verifying the layout matches.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(DoaModel, Option<AdamState>, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::InvalidInput(format!("truncated checkpoint {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::InvalidInput(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint version {version}")));
    }
    let kind = match take(&mut pos, 1)?[0] {
        0 => ModelKind::Miso,
        1 => ModelKind::Mimo,
        k => return Err(Error::InvalidInput(format!("unknown model kind tag {k}"))),
    };
    let hash_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let config_hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
        .map_err(|_| Error::InvalidInput("bad config hash encoding".into()))?;

    let mut model = DoaModel::new(cfg, kind);
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if count != model.store.entries().len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {count} tensors, model expects {}",
            model.store.entries().len()
        )));
    }
    for e in model.store.entries().to_vec() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if name != e.name || rows != e.rows || cols != e.cols {
            return Err(Error::InvalidInput(format!(
                "checkpoint tensor {name} [{rows}x{cols}] does not match model {} [{}x{}]; \
                 was it written with a different config?",
                e.name, e.rows, e.cols
            )));
        }
    }
    let total = model.store.len();
    for i in 0..total {
        let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        model.store.data[i] = v as f64;
    }
    let adam = match take(&mut pos, 1)?[0] {
        0 => None,
        _ => {
            let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let lr = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let mut a = AdamState::new(total, lr);
            a.step = step;
            for i in 0..total {
                a.m[i] = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            }
            for i in 0..total {
                a.v[i] = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
            }
            Some(a)
        }
    };
    Ok((model, adam, config_hash))
}
