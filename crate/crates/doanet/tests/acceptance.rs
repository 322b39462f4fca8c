//! Project acceptance gate. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; the test fails if any criterion fails.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to watch the
//! lines appear live. The desk-scale end-to-end criteria simulate a full
//! dataset and train both models, so the whole gate takes on the order of
//! an hour on a single core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use doanet::config::{ModelKind, RunConfig};
use doanet::dsp::{fft_convolve, stft, ComplexSpectrogram, MultichannelWaveform};
use doanet::eval::{decode_mimo, decode_miso, match_and_score, threshold_grid, Counts};
use doanet::features::{encode_sps, feature_dim, SPS_BINS, SPS_PAD};
use doanet::model::{
    crf_width, apply_crf, frame_covariance, train_model, CrfFilter, DoaModel, TrainSettings,
    TrainingExample,
};
use doanet::nn::{mimo_loss, numeric_gradient, Dense, Gru, LayerNorm, ParamStore};
use doanet::pipeline;
use doanet::room::{mic_offsets, simulate_rir_custom, synth_dry_source, RoomSpec, SizeClass, Split};

type Check = std::result::Result<String, String>;

fn require(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget_s: f64, what: &str) -> std::result::Result<(), String> {
    require(
        elapsed.as_secs_f64() < budget_s,
        format!("{what} took {:.1} s, budget {budget_s} s", elapsed.as_secs_f64()),
    )
}

struct Gate {
    failures: usize,
}

/// Writes one line straight to the process stderr. The standard print
/// macros are captured by the test harness on success; writing to the fd
/// directly keeps the per-criterion verdict lines visible in plain
/// `cargo test` output.
fn verdict(line: &str) {
    use std::io::Write;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

impl Gate {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Check) {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => verdict(&format!("criterion {id} PASS {name}: {detail}")),
            Err(detail) => {
                self.failures += 1;
                verdict(&format!("criterion {id} FAIL {name}: {detail}"));
            }
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Criterion 1 is a scope statement: exact reproduction of the reference
// experiment's numbers is out of reach at desk scale (the original models
// train on two orders of magnitude more audio), so the criteria below are
// property-based substitutes. Nothing to execute.

fn criterion_2_sps_oracle() -> Check {
    let start = Instant::now();
    let mut r = rng(42);
    for _ in 0..1000 {
        let n = r.gen_range(1..=3);
        let angles: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=180.0)).collect();
        let sps = encode_sps(&angles, 8.0).map_err(|e| e.to_string())?;
        for i in 0..SPS_BINS {
            let mut expected: f64 = 0.0;
            for &a in &angles {
                let d = i as f64 - (a + SPS_PAD);
                expected = expected.max((-d * d / 64.0).exp());
            }
            require(
                (sps[i] - expected).abs() < 1e-12,
                format!("bin {i} for {angles:?}: {} vs {expected}", sps[i]),
            )?;
        }
    }
    for a in [0usize, 17, 90, 180] {
        let sps = encode_sps(&[a as f64], 8.0).map_err(|e| e.to_string())?;
        require((sps[a + 15] - 1.0).abs() < 1e-12, format!("peak at {a} is {}", sps[a + 15]))?;
        let off = a + 15 + 8;
        if off < SPS_BINS {
            require(
                (sps[off] - (-1.0f64).exp()).abs() < 1e-12,
                format!("value at distance 8 from {a} is {}", sps[off]),
            )?;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 1.0, "SPS oracle")?;
    Ok(format!("1000 random angle sets exact to 1e-12 in {:.2} s", elapsed.as_secs_f64()))
}

fn random_spec(r: &mut ChaCha8Rng, channels: usize, frames: usize, frame_size: usize) -> ComplexSpectrogram {
    let bins = frame_size / 2 + 1;
    let values = (0..channels)
        .map(|_| {
            (0..frames)
                .map(|_| {
                    (0..bins)
                        .map(|_| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
                        .collect()
                })
                .collect()
        })
        .collect();
    ComplexSpectrogram { values, frame_size, hop: frame_size / 2, sample_rate: 16_000 }
}

fn criterion_3_filter_and_covariance() -> Check {
    let start = Instant::now();
    let mut r = rng(7);
    let (frames, bins, taps, channels) = (4usize, 5usize, 3usize, 3usize);
    let frame_size = (bins - 1) * 2;

    // Identity filter: center tap 1, everything else 0.
    let mut data = Array2::zeros((frames, crf_width(bins, taps)));
    for t in 0..frames {
        for f in 0..bins {
            let center = 2 * ((f * taps + 1) * taps + 1);
            data[(t, center)] = 1.0;
        }
    }
    let spec = random_spec(&mut r, channels, frames, frame_size);
    let filt = CrfFilter::new(data, bins, taps);
    let out = apply_crf(&spec, &filt);
    for m in 0..channels {
        for t in 0..frames {
            for f in 0..bins {
                require(
                    out[m][(t, f)] == spec.values[m][t][f],
                    format!("identity filter changed ({m},{t},{f})"),
                )?;
            }
        }
    }

    // Brute-force tap loop on a random filter.
    let data = Array2::from_shape_fn((frames, crf_width(bins, taps)), |_| r.gen_range(-1.0..1.0));
    let filt = CrfFilter::new(data, bins, taps);
    let out = apply_crf(&spec, &filt);
    let half = (taps / 2) as i64;
    for m in 0..channels {
        for t in 0..frames {
            for f in 0..bins {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..taps {
                    for b in 0..taps {
                        let tt = t as i64 + a as i64 - half;
                        let ff = f as i64 + b as i64 - half;
                        if tt < 0 || tt >= frames as i64 || ff < 0 || ff >= bins as i64 {
                            continue;
                        }
                        acc += filt.tap(t, f, a, b) * spec.values[m][tt as usize][ff as usize];
                    }
                }
                require(
                    (out[m][(t, f)] - acc).norm() < 1e-12,
                    format!("tap loop mismatch at ({m},{t},{f})"),
                )?;
            }
        }
    }

    // Hermitian / PSD structure of random covariance sequences.
    let mut worst_herm: f64 = 0.0;
    let mut worst_quad: f64 = 0.0;
    for _ in 0..1000 {
        let frames = r.gen_range(2..=4);
        let channels = r.gen_range(2..=4);
        let bins = 4;
        let s: Vec<Array2<Complex64>> = (0..channels)
            .map(|_| {
                Array2::from_shape_fn((frames, bins), |_| {
                    Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
                })
            })
            .collect();
        let crm = Array2::from_shape_fn((frames, bins), |_| {
            Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
        });
        let cov = frame_covariance(&s, &crm);
        worst_herm = worst_herm.max(cov.max_hermitian_error());
        for t in 0..frames {
            for f in 0..bins {
                let phi = &cov.mats[t][f];
                let z: Vec<Complex64> = (0..channels)
                    .map(|_| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
                    .collect();
                let mut quad = Complex64::new(0.0, 0.0);
                for i in 0..channels {
                    for j in 0..channels {
                        quad += z[i].conj() * phi[(i, j)] * z[j];
                    }
                }
                worst_quad = worst_quad.min(quad.re);
            }
        }
    }
    require(worst_herm < 1e-10, format!("Hermitian error {worst_herm}"))?;
    require(worst_quad > -1e-10, format!("negative quadratic form {worst_quad}"))?;
    let elapsed = start.elapsed();
    within(elapsed, 10.0, "filter/covariance oracles")?;
    Ok(format!(
        "identity + tap-loop exact, 1000 covariances Hermitian/PSD in {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn layer_param_check(name: &str, forward: impl Fn(&ParamStore) -> f64, store: &mut ParamStore, analytic: &[f64]) -> std::result::Result<f64, String> {
    let mut data = store.data.clone();
    let baseline = store.clone();
    let numeric = numeric_gradient(
        &mut data,
        |d| {
            let mut s = baseline.clone();
            s.data.copy_from_slice(d);
            forward(&s)
        },
        1e-5,
    );
    let err = max_rel(analytic, &numeric);
    require(err < 1e-4, format!("{name} param gradient max rel err {err}"))?;
    Ok(err)
}

fn criterion_4_gradients() -> Check {
    let start = Instant::now();
    let mut r = rng(11);
    let x = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
    let w = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
    let mut worst: f64 = 0.0;

    // Dense.
    let mut store = ParamStore::new();
    let layer = Dense::new(&mut store, &mut r, "d", 6, 4);
    store.zero_grad();
    let (_y, cache) = layer.forward(&store, &x);
    let loss_grad = &w * 2.0;
    let _ = layer.backward(&mut store, &cache, &loss_grad);
    let analytic = store.grad.clone();
    let weights = w.clone();
    let xc = x.clone();
    let lc = layer.clone();
    worst = worst.max(layer_param_check(
        "dense",
        move |s| (&lc.forward(s, &xc).0 * &weights * 2.0).sum(),
        &mut store,
        &analytic,
    )?);

    // LayerNorm.
    let mut store = ParamStore::new();
    let layer = LayerNorm::new(&mut store, "ln", 6);
    store.zero_grad();
    let w6 = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
    let (_, cache) = layer.forward(&store, &x);
    let _ = layer.backward(&mut store, &cache, &(&w6 * 2.0));
    let analytic = store.grad.clone();
    let (weights, xc, lc) = (w6.clone(), x.clone(), layer.clone());
    worst = worst.max(layer_param_check(
        "layernorm",
        move |s| (&lc.forward(s, &xc).0 * &weights * 2.0).sum(),
        &mut store,
        &analytic,
    )?);

    // GRU.
    let mut store = ParamStore::new();
    let layer = Gru::new(&mut store, &mut r, "g", 6, 4);
    store.zero_grad();
    let (_, cache) = layer.forward(&store, &x);
    let _ = layer.backward(&mut store, &cache, &(&w * 2.0));
    let analytic = store.grad.clone();
    let (weights, xc, lc) = (w.clone(), x.clone(), layer.clone());
    worst = worst.max(layer_param_check(
        "gru",
        move |s| (&lc.forward(s, &xc).0 * &weights * 2.0).sum(),
        &mut store,
        &analytic,
    )?);

    // End-to-end through both model variants on a tiny configuration.
    let mut e2e_worst: f64 = 0.0;
    for kind in [ModelKind::Miso, ModelKind::Mimo] {
        let cfg = tiny_config();
        let mut model = DoaModel::new(&cfg, kind);
        let branches = match kind {
            ModelKind::Miso => 1,
            ModelKind::Mimo => cfg.model.n_max,
        };
        let ex = tiny_example(&mut r, &cfg, 3, branches);
        model.store.zero_grad();
        let (outputs, cache) = model.forward(&ex.features, &ex.spec).map_err(|e| e.to_string())?;
        let (_, grads) = mimo_loss(&outputs, &ex.targets).map_err(|e| e.to_string())?;
        model.backward(&ex.spec, &cache, &grads).map_err(|e| e.to_string())?;
        let analytic = model.store.grad.clone();
        let mut data = model.store.data.clone();
        let reference = model.clone();
        let numeric = numeric_gradient(
            &mut data,
            |d| {
                let mut m = reference.clone();
                m.store.data.copy_from_slice(d);
                let (o, _) = m.forward(&ex.features, &ex.spec).unwrap();
                mimo_loss(&o, &ex.targets).unwrap().0
            },
            1e-5,
        );
        let err = max_rel(&analytic, &numeric);
        require(err < 1e-3, format!("{kind} end-to-end max rel err {err}"))?;
        e2e_worst = e2e_worst.max(err);
    }
    let elapsed = start.elapsed();
    within(elapsed, 120.0, "gradient suite")?;
    Ok(format!(
        "layers max rel err {worst:.2e}, end-to-end {e2e_worst:.2e} in {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stft.frame_size = 16;
    cfg.stft.hop = 8;
    cfg.model.channels = 2;
    cfg.model.n_max = 2;
    cfg.model.trunk_fc = 8;
    cfg.model.trunk_gru = 8;
    cfg.model.sps_fc = 8;
    cfg.model.sps_gru = 8;
    cfg
}

fn tiny_example(r: &mut ChaCha8Rng, cfg: &RunConfig, frames: usize, branches: usize) -> TrainingExample {
    let bins = cfg.stft.bins();
    let spec = random_spec(r, cfg.model.channels, frames, cfg.stft.frame_size);
    let features = Array2::from_shape_fn(
        (frames, feature_dim(cfg.model.channels, bins)),
        |_| r.gen_range(-1.0..1.0),
    );
    let targets = (0..branches)
        .map(|b| {
            let sps = encode_sps(&[40.0 + 50.0 * b as f64], 8.0).unwrap();
            let mut t = Array2::zeros((frames, SPS_BINS));
            for mut row in t.rows_mut() {
                row.assign(&sps);
            }
            t
        })
        .collect();
    TrainingExample { features, spec, targets }
}

fn criterion_5_decoder_structure() -> Check {
    let start = Instant::now();
    let mut r = rng(23);
    let mut decoded = 0usize;
    for _ in 0..10_000 {
        let sps = Array1::from_shape_fn(SPS_BINS, |_| r.gen_range(0.0..1.0));
        for xi in threshold_grid() {
            let frame = decode_miso(sps.view(), xi);
            for (i, &a) in frame.angles.iter().enumerate() {
                for &b in frame.angles.iter().skip(i + 1) {
                    require(
                        (a - b).abs() > 15.0,
                        format!("angles {a} and {b} within 15 deg at threshold {xi}"),
                    )?;
                }
            }
            decoded += frame.angles.len();
        }
    }

    // Close-pair mechanism with oracle SPS: the pooled decoder can only
    // ever resolve one of two sources closer than 15 degrees, while the
    // per-branch decoder recovers both. The exclusion is exact while the
    // gap stays below the suppression radius minus the 5 degree matching
    // tolerance; nearer the radius a shoulder of the second peak can
    // reappear just outside the suppressed window and still match.
    let mut miso = Counts::default();
    let mut mimo = Counts::default();
    for _ in 0..500 {
        let a = r.gen_range(0.0..=165.0);
        let b = a + r.gen_range(2.0..9.5);
        let truth = [a, b];
        let pooled = encode_sps(&truth, 8.0).map_err(|e| e.to_string())?;
        let frame = decode_miso(pooled.view(), 0.5);
        miso.add(match_and_score(&frame.angles, &truth, 5.0));
        let branch_a = encode_sps(&[a], 8.0).map_err(|e| e.to_string())?;
        let branch_b = encode_sps(&[b], 8.0).map_err(|e| e.to_string())?;
        let frame = decode_mimo(&[branch_a.view(), branch_b.view()], 0.5);
        mimo.add(match_and_score(&frame.angles, &truth, 5.0));
    }
    require(
        miso.recall() <= 0.5 + 1e-12,
        format!("pooled close-pair recall {} exceeds 1/2", miso.recall()),
    )?;
    require((mimo.recall() - 1.0).abs() < 1e-12, format!("per-branch recall {}", mimo.recall()))?;
    let elapsed = start.elapsed();
    within(elapsed, 30.0, "decoder structure")?;
    Ok(format!(
        "no separation violations over 10,000 spectra ({decoded} decoded angles); \
         close-pair recall {:.3} (pooled) vs {:.3} (per-branch) in {:.1} s",
        miso.recall(),
        mimo.recall(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_6_room_oracles() -> Check {
    let start = Instant::now();
    let room = RoomSpec {
        length_m: 100.0,
        width_m: 100.0,
        height_m: 5.0,
        rt60_s: 0.2,
        size_class: SizeClass::Large,
    };
    let fs = 16_000u32;

    // Grid-aligned distance: 3.43 m is exactly 160 samples at 16 kHz.
    let src = [50.0, 50.0 + 3.43, 2.0];
    let mic = [50.0, 50.0, 2.0];
    let h = simulate_rir_custom(&room, &src, &mic, fs, 0.0, 0.05);
    let peak_idx = h
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    require(peak_idx == 160, format!("peak at sample {peak_idx}, expected 160"))?;
    let expected = 1.0 / (4.0 * std::f64::consts::PI * 3.43);
    require(
        (h[160] - expected).abs() / expected < 0.01,
        format!("amplitude {} vs {expected}", h[160]),
    )?;

    // Fractional distance: the peak sample stays within half a sample of
    // the true delay.
    let src = [50.0, 50.0 + 2.7511, 2.0];
    let h = simulate_rir_custom(&room, &src, &mic, fs, 0.0, 0.05);
    let true_delay = 2.7511 / 343.0 * fs as f64;
    let peak_idx = h
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    require(
        (peak_idx as f64 - true_delay).abs() <= 0.5,
        format!("peak {peak_idx} vs true delay {true_delay:.2}"),
    )?;

    // Broadside source: inter-mic phase differences of the closest-spaced
    // pair vanish below its spatial aliasing frequency.
    let offsets = mic_offsets();
    let center = [50.0, 1.0, 2.0];
    let src = [50.0, 1.0 + 10.0, 2.0];
    let mut r = rng(31);
    let dry = synth_dry_source(&mut r, fs as usize, fs);
    let mut chans = Vec::new();
    for &o in &offsets[..2] {
        let mic = [center[0] + o, center[1], center[2]];
        let h = simulate_rir_custom(&room, &src, &mic, fs, 0.0, 0.06);
        let mut y = fft_convolve(&dry, &h);
        y.truncate(fs as usize);
        chans.push(y);
    }
    let wave = MultichannelWaveform::new(chans, fs).map_err(|e| e.to_string())?;
    let spec = stft(&wave, 512, 256).map_err(|e| e.to_string())?;
    let aliasing_hz = 343.0 / (2.0 * 0.04);
    let max_bin = (aliasing_hz / (fs as f64 / 512.0)) as usize;
    let mut worst = 0.0f64;
    for f in 1..max_bin.min(spec.bins()) {
        let mut cross = Complex64::new(0.0, 0.0);
        for t in 0..spec.frames() {
            cross += spec.values[0][t][f] * spec.values[1][t][f].conj();
        }
        worst = worst.max(cross.arg().abs());
    }
    require(worst < 0.05, format!("broadside IPD up to {worst:.3} rad"))?;
    let elapsed = start.elapsed();
    within(elapsed, 30.0, "room oracles")?;
    Ok(format!(
        "delay/amplitude exact, broadside IPD < {worst:.3} rad in {:.1} s",
        elapsed.as_secs_f64()
    ))
}

struct DeskRun {
    cfg: RunConfig,
    root: PathBuf,
}

fn desk_config() -> std::result::Result<RunConfig, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).map_err(|e| e.to_string())
}

fn criterion_7_end_to_end(run: &mut Option<DeskRun>) -> Check {
    let cfg = desk_config()?;
    let root = std::env::temp_dir().join("doanet-acceptance-desk");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    }
    let manifest = pipeline::run_simulate(&cfg, &root).map_err(|e| e.to_string())?;
    for (split, want) in [(Split::Train, 200), (Split::Val, 40), (Split::Test, 40)] {
        let got = manifest.split(split).count();
        require(got == want, format!("{} split has {got} utterances, wanted {want}", split.name()))?;
    }
    pipeline::run_features(&cfg, &root).map_err(|e| e.to_string())?;

    let mut minutes = Vec::new();
    let mut monotone_report = Vec::new();
    for kind in [ModelKind::Miso, ModelKind::Mimo] {
        let t0 = Instant::now();
        let outcome = pipeline::run_train(&cfg, &root, kind).map_err(|e| e.to_string())?;
        let mins = t0.elapsed().as_secs_f64() / 60.0;
        require(mins < 30.0, format!("{kind} training took {mins:.1} min, budget 30"))?;
        minutes.push(format!("{kind} {mins:.1} min"));
        // Warm-up covers epoch 0; the next five epochs must not regress by
        // more than 5% over their predecessor.
        require(outcome.log.len() >= 6, format!("{kind} stopped after {} epochs", outcome.log.len()))?;
        for i in 2..=5 {
            let prev = outcome.log[i - 1].train_loss;
            let cur = outcome.log[i].train_loss;
            require(
                cur <= prev * 1.05,
                format!("{kind} epoch {i} train loss {cur:.3} regressed over {prev:.3}"),
            )?;
        }
        monotone_report.push(format!(
            "{kind} epochs 1-5 losses {}",
            outcome.log[1..=5]
                .iter()
                .map(|l| format!("{:.0}", l.train_loss))
                .collect::<Vec<_>>()
                .join("/")
        ));
    }

    // Overfit sanity: a tiny model memorizes 5 utterances, loss drops
    // at least 100x within 500 epochs.
    let tiny = tiny_config();
    let mut r = rng(5);
    let data: Vec<TrainingExample> = (0..5).map(|_| tiny_example(&mut r, &tiny, 12, 2)).collect();
    let mut model = DoaModel::new(&tiny, ModelKind::Mimo);
    let mut settings = TrainSettings::from_config(&tiny, 1);
    settings.learning_rate = 2e-3;
    settings.max_epochs = 500;
    settings.patience = 500;
    let outcome = train_model(&mut model, &data, &[], &settings, None, |_| {}).map_err(|e| e.to_string())?;
    let first = outcome.log.first().unwrap().train_loss;
    let last = outcome.log.iter().map(|l| l.train_loss).fold(f64::INFINITY, f64::min);
    require(
        first / last >= 100.0,
        format!("overfit reduction only {:.1}x ({first:.4} -> {last:.6})", first / last),
    )?;

    // Held-out MIMO F1 at threshold 0.1.
    pipeline::run_infer(&cfg, &root, ModelKind::Mimo).map_err(|e| e.to_string())?;
    let loaded = pipeline::load_inference(&cfg, &root, ModelKind::Mimo).map_err(|e| e.to_string())?;
    let rows = pipeline::score_inference(&loaded, ModelKind::Mimo, 0.1, cfg.eval.tolerance_deg);
    let f1 = rows.iter().find(|r| r.group == "overall").map(|r| r.f1).unwrap_or(0.0);
    require(f1 > 0.5, format!("held-out MIMO F1 at 0.1 is {f1:.3}, gate 0.5"))?;
    let soft = if f1 > 0.7 { "meets" } else { "misses" };
    *run = Some(DeskRun { cfg, root });
    Ok(format!(
        "{}; {}; overfit {:.0}x; MIMO F1@0.1 = {f1:.3} ({soft} soft target 0.7)",
        minutes.join(", "),
        monotone_report.join("; "),
        first / last
    ))
}

fn criterion_8_threshold_sweep(run: &Option<DeskRun>) -> Check {
    let run = run.as_ref().ok_or("desk run unavailable (criterion 7 failed earlier)")?;
    pipeline::run_infer(&run.cfg, &run.root, ModelKind::Miso).map_err(|e| e.to_string())?;
    let mut ranges = Vec::new();
    for kind in [ModelKind::Miso, ModelKind::Mimo] {
        let rows = pipeline::run_sweep(&run.cfg, &run.root, kind).map_err(|e| e.to_string())?;
        require(rows.len() == 9, format!("{kind} sweep has {} rows, wanted 9", rows.len()))?;
        for (i, (row, want)) in rows.iter().zip(threshold_grid()).enumerate() {
            require(
                (row.threshold - want).abs() < 1e-12,
                format!("{kind} sweep row {i} threshold {}", row.threshold),
            )?;
        }
        for pair in rows.windows(2) {
            require(
                pair[1].recall <= pair[0].recall + 1e-12,
                format!(
                    "{kind} recall increased from {:.4} to {:.4} between thresholds {} and {}",
                    pair[0].recall, pair[1].recall, pair[0].threshold, pair[1].threshold
                ),
            )?;
        }
        let f1_min = rows.iter().map(|r| r.f1).fold(f64::INFINITY, f64::min);
        let f1_max = rows.iter().map(|r| r.f1).fold(0.0f64, f64::max);
        ranges.push(f1_max - f1_min);
        pipeline::run_evaluate(&run.cfg, &run.root, kind, run.cfg.eval.threshold)
            .map_err(|e| e.to_string())?;
    }
    pipeline::run_report(&run.cfg, &run.root).map_err(|e| e.to_string())?;
    let verdict = if ranges[1] < ranges[0] { "smaller (matches expectation)" } else { "NOT smaller" };
    Ok(format!(
        "9 threshold rows per model, recall non-increasing; reported: MIMO F1 range {:.3} vs \
         MISO {:.3}, {verdict}",
        ranges[1], ranges[0]
    ))
}

fn criterion_9_determinism() -> Check {
    let start = Instant::now();
    let mut cfg = desk_config()?;
    cfg.dataset.train_count = 4;
    cfg.dataset.val_count = 2;
    cfg.dataset.test_count = 2;
    cfg.dataset.utterance_secs = 0.5;
    cfg.model.trunk_fc = 16;
    cfg.model.trunk_gru = 16;
    cfg.model.sps_fc = 16;
    cfg.model.sps_gru = 16;
    cfg.train.max_epochs = 3;
    cfg.train.batch_size = 2;

    let mut curves: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut manifests: Vec<Vec<u8>> = Vec::new();
    let mut labels: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for pass in 0..2 {
        let root = std::env::temp_dir().join(format!("doanet-acceptance-det{pass}"));
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        }
        pipeline::run_simulate(&cfg, &root).map_err(|e| e.to_string())?;
        pipeline::run_features(&cfg, &root).map_err(|e| e.to_string())?;
        manifests.push(std::fs::read(root.join("dataset/manifest.json")).map_err(|e| e.to_string())?);
        let mut files = Vec::new();
        let mut stack = vec![root.join("labels")];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
                let path = entry.map_err(|e| e.to_string())?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(&root).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
                }
            }
        }
        files.sort();
        labels.push(files);
        let outcome = pipeline::run_train(&cfg, &root, ModelKind::Miso).map_err(|e| e.to_string())?;
        curves.push(outcome.log.iter().map(|l| (l.train_loss, l.val_loss)).collect());
        std::fs::remove_dir_all(&root).ok();
    }
    require(manifests[0] == manifests[1], "manifests differ between runs")?;
    require(labels[0] == labels[1], "label tensors differ between runs")?;
    require(curves[0] == curves[1], "loss curves differ between runs")?;
    Ok(format!(
        "manifest, {} label files and {}-epoch loss curve byte-identical across two runs \
         ({:.0} s)",
        labels[0].len(),
        curves[0].len(),
        start.elapsed().as_secs_f64()
    ))
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { failures: 0 };
    verdict(
        "criterion 1 PASS scope: exact reference-table numbers are out of scope at desk scale; \
         the remaining criteria are property-based substitutes",
    );
    gate.run(2, "SPS encoding oracle", criterion_2_sps_oracle);
    gate.run(3, "filter and covariance oracles", criterion_3_filter_and_covariance);
    gate.run(4, "finite-difference gradient suite", criterion_4_gradients);
    gate.run(5, "decoder structural theorem", criterion_5_decoder_structure);
    gate.run(6, "room simulation oracles", criterion_6_room_oracles);
    let mut desk: Option<DeskRun> = None;
    gate.run(7, "desk-scale end-to-end training", || criterion_7_end_to_end(&mut desk));
    gate.run(8, "threshold sensitivity harness", || criterion_8_threshold_sweep(&desk));
    gate.run(9, "pipeline determinism", criterion_9_determinism);
    if let Some(run) = &desk {
        std::fs::remove_dir_all(&run.root).ok();
    }
    assert_eq!(gate.failures, 0, "{} acceptance criteria failed", gate.failures);
}
