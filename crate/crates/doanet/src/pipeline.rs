//! Staged experiment pipeline behind the CLI: simulate -> features ->
//! train -> infer -> evaluate / sweep -> report.
//!
//! Every stage reads its inputs from a shared run directory and writes its
//! outputs back there, so stages can be re-run independently. Artifacts
//! embed the config hash and a stage version; a stage refuses to consume
//! caches produced under a different configuration. Running a stage without
//! its prerequisite fails with a message naming the stage to run first.
//!
//! Run directory layout:
//!
//! ```text
//! <root>/
//!   dataset/            manifest.json plus audio/<split>/utt<idx>/*.wav
//!   features/<id>.bin   float32 input features, [frames x dim]
//!   labels/<id>.<mode>.bin   float32 targets, [frames x branches x 210]
//!   labels/<id>.meta.json    per-source angles and VAD tracks
//!   models/<kind>.ckpt  best checkpoint (<kind>.diverged.ckpt on failure)
//!   models/<kind>_train_log.csv
//!   outputs/<kind>/<id>.sps.bin  float32 model outputs, [frames x branches x 210]
//!   outputs/<kind>/index.json    per-utterance truth and grouping metadata
//!   reports/            eval/sweep CSV + JSON, report.md
//! ```
//!
//! Binary tensors are little-endian: 4-byte magic, u32 format version,
//! u16-length-prefixed config hash, u32 rank, u32 dims, then f32 data.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig, SirMode};
use crate::dsp::{read_wav, stft};
use crate::error::{Error, Result};
use crate::eval::{
    self, decode_miso, decode_mimo, match_and_score, metric_ranges, threshold_grid, Counts,
    MetricRange, ScoreRow,
};
use crate::features::{build_labels, compute_features_any, vad, LabelMode, SPS_BINS};
use crate::model::{
    load_checkpoint, save_checkpoint, train_model, DoaModel, TrainOutcome, TrainSettings,
    TrainingExample,
};
use crate::room::{generate_dataset, ExperimentManifest, ManifestEntry, Split};

pub const STAGE_VERSION: u32 = 1;

const MAGIC_FEATURES: &[u8; 4] = b"DOAF";
const MAGIC_LABELS: &[u8; 4] = b"DOAL";
const MAGIC_OUTPUTS: &[u8; 4] = b"DOAS";

/// Resolves all artifact paths under one run directory.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset_dir().join("manifest.json")
    }

    pub fn feature_path(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.bin"))
    }

    pub fn label_path(&self, id: &str, mode: LabelMode) -> PathBuf {
        let tag = match mode {
            LabelMode::Miso => "miso",
            LabelMode::Mimo => "mimo",
        };
        self.root.join("labels").join(format!("{id}.{tag}.bin"))
    }

    pub fn label_meta_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.meta.json"))
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.ckpt"))
    }

    pub fn diverged_checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.diverged.ckpt"))
    }

    pub fn train_log_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}_train_log.csv"))
    }

    pub fn sps_path(&self, kind: ModelKind, id: &str) -> PathBuf {
        self.root.join("outputs").join(kind.to_string()).join(format!("{id}.sps.bin"))
    }

    pub fn infer_index_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("outputs").join(kind.to_string()).join("index.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn eval_csv_path(&self, kind: ModelKind) -> PathBuf {
        self.reports_dir().join(format!("eval_{kind}.csv"))
    }

    pub fn eval_json_path(&self, kind: ModelKind) -> PathBuf {
        self.reports_dir().join(format!("eval_{kind}.json"))
    }

    pub fn sweep_csv_path(&self, kind: ModelKind) -> PathBuf {
        self.reports_dir().join(format!("sweep_{kind}.csv"))
    }

    pub fn sweep_json_path(&self, kind: ModelKind) -> PathBuf {
        self.reports_dir().join(format!("sweep_{kind}.json"))
    }

    pub fn report_md_path(&self) -> PathBuf {
        self.reports_dir().join("report.md")
    }

    pub fn report_csv_path(&self) -> PathBuf {
        self.reports_dir().join("report.csv")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_tensor(path: &Path, magic: &[u8; 4], hash: &str, dims: &[u32], data: &[f64]) -> Result<()> {
    let count: usize = dims.iter().map(|&d| d as usize).product();
    assert_eq!(count, data.len(), "tensor dims do not match data length");
    create_parent(path)?;
    let mut buf = Vec::with_capacity(32 + hash.len() + 4 * data.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&STAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hash.len() as u16).to_le_bytes());
    buf.extend_from_slice(hash.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<u32>, Vec<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidInput(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(bad("truncated tensor file"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != magic {
        return Err(bad("wrong magic bytes"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != STAGE_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hash_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
        .map_err(|_| bad("malformed config hash"))?;
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let raw = take(&mut pos, 4 * count)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((hash, dims, data))
}

fn check_cache_hash(path: &Path, found: &str, expected: &str, stage: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{} was built under config {found} but the current config hashes to {expected}; \
             re-run `doanet {stage}`",
            path.display()
        )));
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig, dirs: &RunDirs) -> Result<ExperimentManifest> {
    let path = dirs.manifest_path();
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no dataset manifest at {}; run `doanet simulate` first",
            path.display()
        )));
    }
    let manifest = ExperimentManifest::load(&path)?;
    check_cache_hash(&path, &manifest.config_hash, &cfg.data_hash(), "simulate")?;
    Ok(manifest)
}

/// Per-utterance ground truth kept next to the label tensors: source
/// angles and the frame-level VAD track of each source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMeta {
    pub config_hash: String,
    pub stage_version: u32,
    pub angles: Vec<f64>,
    pub vad: Vec<Vec<bool>>,
}

impl LabelMeta {
    /// Ascending angles of sources whose VAD is on at frame `t`.
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

/// Generates the dataset (audio plus manifest) under `<root>/dataset`.
pub fn run_simulate(cfg: &RunConfig, root: &Path) -> Result<ExperimentManifest> {
    let dirs = RunDirs::new(root);
    generate_dataset(cfg, &dirs.dataset_dir())
}

fn label_mode(kind: ModelKind) -> LabelMode {
    match kind {
        ModelKind::Miso => LabelMode::Miso,
        ModelKind::Mimo => LabelMode::Mimo,
    }
}

fn build_entry_features(cfg: &RunConfig, dirs: &RunDirs, entry: &ManifestEntry) -> Result<()> {
    let hash = cfg.feature_hash();
    let mix_path = dirs.dataset_dir().join(&entry.mixture_path);
    let wave = read_wav(&mix_path)?;
    if wave.channels() != cfg.model.channels {
        return Err(Error::Config(format!(
            "mixture {} has {} channels but model.channels is {}",
            entry.id,
            wave.channels(),
            cfg.model.channels
        )));
    }
    let spec = stft(&wave, cfg.stft.frame_size, cfg.stft.hop)?;
    let feats = compute_features_any(&spec)?;
    let (frames, dim) = feats.data.dim();
    write_tensor(
        &dirs.feature_path(&entry.id),
        MAGIC_FEATURES,
        &hash,
        &[frames as u32, dim as u32],
        feats.data.as_slice().expect("contiguous features"),
    )?;

    // VAD runs on the dry signals so reverberant tails stay unlabeled.
    let mut vads = Vec::with_capacity(entry.sources.len());
    for src in &entry.sources {
        let dry = read_wav(&dirs.dataset_dir().join(&src.dry_path))?;
        vads.push(vad(&dry, cfg.stft.frame_size, cfg.stft.hop));
    }
    let angles = entry.angles();
    for mode in [LabelMode::Miso, LabelMode::Mimo] {
        let labels = build_labels(&angles, &vads, cfg.model.n_max, mode, cfg.labels.sigma)?;
        let branches = labels.targets.len();
        let mut flat = Vec::with_capacity(frames * branches * SPS_BINS);
        for t in 0..frames {
            for target in &labels.targets {
                flat.extend(target.row(t).iter().copied());
            }
        }
        write_tensor(
            &dirs.label_path(&entry.id, mode),
            MAGIC_LABELS,
            &hash,
            &[frames as u32, branches as u32, SPS_BINS as u32],
            &flat,
        )?;
    }
    let meta = LabelMeta { config_hash: hash, stage_version: STAGE_VERSION, angles, vad: vads };
    let meta_path = dirs.label_meta_path(&entry.id);
    create_parent(&meta_path)?;
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

/// Computes input features, SPS label tensors (both modes) and per-source
/// VAD metadata for every utterance in the manifest.
pub fn run_features(cfg: &RunConfig, root: &Path) -> Result<()> {
    let dirs = RunDirs::new(root);
    let manifest = load_manifest(cfg, &dirs)?;
    manifest
        .entries
        .par_iter()
        .map(|entry| build_entry_features(cfg, &dirs, entry))
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn load_example(
    cfg: &RunConfig,
    dirs: &RunDirs,
    entry: &ManifestEntry,
    mode: LabelMode,
) -> Result<TrainingExample> {
    let hash = cfg.feature_hash();
    let feat_path = dirs.feature_path(&entry.id);
    if !feat_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no feature cache at {}; run `doanet features` first",
            feat_path.display()
        )));
    }
    let (found, dims, data) = read_tensor(&feat_path, MAGIC_FEATURES)?;
    check_cache_hash(&feat_path, &found, &hash, "features")?;
    let (frames, dim) = (dims[0] as usize, dims[1] as usize);
    let features = Array2::from_shape_vec((frames, dim), data)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", feat_path.display())))?;

    let wave = read_wav(&dirs.dataset_dir().join(&entry.mixture_path))?;
    let spec = stft(&wave, cfg.stft.frame_size, cfg.stft.hop)?;

    let label_path = dirs.label_path(&entry.id, mode);
    if !label_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no label cache at {}; run `doanet features` first",
            label_path.display()
        )));
    }
    let (found, ldims, ldata) = read_tensor(&label_path, MAGIC_LABELS)?;
    check_cache_hash(&label_path, &found, &hash, "features")?;
    let (lframes, branches, bins) = (ldims[0] as usize, ldims[1] as usize, ldims[2] as usize);
    if lframes != frames || bins != SPS_BINS {
        return Err(Error::InvalidInput(format!(
            "label cache {} does not match features ({lframes}x{bins} vs {frames} frames)",
            label_path.display()
        )));
    }
    let mut targets = vec![Array2::zeros((frames, SPS_BINS)); branches];
    for t in 0..frames {
        for (b, target) in targets.iter_mut().enumerate() {
            let base = (t * branches + b) * SPS_BINS;
            for j in 0..SPS_BINS {
                target[(t, j)] = ldata[base + j];
            }
        }
    }
    Ok(TrainingExample { features, spec, targets })
}

/// Loads every utterance of a split as in-memory training examples.
pub fn load_examples(
    cfg: &RunConfig,
    root: &Path,
    manifest: &ExperimentManifest,
    split: Split,
    mode: LabelMode,
) -> Result<Vec<TrainingExample>> {
    let dirs = RunDirs::new(root);
    manifest
        .split(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|entry| load_example(cfg, &dirs, entry, mode))
        .collect()
}

/// Trains one model kind on the train split with early stopping on the
/// validation split, then writes the best checkpoint and an epoch log.
/// The best epoch is the one with the highest decoded validation F1 at the
/// configured evaluation threshold (validation loss breaks the warm-up
/// epochs where F1 is still zero only through the tie rule: earlier epoch
/// wins). On numeric divergence the failing parameters are saved to a
/// diagnostic checkpoint before the error propagates.
pub fn run_train(cfg: &RunConfig, root: &Path, kind: ModelKind) -> Result<TrainOutcome> {
    let dirs = RunDirs::new(root);
    let manifest = load_manifest(cfg, &dirs)?;
    let mode = label_mode(kind);
    let train_data = load_examples(cfg, root, &manifest, Split::Train, mode)?;
    let val_data = load_examples(cfg, root, &manifest, Split::Val, mode)?;
    let val_truth: Result<Vec<Vec<Vec<f64>>>> = manifest
        .split(Split::Val)
        .map(|entry| {
            let meta = read_label_meta(cfg, &dirs, &entry.id)?;
            Ok((0..meta.vad.len()).map(|t| meta.active_angles(t)).collect())
        })
        .collect();
    let val_truth = val_truth?;

    let mut model = DoaModel::new(cfg, kind);
    let settings = TrainSettings::from_config(cfg, cfg.train.batch_size);
    let hash = cfg.model_hash();
    let threshold = cfg.eval.threshold;
    let tolerance = cfg.eval.tolerance_deg;
    let scorer = |m: &DoaModel| -> Result<f64> {
        let counts: Result<Vec<Counts>> = val_data
            .par_iter()
            .zip(&val_truth)
            .map(|(ex, truth)| {
                let (outputs, _) = m.forward(&ex.features, &ex.spec)?;
                let mut c = Counts::default();
                for (t, angles) in truth.iter().enumerate().take(ex.features.nrows()) {
                    if angles.is_empty() {
                        continue;
                    }
                    let predicted = decode_frame(kind, &outputs, t, threshold);
                    c.add(match_and_score(&predicted, angles, tolerance));
                }
                Ok(c)
            })
            .collect();
        let mut total = Counts::default();
        for c in counts? {
            total.add(c);
        }
        Ok(total.f1())
    };
    let selector: Option<&dyn Fn(&DoaModel) -> Result<f64>> =
        if val_data.is_empty() { None } else { Some(&scorer) };
    let mut log_lines = format!(
        "# config_hash={hash} stage_version={STAGE_VERSION}\nepoch,train_loss,val_loss,val_f1,lr\n"
    );
    let outcome = train_model(&mut model, &train_data, &val_data, &settings, selector, |ep| {
        let f1 = ep.val_score.unwrap_or(f64::NAN);
        log_lines.push_str(&format!(
            "{},{:.8},{:.8},{:.6},{:.8}\n",
            ep.epoch, ep.train_loss, ep.val_loss, f1, ep.lr
        ));
        eprintln!(
            "[{kind}] epoch {:>3}  train {:.6}  val {:.6}  val_f1 {:.4}  lr {:.2e}",
            ep.epoch, ep.train_loss, ep.val_loss, f1, ep.lr
        );
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(err) => {
            if matches!(err, Error::Divergence(_)) {
                let diag = dirs.diverged_checkpoint_path(kind);
                create_parent(&diag)?;
                save_checkpoint(&diag, &model, None, &hash)?;
                eprintln!("[{kind}] diverged; diagnostic checkpoint at {}", diag.display());
            }
            return Err(err);
        }
    };

    let ckpt = dirs.checkpoint_path(kind);
    create_parent(&ckpt)?;
    save_checkpoint(&ckpt, &model, None, &hash)?;
    let log_path = dirs.train_log_path(kind);
    create_parent(&log_path)?;
    std::fs::write(&log_path, log_lines).map_err(|e| Error::io(&log_path, e))?;
    Ok(outcome)
}

/// Index of one inference run: enough per-utterance metadata to score the
/// cached model outputs at any threshold without touching the audio again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferIndex {
    pub config_hash: String,
    pub stage_version: u32,
    pub model: ModelKind,
    pub entries: Vec<InferEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferEntry {
    pub id: String,
    pub source_count: usize,
    pub sir_mode: SirMode,
    /// Smallest pairwise angle gap of the utterance, degrees.
    pub min_gap_deg: f64,
    pub frames: usize,
    /// Active ground-truth angles per frame (empty during silence).
    pub truth: Vec<Vec<f64>>,
}

/// Runs the trained model over the test split and caches raw SPS outputs
/// plus per-frame ground truth under `outputs/<kind>/`.
pub fn run_infer(cfg: &RunConfig, root: &Path, kind: ModelKind) -> Result<InferIndex> {
    let dirs = RunDirs::new(root);
    let manifest = load_manifest(cfg, &dirs)?;
    let hash = cfg.model_hash();
    let ckpt = dirs.checkpoint_path(kind);
    if !ckpt.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no checkpoint at {}; run `doanet train --model {kind}` first",
            ckpt.display()
        )));
    }
    let (model, _, ckpt_hash) = load_checkpoint(&ckpt, cfg)?;
    check_cache_hash(&ckpt, &ckpt_hash, &hash, "train")?;

    let mode = label_mode(kind);
    let test_entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    let entries: Result<Vec<InferEntry>> = test_entries
        .par_iter()
        .map(|entry| {
            let ex = load_example(cfg, &dirs, entry, mode)?;
            let meta = read_label_meta(cfg, &dirs, &entry.id)?;
            let (outputs, _) = model.forward(&ex.features, &ex.spec)?;
            let frames = ex.features.nrows();
            let branches = outputs.len();
            let mut flat = Vec::with_capacity(frames * branches * SPS_BINS);
            for t in 0..frames {
                for out in &outputs {
                    flat.extend(out.row(t).iter().copied());
                }
            }
            write_tensor(
                &dirs.sps_path(kind, &entry.id),
                MAGIC_OUTPUTS,
                &hash,
                &[frames as u32, branches as u32, SPS_BINS as u32],
                &flat,
            )?;
            let truth: Vec<Vec<f64>> = (0..frames).map(|t| meta.active_angles(t)).collect();
            Ok(InferEntry {
                id: entry.id.clone(),
                source_count: entry.sources.len(),
                sir_mode: entry.sir_mode,
                min_gap_deg: entry.min_angle_gap(),
                frames,
                truth,
            })
        })
        .collect();
    let index =
        InferIndex { config_hash: hash, stage_version: STAGE_VERSION, model: kind, entries: entries? };
    let index_path = dirs.infer_index_path(kind);
    create_parent(&index_path)?;
    let json = serde_json::to_string(&index).expect("index serializes");
    std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    Ok(index)
}

fn read_label_meta(cfg: &RunConfig, dirs: &RunDirs, id: &str) -> Result<LabelMeta> {
    let path = dirs.label_meta_path(id);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no label metadata at {}; run `doanet features` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: LabelMeta = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    check_cache_hash(&path, &meta.config_hash, &cfg.feature_hash(), "features")?;
    Ok(meta)
}

/// One utterance's cached inference output loaded back into memory:
/// metadata plus per-branch `[frames x 210]` SPS matrices.
pub struct LoadedInference {
    pub entry: InferEntry,
    pub sps: Vec<Array2<f64>>,
}

/// Loads the cached inference outputs for one model kind.
pub fn load_inference(cfg: &RunConfig, root: &Path, kind: ModelKind) -> Result<Vec<LoadedInference>> {
    let dirs = RunDirs::new(root);
    let index_path = dirs.infer_index_path(kind);
    if !index_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no inference outputs at {}; run `doanet infer --model {kind}` first",
            index_path.display()
        )));
    }
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: InferIndex = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", index_path.display())))?;
    check_cache_hash(&index_path, &index.config_hash, &cfg.model_hash(), "infer")?;
    index
        .entries
        .into_iter()
        .map(|entry| {
            let path = dirs.sps_path(kind, &entry.id);
            let (found, dims, data) = read_tensor(&path, MAGIC_OUTPUTS)?;
            check_cache_hash(&path, &found, &cfg.model_hash(), "infer")?;
            let (frames, branches, bins) =
                (dims[0] as usize, dims[1] as usize, dims[2] as usize);
            let mut sps = vec![Array2::zeros((frames, bins)); branches];
            for t in 0..frames {
                for (b, mat) in sps.iter_mut().enumerate() {
                    let base = (t * branches + b) * bins;
                    for j in 0..bins {
                        mat[(t, j)] = data[base + j];
                    }
                }
            }
            Ok(LoadedInference { entry, sps })
        })
        .collect()
}

/// Close-pair cutoff for the small-included-angle subset, degrees.
pub const SMALL_ANGLE_MAX_GAP: f64 = 15.0;

fn decode_frame(kind: ModelKind, sps: &[Array2<f64>], t: usize, threshold: f64) -> Vec<f64> {
    match kind {
        ModelKind::Miso => decode_miso(sps[0].row(t), threshold).angles,
        ModelKind::Mimo => {
            let views: Vec<_> = sps.iter().map(|m| m.row(t)).collect();
            decode_mimo(&views, threshold).angles
        }
    }
}

/// Scores cached inference outputs at one threshold. Frames without active
/// ground truth are skipped. Counts pool over frames (micro-averaging) into
/// an overall row plus per-source-count, per-SIR-mode and small-angle
/// subset rows.
pub fn score_inference(
    loaded: &[LoadedInference],
    kind: ModelKind,
    threshold: f64,
    tolerance_deg: f64,
) -> Vec<ScoreRow> {
    let mut overall = Counts::default();
    let mut by_sources: Vec<(usize, Counts)> = Vec::new();
    let mut by_sir: Vec<(SirMode, Counts)> = Vec::new();
    let mut small = Counts::default();
    let mut have_small = false;
    for li in loaded {
        let mut utt = Counts::default();
        for t in 0..li.entry.frames {
            let truth = &li.entry.truth[t];
            if truth.is_empty() {
                continue;
            }
            let predicted = decode_frame(kind, &li.sps, t, threshold);
            utt.add(match_and_score(&predicted, truth, tolerance_deg));
        }
        overall.add(utt);
        match by_sources.iter_mut().find(|(n, _)| *n == li.entry.source_count) {
            Some((_, c)) => c.add(utt),
            None => by_sources.push((li.entry.source_count, utt)),
        }
        match by_sir.iter_mut().find(|(m, _)| *m == li.entry.sir_mode) {
            Some((_, c)) => c.add(utt),
            None => by_sir.push((li.entry.sir_mode, utt)),
        }
        if li.entry.min_gap_deg < SMALL_ANGLE_MAX_GAP {
            small.add(utt);
            have_small = true;
        }
    }
    by_sources.sort_by_key(|(n, _)| *n);
    let model = kind.to_string();
    let mut rows = vec![ScoreRow::new(&model, "overall", threshold, overall)];
    for (n, c) in by_sources {
        rows.push(ScoreRow::new(&model, format!("sources={n}"), threshold, c));
    }
    for (m, c) in by_sir {
        let tag = match m {
            SirMode::Zero => "sir=zero",
            SirMode::Random => "sir=random",
        };
        rows.push(ScoreRow::new(&model, tag, threshold, c));
    }
    if have_small {
        rows.push(ScoreRow::new(&model, "subset=small_angle", threshold, small));
    }
    rows
}

fn write_rows(
    csv_path: &Path,
    json_path: &Path,
    hash: &str,
    rows: &[ScoreRow],
    ranges: Option<&[(String, MetricRange)]>,
) -> Result<()> {
    create_parent(csv_path)?;
    let csv = format!(
        "# config_hash={hash} stage_version={STAGE_VERSION}\n{}",
        eval::score_csv_string(rows)
    );
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    let payload = serde_json::json!({
        "config_hash": hash,
        "stage_version": STAGE_VERSION,
        "rows": rows,
        "metric_ranges": ranges,
    });
    let json = serde_json::to_string_pretty(&payload).expect("report serializes");
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
}

/// Scores the cached outputs of one model at a single threshold and writes
/// `reports/eval_<kind>.{csv,json}`.
pub fn run_evaluate(
    cfg: &RunConfig,
    root: &Path,
    kind: ModelKind,
    threshold: f64,
) -> Result<Vec<ScoreRow>> {
    let dirs = RunDirs::new(root);
    let loaded = load_inference(cfg, root, kind)?;
    let rows = score_inference(&loaded, kind, threshold, cfg.eval.tolerance_deg);
    write_rows(&dirs.eval_csv_path(kind), &dirs.eval_json_path(kind), &cfg.hash(), &rows, None)?;
    Ok(rows)
}

/// Scores one model across the whole 0.1..0.9 threshold grid (overall
/// group only) and writes `reports/sweep_<kind>.{csv,json}` including the
/// per-metric min/max/range summary.
pub fn run_sweep(cfg: &RunConfig, root: &Path, kind: ModelKind) -> Result<Vec<ScoreRow>> {
    let dirs = RunDirs::new(root);
    let loaded = load_inference(cfg, root, kind)?;
    let mut rows = Vec::new();
    for threshold in threshold_grid() {
        let all = score_inference(&loaded, kind, threshold, cfg.eval.tolerance_deg);
        rows.extend(all.into_iter().filter(|r| r.group == "overall"));
    }
    let ranges = metric_ranges(&rows);
    write_rows(&dirs.sweep_csv_path(kind), &dirs.sweep_json_path(kind), &cfg.hash(), &rows, Some(&ranges))?;
    Ok(rows)
}

#[derive(Deserialize)]
struct ReportPayload {
    config_hash: String,
    rows: Vec<ScoreRow>,
    metric_ranges: Option<Vec<(String, MetricRange)>>,
}

fn read_report_json(cfg: &RunConfig, path: &Path, stage: &str) -> Result<ReportPayload> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no report at {}; run `doanet {stage}` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let payload: ReportPayload = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    check_cache_hash(path, &payload.config_hash, &cfg.hash(), stage)?;
    Ok(payload)
}

fn markdown_table(rows: &[&ScoreRow]) -> String {
    let mut out = String::from(
        "| model | group | threshold | recall | precision | F1 |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.1} | {:.3} | {:.3} | {:.3} |\n",
            r.model, r.group, r.threshold, r.recall, r.precision, r.f1
        ));
    }
    out
}

/// Builds `reports/report.md` plus a combined CSV comparing both models
/// from the evaluate and sweep artifacts. Returns the Markdown text.
pub fn run_report(cfg: &RunConfig, root: &Path) -> Result<String> {
    let dirs = RunDirs::new(root);
    let hash = cfg.hash();
    let mut eval_rows: Vec<ScoreRow> = Vec::new();
    let mut sweep_rows: Vec<ScoreRow> = Vec::new();
    let mut ranges: Vec<(ModelKind, Vec<(String, MetricRange)>)> = Vec::new();
    for kind in [ModelKind::Miso, ModelKind::Mimo] {
        let stage = format!("evaluate --model {kind}");
        eval_rows.extend(read_report_json(cfg, &dirs.eval_json_path(kind), &stage)?.rows);
        let stage = format!("sweep --model {kind}");
        let payload = read_report_json(cfg, &dirs.sweep_json_path(kind), &stage)?;
        sweep_rows.extend(payload.rows);
        if let Some(r) = payload.metric_ranges {
            ranges.push((kind, r));
        }
    }

    let mut md = String::new();
    md.push_str("# DoA estimation report\n\n");
    md.push_str(&format!("config hash `{hash}`, stage version {STAGE_VERSION}\n\n"));
    md.push_str("## Fixed-threshold scores\n\n");
    md.push_str("Frame-level recall, precision and F1 on the test split with a 5 degree\n");
    md.push_str("match tolerance. Groups break the same frames down by source count, SIR\n");
    md.push_str("mode and the subset of utterances containing a source pair closer than\n");
    md.push_str("15 degrees.\n\n");
    md.push_str(&markdown_table(&eval_rows.iter().collect::<Vec<_>>()));
    md.push_str("\n## Threshold sweep\n\n");
    md.push_str("Overall scores at thresholds 0.1 to 0.9.\n\n");
    for kind in [ModelKind::Miso, ModelKind::Mimo] {
        let name = kind.to_string();
        let rows: Vec<&ScoreRow> = sweep_rows.iter().filter(|r| r.model == name).collect();
        md.push_str(&format!("### {name}\n\n"));
        md.push_str(&markdown_table(&rows));
        md.push('\n');
    }
    md.push_str("## Threshold sensitivity\n\n");
    md.push_str("Spread (max minus min) of each metric across the sweep. A smaller F1\n");
    md.push_str("spread means the model needs less threshold tuning.\n\n");
    md.push_str("| model | metric | min | max | range |\n|---|---|---|---|---|\n");
    for (kind, rs) in &ranges {
        for (metric, r) in rs {
            md.push_str(&format!(
                "| {kind} | {metric} | {:.3} | {:.3} | {:.3} |\n",
                r.min, r.max, r.range
            ));
        }
    }

    create_parent(&dirs.report_md_path())?;
    std::fs::write(dirs.report_md_path(), &md).map_err(|e| Error::io(dirs.report_md_path(), e))?;
    let mut combined = eval_rows.clone();
    combined.extend(sweep_rows.iter().cloned());
    let csv = format!(
        "# config_hash={hash} stage_version={STAGE_VERSION}\n{}",
        eval::score_csv_string(&combined)
    );
    std::fs::write(dirs.report_csv_path(), csv)
        .map_err(|e| Error::io(dirs.report_csv_path(), e))?;
    Ok(md)
}
