//! Decoding predicted spatial pseudo-spectra into angle sets and scoring
//! them against ground truth.
//!
//! Two decoders exist on purpose. The pooled-spectrum decoder picks peaks
//! iteratively and suppresses everything within 15 degrees of each pick,
//! which structurally caps it at one detection per 15-degree neighborhood.
//! The per-branch decoder takes at most one argmax per branch and so has no
//! such cap; the scorer makes the difference measurable.

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::config::ModelKind;
use crate::error::{Error, Result};
use crate::features::{SPS_BINS, SPS_PAD};
use crate::room::{ExperimentManifest, ManifestEntry};

/// Suppression / beam half-width in SPS indices (1 index = 1 degree).
pub const SUPPRESSION_RADIUS: usize = 15;
/// Angles from different branches closer than this are one detection.
pub const DEDUP_DEGREES: f64 = 1.0;
pub const DEFAULT_TOLERANCE_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    /// Predicted angles in degrees, ascending, within [0, 180].
    pub angles: Vec<f64>,
    pub kind: ModelKind,
    pub threshold: f64,
}

fn index_to_angle(i: usize) -> f64 {
    (i as f64 - SPS_PAD).clamp(0.0, 180.0)
}

/// Iterative peak picking on a pooled spectrum: take the largest value
/// above the threshold, emit its angle, zero every index whose angle lies
/// within 15 degrees of it, repeat until no candidate remains. Suppression
/// works on the clamped angles, not raw indices, so the pad indices that
/// all clamp to 0 or 180 degrees count as one neighborhood; that is what
/// keeps the emitted angles pairwise more than 15 degrees apart.
pub fn decode_miso(sps: ArrayView1<'_, f64>, threshold: f64) -> DecodedFrame {
    assert_eq!(sps.len(), SPS_BINS, "expected a {SPS_BINS}-bin spectrum");
    let mut values: Vec<f64> = sps.to_vec();
    let mut angles = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if v > threshold && best.map_or(true, |b| v > values[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        let picked = index_to_angle(i);
        angles.push(picked);
        for (j, v) in values.iter_mut().enumerate() {
            if (index_to_angle(j) - picked).abs() <= SUPPRESSION_RADIUS as f64 {
                *v = 0.0;
            }
        }
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    DecodedFrame { angles, kind: ModelKind::Miso, threshold }
}

/// Per-branch argmax decoding: each branch contributes its peak angle when
/// the peak exceeds the threshold; angles within 1 degree of an earlier one
/// are treated as duplicates of the same source.
pub fn decode_mimo(branches: &[ArrayView1<'_, f64>], threshold: f64) -> DecodedFrame {
    let mut angles: Vec<f64> = Vec::with_capacity(branches.len());
    for sps in branches {
        assert_eq!(sps.len(), SPS_BINS, "expected a {SPS_BINS}-bin spectrum");
        let (argmax, max) = sps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if max > threshold {
            angles.push(index_to_angle(argmax));
        }
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut deduped: Vec<f64> = Vec::with_capacity(angles.len());
    for a in angles {
        if deduped.last().map_or(true, |&p| a - p > DEDUP_DEGREES) {
            deduped.push(a);
        }
    }
    DecodedFrame { angles: deduped, kind: ModelKind::Mimo, threshold }
}

/// Micro-averageable match counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-to-one greedy matching by ascending absolute error; a pair counts
/// only when its error is strictly below the tolerance. Unmatched
/// predictions are false positives, unmatched truths false negatives.
pub fn match_and_score(predicted: &[f64], truth: &[f64], tolerance_deg: f64) -> Counts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &p) in predicted.iter().enumerate() {
        for (j, &t) in truth.iter().enumerate() {
            let err = (p - t).abs();
            if err < tolerance_deg {
                pairs.push((err, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pred_used = vec![false; predicted.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut tp = 0u64;
    for (_, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: predicted.len() as u64 - tp,
        fn_: truth.len() as u64 - tp,
    }
}

/// One row of a score report: pooled counts for a group of frames plus the
/// derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    /// Grouping key, e.g. "overall", "sources=2", "subset=small_angle".
    pub group: String,
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: Counts,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl ScoreRow {
    pub fn new(model: impl Into<String>, group: impl Into<String>, threshold: f64, counts: Counts) -> Self {
        Self {
            model: model.into(),
            group: group.into(),
            threshold,
            counts,
            recall: counts.recall(),
            precision: counts.precision(),
            f1: counts.f1(),
        }
    }
}

pub fn score_csv_string(rows: &[ScoreRow]) -> String {
    let mut out = String::from("model,group,threshold,tp,fp,fn,recall,precision,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.model, r.group, r.threshold, r.counts.tp, r.counts.fp, r.counts.fn_, r.recall,
            r.precision, r.f1
        ));
    }
    out
}

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    std::fs::write(path, score_csv_string(rows)).map_err(|e| Error::io(path, e))
}

pub fn write_score_json(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let json = serde_json::to_string_pretty(rows).expect("rows serialize");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// The sweep grid: 0.1 to 0.9 in steps of 0.1.
pub fn threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRange {
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

/// Min, max and spread of each metric across a sweep's rows.
pub fn metric_ranges(rows: &[ScoreRow]) -> Vec<(String, MetricRange)> {
    let columns: [(&str, fn(&ScoreRow) -> f64); 3] = [
        ("recall", |r| r.recall),
        ("precision", |r| r.precision),
        ("f1", |r| r.f1),
    ];
    columns
        .iter()
        .map(|(name, get)| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for r in rows {
                min = min.min(get(r));
                max = max.max(get(r));
            }
            (name.to_string(), MetricRange { min, max, range: max - min })
        })
        .collect()
}

/// True when some source pair sits closer than `max_gap_deg`.
pub fn has_close_pair(entry: &ManifestEntry, max_gap_deg: f64) -> bool {
    entry.min_angle_gap() < max_gap_deg
}

/// Utterances whose truth contains an included angle below `max_gap_deg`.
pub fn small_angle_subset<'a>(
    manifest: &'a ExperimentManifest,
    max_gap_deg: f64,
) -> Vec<&'a ManifestEntry> {
    manifest.entries.iter().filter(|e| has_close_pair(e, max_gap_deg)).collect()
}
