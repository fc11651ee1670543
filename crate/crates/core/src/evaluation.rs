//! Video-level detection metrics (ROC-AUC, F1 at a validation-calibrated
//! threshold) and single-point localization metrics based on 5 mm
//! point matching.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregate::{FrameDetections, Level, PredictionRecord};
use crate::data::{Dataset, Point};
use crate::error::{Error, Result};

/// A detection matches an annotated origin when strictly closer than this.
pub const MATCH_RADIUS_MM: f64 = 5.0;

const TIE_TOLERANCE: f64 = 1e-12;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_scores(labels: &[bool], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Computed from midranks.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_scores(labels, scores)?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedAuc {
            positives: np,
            negatives: nn,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so tied midranks stay integral.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let midrank_x2 = (i + j + 2) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum_x2 += midrank_x2 * tied_pos;
        i = j + 1;
    }
    let np64 = np as u64;
    let u_x2 = rank_sum_x2 - np64 * (np64 + 1);
    Ok((u_x2 as f64 / 2.0) / (np as f64 * nn as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn at_threshold(labels: &[bool], scores: &[f64], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&l, &s) in labels.iter().zip(scores) {
            match (l, s >= threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic_mean(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Candidate thresholds: the smallest and largest distinct scores plus the
/// midpoints between consecutive distinct scores, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() * 2);
    if let Some(&lo) = distinct.first() {
        out.push(lo);
    }
    for w in distinct.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    if distinct.len() > 1 {
        out.push(distinct[distinct.len() - 1]);
    }
    out
}

/// Threshold that balances precision and recall on validation data: the
/// candidate minimizing |precision - recall|, preferring the larger
/// threshold on ties.
pub fn select_threshold(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_scores(labels, scores)?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedAuc {
            positives: np,
            negatives: nn,
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for t in candidate_thresholds(scores) {
        let c = Confusion::at_threshold(labels, scores, t);
        let gap = (c.precision() - c.recall()).abs();
        match best {
            Some((best_gap, _)) if gap > best_gap + TIE_TOLERANCE => {}
            _ => best = Some((gap, t)),
        }
    }
    Ok(best.map(|(_, t)| t).expect("at least one candidate"))
}

/// F1 of the decisions `score >= threshold`; 0 when precision and recall
/// are both 0.
pub fn f1_detection(labels: &[bool], scores: &[f64], threshold: f64) -> f64 {
    Confusion::at_threshold(labels, scores, threshold).f1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Matches detections to annotated origins one-to-one. A pair is eligible
/// when its distance is strictly below `radius_mm`; the number of true
/// positives is the size of a maximum-cardinality matching.
pub fn match_points(
    annotations: &[Point],
    detections: &[Point],
    px_spacing_mm: f64,
    radius_mm: f64,
) -> MatchCounts {
    let adjacency: Vec<Vec<usize>> = annotations
        .iter()
        .map(|a| {
            detections
                .iter()
                .enumerate()
                .filter(|(_, d)| a.distance(d) * px_spacing_mm < radius_mm)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let tp = maximum_matching(&adjacency, detections.len());
    MatchCounts {
        tp,
        fp: detections.len() - tp,
        fn_: annotations.len() - tp,
    }
}

/// Size of a maximum bipartite matching via augmenting paths.
fn maximum_matching(adjacency: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    let mut size = 0;
    for u in 0..adjacency.len() {
        let mut seen = vec![false; n_right];
        if augment(u, adjacency, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationCounts {
    pub video_id: String,
    #[serde(flatten)]
    pub counts: MatchCounts,
}

/// Sums match counts over the annotated frames of one video. Frames without
/// annotations are not evaluated.
pub fn localization_counts(
    video_id: &str,
    annotated: &BTreeMap<usize, Vec<Point>>,
    detected: &BTreeMap<usize, Vec<Point>>,
    px_spacing_mm: f64,
) -> LocalizationCounts {
    let mut counts = MatchCounts::default();
    for (frame, origins) in annotated {
        let dets = detected.get(frame).map(Vec::as_slice).unwrap_or(&[]);
        counts += match_points(origins, dets, px_spacing_mm, MATCH_RADIUS_MM);
    }
    LocalizationCounts {
        video_id: video_id.to_string(),
        counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-video precision and recall are averaged over videos first; F1 is the
/// harmonic mean of the two averages. A video without detections has
/// precision 1.
pub fn localization_f1(per_video: &[LocalizationCounts]) -> Result<LocalizationMetrics> {
    if per_video.is_empty() {
        return Err(Error::EmptyEvaluation("no annotated videos".into()));
    }
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for v in per_video {
        let c = v.counts;
        if c.tp + c.fn_ == 0 {
            return Err(Error::EmptyEvaluation(format!(
                "video {} has no annotated origins",
                v.video_id
            )));
        }
        p_sum += if c.tp + c.fp == 0 {
            1.0
        } else {
            c.tp as f64 / (c.tp + c.fp) as f64
        };
        r_sum += c.tp as f64 / (c.tp + c.fn_) as f64;
    }
    let n = per_video.len() as f64;
    let (precision, recall) = (p_sum / n, r_sum / n);
    Ok(LocalizationMetrics {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    })
}

/// Annotations of two observers for one video.
#[derive(Debug, Clone)]
pub struct ObserverPair<'a> {
    pub video_id: &'a str,
    pub px_spacing_mm: f64,
    pub first: &'a BTreeMap<usize, Vec<Point>>,
    pub second: &'a BTreeMap<usize, Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterObserverReport {
    /// Second observer scored against the first as reference.
    pub first_as_reference: LocalizationMetrics,
    /// First observer scored against the second as reference.
    pub second_as_reference: LocalizationMetrics,
    pub evaluated_frames: usize,
    pub warnings: Vec<String>,
}

/// Agreement between two observers, evaluated on the frames both annotated.
/// Each direction skips videos where its reference marked no origins.
pub fn interobserver_agreement(videos: &[ObserverPair<'_>]) -> Result<InterObserverReport> {
    let mut warnings = Vec::new();
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    let mut evaluated_frames = 0;
    for v in videos {
        let common: Vec<usize> = v
            .first
            .keys()
            .filter(|f| v.second.contains_key(f))
            .copied()
            .collect();
        if common.len() != v.first.len() || common.len() != v.second.len() {
            warnings.push(format!(
                "video {}: observers cover different frames, using {} shared frames",
                v.video_id,
                common.len()
            ));
        }
        evaluated_frames += common.len();
        let restrict = |m: &BTreeMap<usize, Vec<Point>>| -> BTreeMap<usize, Vec<Point>> {
            common.iter().map(|f| (*f, m[f].clone())).collect()
        };
        let a = restrict(v.first);
        let b = restrict(v.second);
        let ab = localization_counts(v.video_id, &a, &b, v.px_spacing_mm);
        let ba = localization_counts(v.video_id, &b, &a, v.px_spacing_mm);
        if ab.counts.tp + ab.counts.fn_ > 0 {
            forward.push(ab);
        }
        if ba.counts.tp + ba.counts.fn_ > 0 {
            backward.push(ba);
        }
    }
    Ok(InterObserverReport {
        first_as_reference: localization_f1(&forward)?,
        second_as_reference: localization_f1(&backward)?,
        evaluated_frames,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoOutcome {
    pub video_id: String,
    pub score: f64,
    pub label: u8,
    pub decision: u8,
}

/// Localization over the annotated frames of `video_ids` against the
/// reference annotator. Videos without annotated origins are skipped.
pub fn evaluate_localization(
    dataset: &Dataset,
    detections: &[FrameDetections],
    video_ids: &[String],
) -> Result<(Vec<LocalizationCounts>, LocalizationMetrics)> {
    let mut by_video: BTreeMap<&str, BTreeMap<usize, Vec<Point>>> = BTreeMap::new();
    for d in detections {
        by_video
            .entry(d.video_id.as_str())
            .or_default()
            .entry(d.frame_index)
            .or_default()
            .extend(d.detections.iter().map(|o| Point::new(o.row, o.col)));
    }
    let empty = BTreeMap::new();
    let mut per_video = Vec::new();
    for id in video_ids {
        let video = dataset
            .video(id)
            .ok_or_else(|| Error::UnknownVideo(id.clone()))?;
        let annotated = dataset.origins_by_frame(id, None);
        if annotated.values().all(Vec::is_empty) {
            continue;
        }
        let detected = by_video.get(id.as_str()).unwrap_or(&empty);
        per_video.push(localization_counts(id, &annotated, detected, video.px_spacing_mm));
    }
    let metrics = localization_f1(&per_video)?;
    Ok((per_video, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub per_video: Vec<VideoOutcome>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model_id: String,
    pub level: Level,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub localization: Option<LocalizationMetrics>,
    pub per_video: Vec<VideoOutcome>,
}

impl Report {
    pub const CSV_HEADER: &'static str =
        "model_id,level,auc,f1,threshold,loc_precision,loc_recall,loc_f1";

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{:.6},{:.6},{:.6}",
            self.model_id, self.level, self.auc, self.f1, self.threshold
        );
        match &self.localization {
            Some(l) => {
                let _ = write!(row, ",{:.6},{:.6},{:.6}", l.precision, l.recall, l.f1);
            }
            None => row.push_str(",,,"),
        }
        row
    }
}

fn labelled(records: &[&PredictionRecord]) -> Result<(Vec<bool>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.ok_or_else(|| Error::Format {
            file: "predictions.jsonl".into(),
            reason: format!("video {} carries no label", r.video_id),
        })?;
        labels.push(label != 0);
        scores.push(r.video_score);
    }
    Ok((labels, scores))
}

/// Calibrates the threshold on the `validation` records (unless one is
/// given) and scores the `test` records.
pub fn evaluate_detection(
    records: &[PredictionRecord],
    threshold: Option<f64>,
) -> Result<DetectionReport> {
    let subset = |name: &str| -> Vec<&PredictionRecord> {
        records
            .iter()
            .filter(|r| r.subset.as_deref() == Some(name))
            .collect()
    };
    let validation = subset("validation");
    let test = subset("test");
    if test.is_empty() {
        return Err(Error::EmptyEvaluation("no test-subset predictions".into()));
    }
    let threshold = match threshold {
        Some(t) => t,
        None => {
            if validation.is_empty() {
                return Err(Error::EmptyEvaluation(
                    "no validation-subset predictions to calibrate the threshold".into(),
                ));
            }
            let (labels, scores) = labelled(&validation)?;
            select_threshold(&labels, &scores)?
        }
    };
    let (labels, scores) = labelled(&test)?;
    let auc = roc_auc(&labels, &scores)?;
    let f1 = f1_detection(&labels, &scores, threshold);
    let per_video = test
        .iter()
        .zip(&labels)
        .map(|(r, &l)| VideoOutcome {
            video_id: r.video_id.clone(),
            score: r.video_score,
            label: u8::from(l),
            decision: u8::from(r.video_score >= threshold),
        })
        .collect();
    Ok(DetectionReport {
        auc,
        f1,
        threshold,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[true, true, false], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[true, false, true, false], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(
            roc_auc(&[true, false, true, false], &[0.9, 0.8, 0.4, 0.1]).unwrap(),
            0.75
        );
        assert!(matches!(
            roc_auc(&[true, true], &[0.1, 0.2]),
            Err(Error::UndefinedAuc { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let t = select_threshold(&[true, true, false, false], &[0.9, 0.8, 0.2, 0.1]).unwrap();
        assert_eq!(t, 0.5);
        let t = select_threshold(&[true, true, false, false], &[0.9, 0.6, 0.7, 0.1]).unwrap();
        assert!((t - 0.65).abs() < 1e-12);
        let t = select_threshold(&[true, false], &[0.4, 0.4]).unwrap();
        assert_eq!(t, 0.4);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_detection(&[true, false], &[0.9, 0.1], 0.5), 1.0);
        assert_eq!(f1_detection(&[true, false], &[0.1, 0.1], 0.5), 0.0);
        // TP=3, FP=1, FN=2
        let labels = [true, true, true, false, true, true];
        let scores = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2];
        assert!((f1_detection(&labels, &scores, 0.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_examples() {
        let a = [Point::new(10.0, 10.0)];
        // 1 mm away at 0.5 mm/px.
        let m = match_points(&a, &[Point::new(10.0, 12.0)], 0.5, MATCH_RADIUS_MM);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_points(
            &a,
            &[Point::new(10.0, 12.0), Point::new(12.0, 10.0)],
            0.5,
            MATCH_RADIUS_MM,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn two_by_two_full_graph() {
        // Annotations 6 mm apart; both detections within 5 mm of both.
        let a = [Point::new(0.0, 0.0), Point::new(0.0, 6.0)];
        let d = [Point::new(0.0, 3.0), Point::new(3.0, 3.0)];
        let m = match_points(&a, &d, 1.0, MATCH_RADIUS_MM);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    }

    #[test]
    fn maximum_matching_beats_greedy() {
        // Nearest-first from the first annotation would take the middle
        // detection and strand the second annotation.
        let a = [Point::new(0.0, 0.0), Point::new(0.0, 6.0)];
        let d = [Point::new(0.0, 3.5), Point::new(0.0, -4.0)];
        let m = match_points(&a, &d, 1.0, MATCH_RADIUS_MM);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    }

    #[test]
    fn exactly_five_mm_does_not_match() {
        let m = match_points(&[Point::new(0.0, 0.0)], &[Point::new(0.0, 10.0)], 0.5, 5.0);
        assert_eq!(m.tp, 0);
    }

    #[test]
    fn localization_averaging_order() {
        let v = |id: &str, tp, fp, fn_| LocalizationCounts {
            video_id: id.into(),
            counts: MatchCounts { tp, fp, fn_ },
        };
        // (P, R) = (0.5, 1.0) and (1.0, 0.5)
        let m = localization_f1(&[v("a", 2, 2, 0), v("b", 1, 0, 1)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
        let m = localization_f1(&[v("a", 0, 0, 3)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 0.0, 0.0));
        assert!(localization_f1(&[]).is_err());
    }

    #[test]
    fn interobserver_identical_and_disjoint() {
        let a: BTreeMap<usize, Vec<Point>> =
            [(0, vec![Point::new(10.0, 10.0)]), (4, vec![Point::new(10.0, 50.0)])].into();
        let far: BTreeMap<usize, Vec<Point>> =
            [(0, vec![Point::new(100.0, 100.0)]), (4, vec![Point::new(100.0, 200.0)])].into();
        let same = interobserver_agreement(&[ObserverPair {
            video_id: "v",
            px_spacing_mm: 0.5,
            first: &a,
            second: &a,
        }])
        .unwrap();
        assert_eq!(same.first_as_reference.f1, 1.0);
        let apart = interobserver_agreement(&[ObserverPair {
            video_id: "v",
            px_spacing_mm: 0.5,
            first: &a,
            second: &far,
        }])
        .unwrap();
        assert_eq!(apart.first_as_reference.f1, 0.0);
        assert_eq!(apart.second_as_reference.f1, 0.0);
    }

    #[test]
    fn interobserver_uses_shared_frames() {
        let a: BTreeMap<usize, Vec<Point>> =
            [(0, vec![Point::new(10.0, 10.0)]), (4, vec![Point::new(10.0, 50.0)])].into();
        let b: BTreeMap<usize, Vec<Point>> = [(0, vec![Point::new(10.0, 11.0)])].into();
        let r = interobserver_agreement(&[ObserverPair {
            video_id: "v",
            px_spacing_mm: 0.5,
            first: &a,
            second: &b,
        }])
        .unwrap();
        assert_eq!(r.evaluated_frames, 1);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.first_as_reference.f1, 1.0);
    }
}
