//! Spatial detection evaluation and frame-level presence evaluation.
//!
//! Matching is greedy by descending confidence within each
//! `(video, frame, class)` group. AP is the all-point interpolated area under
//! the precision-recall curve:
//!
//! ```text
//! AP = Σ_k (r_k − r_{k−1}) · max_{j ≥ k} p_j
//! ```
//!
//! where `(r_k, p_k)` is the recall/precision after the `k`-th ranked
//! detection.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PresenceRecord;
use crate::geometry::{Detection, GroundTruthBox, ToolClass, VideoMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("IoU threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("AP is undefined without ground-truth positives")]
    UndefinedAp,
    #[error("no class has a defined AP")]
    NoDefinedClasses,
    #[error("detection from video {0:?} passed with metadata for another video")]
    ForeignVideo(String),
    #[error("frame {frame} is outside video {video_id} ({n_frames} frames)")]
    FrameOutOfRange {
        video_id: String,
        frame: u32,
        n_frames: u32,
    },
    #[error("presence scores and labels cover different frames ({0})")]
    FrameSetMismatch(String),
}

/// Result of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Index into the detection slice passed to [`match_spatial`].
    pub detection: usize,
    pub confidence: f64,
    pub is_true_positive: bool,
    /// Index into the ground-truth slice, for true positives.
    pub matched_gt: Option<usize>,
}

/// Indices of `confidences` sorted descending; ties keep input order.
pub(crate) fn rank_by_confidence(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    order
}

/// Greedy matching of detections to ground truth. Returns one outcome per
/// detection, in ranked (descending confidence) order.
///
/// A detection matches the still-unmatched ground truth of its own video,
/// frame and class with the highest IoU, provided that IoU is at least
/// `iou_threshold`. Anything else, including a second detection of an
/// already-matched object, is a false positive.
pub fn match_spatial(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<Vec<MatchOutcome>, EvalError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::ThresholdOutOfRange(iou_threshold));
    }
    let mut groups: HashMap<(&str, u32, ToolClass), Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        groups
            .entry((g.video_id.as_str(), g.frame_index, g.tool))
            .or_default()
            .push(j);
    }
    let mut taken = vec![false; gts.len()];
    let confidences: Vec<f64> = dets.iter().map(|d| d.confidence).collect();

    let outcomes = rank_by_confidence(&confidences)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(candidates) = groups.get(&(d.video_id.as_str(), d.frame_index, d.tool)) {
                for &j in candidates {
                    if taken[j] {
                        continue;
                    }
                    let v = d.bbox.iou(&gts[j].bbox);
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
            }
            let matched = best.filter(|&(_, v)| v >= iou_threshold).map(|(j, _)| j);
            if let Some(j) = matched {
                taken[j] = true;
            }
            MatchOutcome {
                detection: i,
                confidence: d.confidence,
                is_true_positive: matched.is_some(),
                matched_gt: matched,
            }
        })
        .collect();
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall after each ranked prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

impl PrCurve {
    /// `hits[k]` is true when the `k`-th ranked prediction is correct.
    pub fn from_hits(hits: &[bool], n_gt: usize) -> Result<Self, EvalError> {
        if n_gt == 0 {
            return Err(EvalError::UndefinedAp);
        }
        let mut tp = 0usize;
        let points = hits
            .iter()
            .enumerate()
            .map(|(k, &hit)| {
                tp += usize::from(hit);
                PrPoint {
                    recall: tp as f64 / n_gt as f64,
                    precision: tp as f64 / (k + 1) as f64,
                }
            })
            .collect();
        Ok(PrCurve { points, n_gt })
    }

    /// All-point interpolated AP.
    pub fn average_precision(&self) -> f64 {
        let mut envelope = 0.0f64;
        let mut interpolated = vec![0.0; self.points.len()];
        for (k, p) in self.points.iter().enumerate().rev() {
            envelope = envelope.max(p.precision);
            interpolated[k] = envelope;
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (p, interp) in self.points.iter().zip(interpolated) {
            ap += (p.recall - prev_recall) * interp;
            prev_recall = p.recall;
        }
        ap
    }
}

/// AP of a ranked hit list against `n_gt` positives.
///
/// ```
/// use scopemetrics::eval::average_precision;
/// let ap = average_precision(&[true, false, true], 2).unwrap();
/// assert!((ap - 5.0 / 6.0).abs() < 1e-12);
/// ```
pub fn average_precision(hits: &[bool], n_gt: usize) -> Result<f64, EvalError> {
    Ok(PrCurve::from_hits(hits, n_gt)?.average_precision())
}

/// AP of outcomes already sorted by descending confidence.
pub fn ap_from_matches(outcomes: &[MatchOutcome], n_gt: usize) -> Result<f64, EvalError> {
    let hits: Vec<bool> = outcomes.iter().map(|o| o.is_true_positive).collect();
    average_precision(&hits, n_gt)
}

/// Arithmetic mean over the defined values.
pub fn mean_ap<I>(values: I) -> Result<f64, EvalError>
where
    I: IntoIterator<Item = Option<f64>>,
{
    // Running mean, so that n copies of v average to exactly v.
    let mut mean = None;
    for (k, v) in values.into_iter().flatten().enumerate() {
        mean = Some(match mean {
            None => v,
            Some(m) => m + (v - m) / (k + 1) as f64,
        });
    }
    mean.ok_or(EvalError::NoDefinedClasses)
}

/// Per-class AP (null where a class has no positives) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: BTreeMap<ToolClass, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl ApResult {
    pub fn from_per_class(per_class: BTreeMap<ToolClass, Option<f64>>) -> Result<Self, EvalError> {
        let map = mean_ap(per_class.values().copied())?;
        Ok(ApResult { per_class, map })
    }
}

/// Spatial AP for every class.
pub fn evaluate_spatial(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<ApResult, EvalError> {
    let outcomes = match_spatial(dets, gts, iou_threshold)?;
    let per_class = ToolClass::ALL
        .iter()
        .map(|&class| {
            let n_gt = gts.iter().filter(|g| g.tool == class).count();
            let hits: Vec<bool> = outcomes
                .iter()
                .filter(|o| dets[o.detection].tool == class)
                .map(|o| o.is_true_positive)
                .collect();
            (class, average_precision(&hits, n_gt).ok())
        })
        .collect();
    ApResult::from_per_class(per_class)
}

/// Frame-level presence scores, one row of seven per `(video, frame)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresenceScores {
    pub rows: BTreeMap<(String, u32), [f64; 7]>,
}

impl PresenceScores {
    pub fn score(&self, video_id: &str, frame: u32, class: ToolClass) -> Option<f64> {
        self.rows
            .get(&(video_id.to_string(), frame))
            .map(|r| r[class.index()])
    }

    pub fn merge(&mut self, other: PresenceScores) {
        self.rows.extend(other.rows);
    }

    /// Keeps only the frames that appear in `labels`.
    pub fn restrict_to(&self, labels: &[PresenceRecord]) -> PresenceScores {
        let wanted: BTreeSet<(&str, u32)> = labels
            .iter()
            .map(|l| (l.video_id.as_str(), l.frame_index))
            .collect();
        PresenceScores {
            rows: self
                .rows
                .iter()
                .filter(|((v, f), _)| wanted.contains(&(v.as_str(), *f)))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Converts detections to presence scores: the score of a class in a frame
/// is its highest detection confidence there, 0 when absent. Every frame of
/// the video gets a row.
pub fn to_presence(dets: &[Detection], meta: &VideoMeta) -> Result<PresenceScores, EvalError> {
    let mut rows: BTreeMap<(String, u32), [f64; 7]> = (0..meta.n_frames())
        .map(|f| ((meta.video_id().to_string(), f), [0.0; 7]))
        .collect();
    for d in dets {
        if d.video_id != meta.video_id() {
            return Err(EvalError::ForeignVideo(d.video_id.clone()));
        }
        let row = rows
            .get_mut(&(d.video_id.clone(), d.frame_index))
            .ok_or_else(|| EvalError::FrameOutOfRange {
                video_id: d.video_id.clone(),
                frame: d.frame_index,
                n_frames: meta.n_frames(),
            })?;
        let slot = &mut row[d.tool.index()];
        *slot = slot.max(d.confidence);
    }
    Ok(PresenceScores { rows })
}

/// Presence AP per class: frames ranked by score (ties in frame order),
/// a frame counts as a hit when its label is 1.
pub fn presence_ap(scores: &PresenceScores, labels: &[PresenceRecord]) -> Result<ApResult, EvalError> {
    let mut by_frame: BTreeMap<(&str, u32), &[bool; 7]> = BTreeMap::new();
    for l in labels {
        if by_frame.insert((l.video_id.as_str(), l.frame_index), &l.flags).is_some() {
            return Err(EvalError::FrameSetMismatch(format!(
                "duplicate label for {}/{}",
                l.video_id, l.frame_index
            )));
        }
    }
    if by_frame.len() != scores.rows.len()
        || !scores
            .rows
            .keys()
            .all(|(v, f)| by_frame.contains_key(&(v.as_str(), *f)))
    {
        return Err(EvalError::FrameSetMismatch(format!(
            "{} scored frames, {} labeled frames",
            scores.rows.len(),
            by_frame.len()
        )));
    }

    let frames: Vec<(&(String, u32), &[f64; 7])> = scores.rows.iter().collect();
    let per_class = ToolClass::ALL
        .iter()
        .map(|&class| {
            let c = class.index();
            let confidences: Vec<f64> = frames.iter().map(|(_, s)| s[c]).collect();
            let truth: Vec<bool> = frames
                .iter()
                .map(|((v, f), _)| by_frame[&(v.as_str(), *f)][c])
                .collect();
            let n_pos = truth.iter().filter(|&&t| t).count();
            let hits: Vec<bool> = rank_by_confidence(&confidences)
                .into_iter()
                .map(|i| truth[i])
                .collect();
            (class, average_precision(&hits, n_pos).ok())
        })
        .collect();
    ApResult::from_per_class(per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt_at(frame: u32, tool: ToolClass, bbox: BBox) -> GroundTruthBox {
        GroundTruthBox { video_id: "v".into(), frame_index: frame, tool, bbox }
    }

    fn det_at(frame: u32, tool: ToolClass, bbox: BBox, confidence: f64) -> Detection {
        Detection { video_id: "v".into(), frame_index: frame, tool, bbox, confidence }
    }

    /// A box sharing the left, top and height of (0,0,100,100) with IoU `k`.
    fn with_iou(k: f64) -> BBox {
        b(0.0, 0.0, 100.0 * k, 100.0)
    }

    const G: ToolClass = ToolClass::Grasper;

    #[test]
    fn single_match() {
        let gts = [gt_at(0, G, with_iou(1.0))];
        let out = match_spatial(&[det_at(0, G, with_iou(0.9), 0.5)], &gts, 0.5).unwrap();
        assert!(out[0].is_true_positive);
        assert_eq!(out[0].matched_gt, Some(0));
    }

    #[test]
    fn greedy_consumes_gt() {
        let gts = [gt_at(0, G, with_iou(1.0))];
        let dets = [det_at(0, G, with_iou(0.55), 0.8), det_at(0, G, with_iou(0.6), 0.9)];
        let out = match_spatial(&dets, &gts, 0.5).unwrap();
        assert_eq!(out[0].detection, 1);
        assert!(out[0].is_true_positive);
        assert!(!out[1].is_true_positive);
    }

    #[test]
    fn threshold_is_inclusive() {
        let gts = [gt_at(0, G, with_iou(1.0))];
        assert!(!match_spatial(&[det_at(0, G, with_iou(0.49), 0.5)], &gts, 0.5).unwrap()[0].is_true_positive);
        assert!(match_spatial(&[det_at(0, G, with_iou(0.5), 0.5)], &gts, 0.5).unwrap()[0].is_true_positive);
        assert_eq!(
            match_spatial(&[], &gts, 1.5),
            Err(EvalError::ThresholdOutOfRange(1.5))
        );
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false], 3).unwrap(), 0.0);
        assert_eq!(average_precision(&[true], 0), Err(EvalError::UndefinedAp));
        assert_eq!(average_precision(&[], 2).unwrap(), 0.0);
    }

    #[test]
    fn pr_curve_points() {
        let curve = PrCurve::from_hits(&[true, false, true], 2).unwrap();
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    }

    #[test]
    fn mean_ap_examples() {
        let spatial = [48.3, 67.0, 78.4, 67.7, 86.3, 17.5, 76.3].map(Some);
        assert!((mean_ap(spatial).unwrap() - 63.071_428_571).abs() < 1e-6);
        let presence = [87.2, 75.1, 95.3, 70.8, 88.4, 73.5, 82.1].map(Some);
        assert!((mean_ap(presence).unwrap() - 81.771_428_571).abs() < 1e-6);
        assert_eq!(mean_ap([Some(0.5)]).unwrap(), 0.5);
        assert_eq!(mean_ap([None, Some(0.25), None]).unwrap(), 0.25);
        assert_eq!(mean_ap([None]), Err(EvalError::NoDefinedClasses));
    }

    #[test]
    fn ap_result_json_shape() {
        let gts = [gt_at(0, G, with_iou(1.0))];
        let r = evaluate_spatial(&[det_at(0, G, with_iou(1.0), 0.9)], &gts, 0.5).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with(r#"{"per_class":{"grasper":1.0,"bipolar":null,"#));
        assert!(json.ends_with(r#""specimen_bag":null},"mAP":1.0}"#));
    }

    fn meta(n: u32) -> VideoMeta {
        VideoMeta::new("v", 1.0, 100, 100, n).unwrap()
    }

    #[test]
    fn presence_conversion() {
        let box_ = b(0.0, 0.0, 10.0, 10.0);
        let dets = [
            det_at(0, G, box_, 0.9),
            det_at(0, G, box_, 0.7),
            det_at(0, ToolClass::Hook, box_, 0.6),
            det_at(2, ToolClass::Clipper, box_, 0.4),
        ];
        let s = to_presence(&dets, &meta(3)).unwrap();
        assert_eq!(s.rows[&("v".to_string(), 0)], [0.9, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.rows[&("v".to_string(), 1)], [0.0; 7]);
        assert_eq!(s.score("v", 2, ToolClass::Clipper), Some(0.4));
        assert_eq!(s.score("v", 2, G), Some(0.0));

        let foreign = Detection { video_id: "w".into(), ..dets[0].clone() };
        assert_eq!(to_presence(&[foreign], &meta(3)), Err(EvalError::ForeignVideo("w".into())));
        assert!(matches!(
            to_presence(&[det_at(3, G, box_, 0.5)], &meta(3)),
            Err(EvalError::FrameOutOfRange { .. })
        ));
    }

    fn labels(flags: &[(u32, [bool; 7])]) -> Vec<PresenceRecord> {
        flags
            .iter()
            .map(|&(f, flags)| PresenceRecord { video_id: "v".into(), frame_index: f, flags })
            .collect()
    }

    fn scores(rows: &[(u32, [f64; 7])]) -> PresenceScores {
        PresenceScores { rows: rows.iter().map(|&(f, s)| (("v".to_string(), f), s)).collect() }
    }

    fn one(v: f64) -> [f64; 7] {
        [v, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    }

    fn flag(v: bool) -> [bool; 7] {
        [v, false, false, false, false, false, false]
    }

    #[test]
    fn presence_ap_examples() {
        let r = presence_ap(&scores(&[(0, one(0.9)), (1, one(0.1))]), &labels(&[(0, flag(true)), (1, flag(false))]))
            .unwrap();
        assert_eq!(r.per_class[&G], Some(1.0));
        // Only grasper has positives, so it alone defines the mean.
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[&ToolClass::Hook], None);

        let r = presence_ap(
            &scores(&[(0, one(0.9)), (1, one(0.8)), (2, one(0.7))]),
            &labels(&[(0, flag(true)), (1, flag(false)), (2, flag(true))]),
        )
        .unwrap();
        assert!((r.per_class[&G].unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn presence_frame_sets_must_agree() {
        let err = presence_ap(&scores(&[(0, one(0.9))]), &labels(&[(1, flag(true))]));
        assert!(matches!(err, Err(EvalError::FrameSetMismatch(_))));
        let dup = presence_ap(&scores(&[(0, one(0.9))]), &labels(&[(0, flag(true)), (0, flag(true))]));
        assert!(matches!(dup, Err(EvalError::FrameSetMismatch(_))));
        let none = presence_ap(&scores(&[(0, one(0.9))]), &labels(&[(0, flag(false))]));
        assert_eq!(none, Err(EvalError::NoDefinedClasses));
    }

    #[test]
    fn never_matches_across_class_or_frame() {
        let box_ = with_iou(1.0);
        let gts = [gt_at(0, G, box_)];
        let dets = [
            det_at(0, ToolClass::Hook, box_, 0.9),
            det_at(1, G, box_, 0.8),
            Detection { video_id: "w".into(), ..det_at(0, G, box_, 0.7) },
        ];
        assert!(match_spatial(&dets, &gts, 0.5).unwrap().iter().all(|o| !o.is_true_positive));
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruthBox>)> {
        let boxes = || (0.0..60.0f64, 0.0..60.0f64, 5.0..40.0f64, 5.0..40.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h));
        let gts = prop::collection::vec((0u32..3, 0usize..3, boxes()), 0..10)
            .prop_map(|v| v.into_iter().map(|(f, c, bx)| gt_at(f, ToolClass::ALL[c], bx)).collect::<Vec<_>>());
        let dets = prop::collection::vec((0u32..3, 0usize..3, boxes(), 0.0..1.0f64), 0..15)
            .prop_map(|v| v.into_iter().map(|(f, c, bx, s)| det_at(f, ToolClass::ALL[c], bx, s)).collect::<Vec<_>>());
        (dets, gts)
    }

    proptest! {
        #[test]
        fn each_gt_matched_at_most_once_and_within_group((dets, gts) in arb_scene()) {
            let out = match_spatial(&dets, &gts, 0.3).unwrap();
            let mut seen = BTreeSet::new();
            for o in &out {
                if let Some(j) = o.matched_gt {
                    prop_assert!(seen.insert(j));
                    let (d, g) = (&dets[o.detection], &gts[j]);
                    prop_assert!(d.tool == g.tool && d.frame_index == g.frame_index);
                }
            }
        }

        #[test]
        fn ap_bounded_and_ranking_only((dets, gts) in arb_scene()) {
            let Ok(base) = evaluate_spatial(&dets, &gts, 0.5) else { return Ok(()); };
            for ap in base.per_class.values().flatten() {
                prop_assert!((0.0..=1.0).contains(ap));
            }
            let squashed: Vec<Detection> = dets.iter()
                .map(|d| Detection { confidence: d.confidence.powi(3) * 0.5, ..d.clone() })
                .collect();
            prop_assert_eq!(evaluate_spatial(&squashed, &gts, 0.5).unwrap(), base);
        }

        #[test]
        fn trailing_false_positive_never_helps(hits in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
            let n_gt = hits.iter().filter(|h| **h).count() + extra;
            prop_assume!(n_gt > 0);
            let before = average_precision(&hits, n_gt).unwrap();
            let mut more = hits.clone();
            more.push(false);
            prop_assert!(average_precision(&more, n_gt).unwrap() <= before);
        }

        #[test]
        fn mean_of_identical_values_is_exact(v in 0.0..1.0f64, n in 1usize..8) {
            prop_assert_eq!(mean_ap(std::iter::repeat_n(Some(v), n)).unwrap(), v);
        }
    }
}
