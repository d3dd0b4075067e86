//! Region-proposal training math: anchor grids, objectness label
//! assignment, box-delta parameterization, the two-term RPN loss with its
//! analytic gradient, and greedy non-maximum suppression.
//!
//! The loss over anchors `i` is
//!
//! ```text
//! L = (1/N_cls) Σ_i BCE(p_i, p*_i) + λ (1/N_reg) Σ_i p*_i · smoothL1(t_i − t*_i)
//! ```
//!
//! where `p*_i` is 1 for positive anchors and 0 for negative ones. Anchors
//! labeled `Ignore` contribute to neither sum.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Detection, GeometryError, VideoMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RpnError {
    #[error("invalid anchor config: {0}")]
    InvalidConfig(String),
    #[error("stride {stride} leaves no grid positions on a {width}x{height} image")]
    EmptyGrid { stride: u32, width: u32, height: u32 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("every anchor is ignored; the loss is undefined")]
    NoAnchors,
    #[error("positive anchor {0} has no regression target")]
    MissingTarget(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Anchor grid and labeling thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub stride: u32,
    /// Side length of the square anchor with the same area, in pixels.
    pub scales: Vec<f64>,
    /// Width-to-height ratios.
    pub aspect_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 16,
            scales: vec![128.0, 256.0, 512.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.8,
            neg_iou: 0.3,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), RpnError> {
        let fail = |m: &str| Err(RpnError::InvalidConfig(m.to_string()));
        if self.stride < 1 {
            return fail("stride must be at least 1");
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return fail("scales and aspect ratios must be non-empty");
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("scales and aspect ratios must be positive");
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return fail("need 0 <= neg_iou < pos_iou <= 1");
        }
        Ok(())
    }

    /// Grid positions per axis, `(columns, rows)`.
    pub fn grid_size(&self, meta: &VideoMeta) -> (u32, u32) {
        (meta.width() / self.stride, meta.height() / self.stride)
    }

    /// Number of grid positions; the default regression normalizer.
    pub fn grid_positions(&self, meta: &VideoMeta) -> usize {
        let (nx, ny) = self.grid_size(meta);
        nx as usize * ny as usize
    }

    /// Anchors before clipping: positions × scales × ratios.
    pub fn unclipped_count(&self, meta: &VideoMeta) -> usize {
        self.grid_positions(meta) * self.scales.len() * self.aspect_ratios.len()
    }
}

/// One anchor per (grid position, scale, ratio), centered at
/// `stride·j + stride/2`, clipped to the image. Anchors with no area left
/// after clipping are dropped. Order is row-major, then scale, then ratio.
pub fn generate_anchors(meta: &VideoMeta, cfg: &AnchorConfig) -> Result<Vec<BBox>, RpnError> {
    cfg.validate()?;
    let (nx, ny) = cfg.grid_size(meta);
    if nx == 0 || ny == 0 {
        return Err(RpnError::EmptyGrid {
            stride: cfg.stride,
            width: meta.width(),
            height: meta.height(),
        });
    }
    let stride = cfg.stride as f64;
    let (w_img, h_img) = (meta.width() as f64, meta.height() as f64);
    let mut anchors = Vec::with_capacity(cfg.unclipped_count(meta));
    for row in 0..ny {
        let cy = stride * row as f64 + stride / 2.0;
        for col in 0..nx {
            let cx = stride * col as f64 + stride / 2.0;
            for &scale in &cfg.scales {
                for &ratio in &cfg.aspect_ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    let corners = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
                    let [x0, y0, x1, y1] = [
                        corners[0].clamp(0.0, w_img),
                        corners[1].clamp(0.0, h_img),
                        corners[2].clamp(0.0, w_img),
                        corners[3].clamp(0.0, h_img),
                    ];
                    if let Ok(b) = BBox::new(x0, y0, x1, y1) {
                        anchors.push(b);
                    }
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objectness {
    Positive,
    Negative,
    Ignore,
}

/// Objectness label plus, for positives, the ground-truth index it regresses to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorLabel {
    value: Objectness,
    matched_gt: Option<usize>,
}

impl AnchorLabel {
    pub fn positive(gt: usize) -> Self {
        AnchorLabel {
            value: Objectness::Positive,
            matched_gt: Some(gt),
        }
    }

    pub fn negative() -> Self {
        AnchorLabel {
            value: Objectness::Negative,
            matched_gt: None,
        }
    }

    pub fn ignore() -> Self {
        AnchorLabel {
            value: Objectness::Ignore,
            matched_gt: None,
        }
    }

    pub fn value(&self) -> Objectness {
        self.value
    }

    pub fn matched_gt(&self) -> Option<usize> {
        self.matched_gt
    }

    pub fn is_positive(&self) -> bool {
        self.value == Objectness::Positive
    }

    pub fn is_labeled(&self) -> bool {
        self.value != Objectness::Ignore
    }
}

/// Tolerance for treating two IoUs as tied at a ground truth's maximum.
pub const ARGMAX_TIE_TOLERANCE: f64 = 1e-12;

/// Labels each anchor against the ground-truth boxes.
///
/// * positive: best IoU over all ground truths is above `pos_iou`;
/// * positive (fallback): for a ground truth no anchor exceeds `pos_iou`
///   with, every anchor attaining that ground truth's maximum IoU (ties
///   within [`ARGMAX_TIE_TOLERANCE`]) is positive, provided the maximum is
///   above zero;
/// * negative: best IoU below `neg_iou` and not positive by fallback;
/// * ignore: everything else.
///
/// `matched_gt` is the ground truth with the anchor's highest IoU, lowest
/// index on ties.
pub fn assign_labels(anchors: &[BBox], gts: &[BBox], cfg: &AnchorConfig) -> Result<Vec<AnchorLabel>, RpnError> {
    if anchors.is_empty() {
        return Err(RpnError::LengthMismatch("anchor list is empty".into()));
    }
    if gts.is_empty() {
        return Ok(vec![AnchorLabel::negative(); anchors.len()]);
    }

    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(g)).collect())
        .collect();

    let best: Vec<(usize, f64)> = ious
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
        })
        .collect();

    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(j, v)| {
            if v > cfg.pos_iou {
                AnchorLabel::positive(j)
            } else if v < cfg.neg_iou {
                AnchorLabel::negative()
            } else {
                AnchorLabel::ignore()
            }
        })
        .collect();

    for j in 0..gts.len() {
        let gt_max = ious.iter().map(|row| row[j]).fold(0.0, f64::max);
        if gt_max > cfg.pos_iou || gt_max <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] >= gt_max - ARGMAX_TIE_TOLERANCE {
                labels[i] = AnchorLabel::positive(best[i].0);
            }
        }
    }
    Ok(labels)
}

/// Center/size box regression target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        BoxDelta { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn center_size(b: &BBox) -> (f64, f64, f64, f64) {
    let c = b.centroid();
    (c.x, c.y, b.width(), b.height())
}

/// `tx = (xg − xa)/wa`, `ty = (yg − ya)/ha`, `tw = ln(wg/wa)`, `th = ln(hg/ha)`.
pub fn encode_delta(anchor: &BBox, gt: &BBox) -> BoxDelta {
    let (xa, ya, wa, ha) = center_size(anchor);
    let (xg, yg, wg, hg) = center_size(gt);
    BoxDelta {
        tx: (xg - xa) / wa,
        ty: (yg - ya) / ha,
        tw: (wg / wa).ln(),
        th: (hg / ha).ln(),
    }
}

/// Inverse of [`encode_delta`]. Fails when the decoded box leaves the
/// non-negative quadrant or is not finite.
pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> Result<BBox, RpnError> {
    let (xa, ya, wa, ha) = center_size(anchor);
    let cx = xa + d.tx * wa;
    let cy = ya + d.ty * ha;
    let w = wa * d.tw.exp();
    let h = ha * d.th.exp();
    Ok(BBox::from_center(cx, cy, w, h)?)
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Lower clamp applied to objectness probabilities on ingest; the upper
/// clamp is `1 − PROB_EPSILON`.
pub const PROB_EPSILON: f64 = 1e-7;

/// Everything the loss needs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnBatch {
    pub anchors: Vec<BBox>,
    pub labels: Vec<AnchorLabel>,
    /// Predicted objectness `p_i`, clamped into `[ε, 1 − ε]`.
    pub objectness: Vec<f64>,
    /// Predicted deltas `t_i`.
    pub predicted: Vec<BoxDelta>,
    /// Target deltas `t*_i`, present at positive anchors.
    pub targets: Vec<Option<BoxDelta>>,
    pub lambda: f64,
    pub n_cls: f64,
    pub n_reg: f64,
    /// How many objectness values were clamped on ingest.
    pub clamped: usize,
}

impl RpnBatch {
    /// Builds a batch with `λ = 10`, `N_cls` = number of labeled anchors and
    /// `N_reg` = number of anchors. Use [`RpnBatch::with_normalizers`] to set
    /// `N_reg` to the grid position count.
    pub fn new(
        anchors: Vec<BBox>,
        labels: Vec<AnchorLabel>,
        objectness: Vec<f64>,
        predicted: Vec<BoxDelta>,
        targets: Vec<Option<BoxDelta>>,
    ) -> Result<Self, RpnError> {
        let n = anchors.len();
        if labels.len() != n || objectness.len() != n || predicted.len() != n || targets.len() != n {
            return Err(RpnError::LengthMismatch(format!(
                "anchors {n}, labels {}, objectness {}, predicted {}, targets {}",
                labels.len(),
                objectness.len(),
                predicted.len(),
                targets.len()
            )));
        }
        for (i, (l, t)) in labels.iter().zip(&targets).enumerate() {
            if l.is_positive() && t.is_none() {
                return Err(RpnError::MissingTarget(i));
            }
        }
        let mut clamped = 0;
        let objectness = objectness
            .into_iter()
            .map(|p| {
                let c = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
                if c != p {
                    clamped += 1;
                }
                c
            })
            .collect();
        let n_labeled = labels.iter().filter(|l| l.is_labeled()).count();
        Ok(RpnBatch {
            anchors,
            labels,
            objectness,
            predicted,
            targets,
            lambda: 10.0,
            n_cls: n_labeled.max(1) as f64,
            n_reg: n.max(1) as f64,
            clamped,
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_normalizers(mut self, n_cls: f64, n_reg: f64) -> Self {
        self.n_cls = n_cls;
        self.n_reg = n_reg;
        self
    }

    fn check(&self) -> Result<(), RpnError> {
        let n = self.anchors.len();
        if self.labels.len() != n
            || self.objectness.len() != n
            || self.predicted.len() != n
            || self.targets.len() != n
        {
            return Err(RpnError::LengthMismatch("batch vectors differ in length".into()));
        }
        if !(self.n_cls > 0.0 && self.n_reg > 0.0 && self.lambda >= 0.0) {
            return Err(RpnError::InvalidConfig(
                "normalizers must be positive and lambda non-negative".into(),
            ));
        }
        if !self.labels.iter().any(AnchorLabel::is_labeled) {
            return Err(RpnError::NoAnchors);
        }
        Ok(())
    }
}

/// Regression targets for positive anchors against their matched ground truth.
pub fn regression_targets(anchors: &[BBox], labels: &[AnchorLabel], gts: &[BBox]) -> Vec<Option<BoxDelta>> {
    anchors
        .iter()
        .zip(labels)
        .map(|(a, l)| l.matched_gt().map(|j| encode_delta(a, &gts[j])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_term: f64,
    /// Regression sum with `λ / N_reg` already applied.
    pub reg_term: f64,
    pub total: f64,
}

pub fn rpn_loss(batch: &RpnBatch) -> Result<LossBreakdown, RpnError> {
    batch.check()?;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..batch.anchors.len() {
        let label = batch.labels[i];
        if !label.is_labeled() {
            continue;
        }
        let p = batch.objectness[i];
        if label.is_positive() {
            cls -= p.ln();
            let target = batch.targets[i].ok_or(RpnError::MissingTarget(i))?;
            let pred = batch.predicted[i].to_array();
            reg += pred
                .iter()
                .zip(target.to_array())
                .map(|(t, ts)| smooth_l1(t - ts))
                .sum::<f64>();
        } else {
            cls -= (1.0 - p).ln();
        }
    }
    let cls_term = cls / batch.n_cls;
    let reg_term = batch.lambda * reg / batch.n_reg;
    Ok(LossBreakdown {
        cls_term,
        reg_term,
        total: cls_term + reg_term,
    })
}

/// Gradients of [`rpn_loss`] with respect to each `p_i` and each `t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnGradient {
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

pub fn rpn_loss_gradient(batch: &RpnBatch) -> Result<RpnGradient, RpnError> {
    batch.check()?;
    let n = batch.anchors.len();
    let mut d_p = vec![0.0; n];
    let mut d_t = vec![[0.0; 4]; n];
    let reg_scale = batch.lambda / batch.n_reg;
    for i in 0..n {
        let label = batch.labels[i];
        if !label.is_labeled() {
            continue;
        }
        let p = batch.objectness[i];
        let p_star = if label.is_positive() { 1.0 } else { 0.0 };
        d_p[i] = (p - p_star) / (p * (1.0 - p)) / batch.n_cls;
        if label.is_positive() {
            let target = batch.targets[i].ok_or(RpnError::MissingTarget(i))?.to_array();
            let pred = batch.predicted[i].to_array();
            for k in 0..4 {
                d_t[i][k] = reg_scale * (pred[k] - target[k]).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(RpnGradient {
        objectness: d_p,
        deltas: d_t,
    })
}

fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.frame_index.cmp(&b.frame_index))
        .then_with(|| a.tool.cmp(&b.tool))
        .then_with(|| a.bbox.x_min().total_cmp(&b.bbox.x_min()))
        .then_with(|| a.bbox.y_min().total_cmp(&b.bbox.y_min()))
}

// Disjoint boxes never suppress each other, even at threshold 0.
fn overlaps(a: &BBox, b: &BBox, iou_threshold: f64) -> bool {
    let v = a.iou(b);
    v > 0.0 && v >= iou_threshold
}

/// Greedy non-maximum suppression within each `(video, frame)`. With
/// `per_class` only same-class detections suppress each other. Output is in
/// descending confidence order.
pub fn nms(dets: &[Detection], iou_threshold: f64, per_class: bool) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| nms_order(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        let suppressed = kept.iter().any(|k| {
            k.video_id == d.video_id
                && k.frame_index == d.frame_index
                && (!per_class || k.tool == d.tool)
                && overlaps(&k.bbox, &d.bbox, iou_threshold)
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}
