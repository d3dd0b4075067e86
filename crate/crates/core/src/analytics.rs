//! Skill metrics derived from a video's detection stream: usage timelines
//! and totals, instrument switch counts, occupancy heat maps, centroid
//! tracks, phase-windowed path length, and rank correlation against GOALS
//! ratings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GoalsRating;
use crate::geometry::{BBox, Detection, PhaseWindow, Point, ToolClass, VideoMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("smoothing window must be odd and at least 1, got {0}")]
    EvenWindow(usize),
    #[error("expected {expected} presence rows, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("heat map grid must be at least 1x1, got {rows}x{cols}")]
    BadGrid { rows: usize, cols: usize },
    #[error("need at least 3 videos with both a metric and ratings, got {0}")]
    InsufficientVideos(usize),
    #[error("rank correlation is undefined for constant input")]
    ConstantInput,
    #[error("detection from video {found:?} in the report for {expected:?}")]
    ForeignVideo { expected: String, found: String },
    #[error("frame {frame} is outside the video ({n_frames} frames)")]
    FrameOutOfRange { frame: u32, n_frames: u32 },
    #[error("box in frame {frame} lies outside the {width}x{height} frame")]
    BoxOutOfFrame { frame: u32, width: u32, height: u32 },
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error("video {video_id}: {source}")]
    Video {
        video_id: String,
        #[source]
        source: Box<AnalyticsError>,
    },
}

/// Per-frame presence flags in canonical class order.
pub type PresenceRow = [bool; 7];

/// Presence rows for every frame from detections at or above `min_confidence`.
pub fn presence_from_detections(dets: &[Detection], meta: &VideoMeta, min_confidence: f64) -> Vec<PresenceRow> {
    let mut rows = vec![[false; 7]; meta.n_frames() as usize];
    for d in dets {
        if d.confidence >= min_confidence {
            if let Some(row) = rows.get_mut(d.frame_index as usize) {
                row[d.tool.index()] = true;
            }
        }
    }
    rows
}

/// Sliding-window majority vote per class. Windows are truncated at the
/// video edges; an even split keeps the frame's own value.
pub fn smooth_presence(rows: &[PresenceRow], window: usize) -> Result<Vec<PresenceRow>, AnalyticsError> {
    if window.is_multiple_of(2) {
        return Err(AnalyticsError::EvenWindow(window));
    }
    let half = window / 2;
    let n = rows.len();
    let mut out = rows.to_vec();
    for c in 0..ToolClass::COUNT {
        // Prefix sums of presence for this class.
        let mut prefix = vec![0usize; n + 1];
        for t in 0..n {
            prefix[t + 1] = prefix[t] + usize::from(rows[t][c]);
        }
        for t in 0..n {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            let len = hi - lo + 1;
            let ones = prefix[hi + 1] - prefix[lo];
            out[t][c] = match (2 * ones).cmp(&len) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => rows[t][c],
            };
        }
    }
    Ok(out)
}

/// Inclusive frame interval, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Interval {
    pub start: u32,
    pub end: u32,
}

impl Interval {
    pub fn frames(&self) -> u32 {
        self.end - self.start + 1
    }
}

impl From<[u32; 2]> for Interval {
    fn from([start, end]: [u32; 2]) -> Self {
        Interval { start, end }
    }
}

impl From<Interval> for [u32; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

/// Presence intervals per class, sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub per_class: BTreeMap<ToolClass, Vec<Interval>>,
}

impl Timeline {
    pub fn empty() -> Self {
        Timeline {
            per_class: ToolClass::ALL.iter().map(|&c| (c, Vec::new())).collect(),
        }
    }

    pub fn intervals(&self, class: ToolClass) -> &[Interval] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Maximal runs of presence become intervals.
pub fn build_timeline(rows: &[PresenceRow], meta: &VideoMeta) -> Result<Timeline, AnalyticsError> {
    let expected = meta.n_frames() as usize;
    if rows.len() != expected {
        return Err(AnalyticsError::LengthMismatch {
            expected,
            found: rows.len(),
        });
    }
    let mut timeline = Timeline::empty();
    for class in ToolClass::ALL {
        let c = class.index();
        let runs = timeline.per_class.get_mut(&class).expect("all classes present");
        let mut start = None;
        for (t, row) in rows.iter().enumerate() {
            match (row[c], start) {
                (true, None) => start = Some(t as u32),
                (false, Some(s)) => {
                    runs.push(Interval {
                        start: s,
                        end: t as u32 - 1,
                    });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(Interval {
                start: s,
                end: rows.len() as u32 - 1,
            });
        }
    }
    Ok(timeline)
}

/// Seconds of presence per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub seconds: BTreeMap<ToolClass, f64>,
}

pub fn usage_totals(timeline: &Timeline, meta: &VideoMeta) -> UsageTotals {
    let seconds = ToolClass::ALL
        .iter()
        .map(|&c| {
            let frames: u64 = timeline.intervals(c).iter().map(|i| u64::from(i.frames())).sum();
            (c, frames as f64 / meta.fps())
        })
        .collect();
    UsageTotals { seconds }
}

/// Default half-width, in frames, of the window pairing an appearance with
/// a disappearance.
pub const DEFAULT_SWITCH_WINDOW: u32 = 2;

/// Counts instrument exchanges: frames `t ≥ 1` where some class appears
/// (0→1 at `t`) and a different class disappears (1→0) at some frame in
/// `[t − window, t + window]`. Several exchanges at the same `t` count once.
pub fn switch_count(rows: &[PresenceRow], window: u32) -> usize {
    let n = rows.len();
    if n < 2 {
        return 0;
    }
    let transitions = |from: bool| -> Vec<u8> {
        let mut out = vec![0u8; n];
        for t in 1..n {
            for (c, (&before, &now)) in rows[t - 1].iter().zip(&rows[t]).enumerate() {
                if before == from && now != from {
                    out[t] |= 1 << c;
                }
            }
        }
        out
    };
    let appear = transitions(false);
    let disappear = transitions(true);
    let w = window as usize;
    (1..n)
        .filter(|&t| {
            if appear[t] == 0 {
                return false;
            }
            let lo = t.saturating_sub(w).max(1);
            let hi = (t + w).min(n - 1);
            (lo..=hi).any(|u| {
                let gone = disappear[u];
                // Some appearing class c pairs with some disappearing d ≠ c.
                (0..ToolClass::COUNT).any(|c| appear[t] & (1 << c) != 0 && gone & !(1 << c) != 0)
            })
        })
        .count()
}

/// Occupancy grid: cell `(r, c)` counts the boxes containing the cell center
/// `((c + 0.5)·width/C, (r + 0.5)·height/R)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    pub width: u32,
    pub height: u32,
    pub cells: Vec<Vec<u32>>,
}

impl HeatMap {
    pub fn max(&self) -> u32 {
        self.cells.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().map(|&c| u64::from(c)).sum()
    }
}

pub const DEFAULT_GRID: usize = 32;

pub fn build_heatmap(boxes: &[BBox], meta: &VideoMeta, rows: usize, cols: usize) -> Result<HeatMap, AnalyticsError> {
    if rows < 1 || cols < 1 {
        return Err(AnalyticsError::BadGrid { rows, cols });
    }
    let (w, h) = (meta.width() as f64, meta.height() as f64);
    let mut cells = vec![vec![0u32; cols]; rows];
    for b in boxes {
        // Only the cells whose centers can fall inside the box are tested.
        let c_lo = ((b.x_min() * cols as f64 / w - 0.5).floor().max(0.0)) as usize;
        let c_hi = ((b.x_max() * cols as f64 / w).ceil() as usize).min(cols);
        let r_lo = ((b.y_min() * rows as f64 / h - 0.5).floor().max(0.0)) as usize;
        let r_hi = ((b.y_max() * rows as f64 / h).ceil() as usize).min(rows);
        for (r, row) in cells.iter_mut().enumerate().take(r_hi).skip(r_lo) {
            let cy = (r as f64 + 0.5) * h / rows as f64;
            for (c, cell) in row.iter_mut().enumerate().take(c_hi).skip(c_lo) {
                let cx = (c as f64 + 0.5) * w / cols as f64;
                if b.contains(Point::new(cx, cy)) {
                    *cell += 1;
                }
            }
        }
    }
    Ok(HeatMap {
        rows,
        cols,
        width: meta.width(),
        height: meta.height(),
        cells,
    })
}

/// Gates for centroid association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub min_confidence: f64,
    /// Largest centroid step, as a fraction of the frame diagonal.
    pub max_jump: f64,
    /// Largest frame-index difference between consecutive track points.
    pub max_gap: u32,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            min_confidence: 0.5,
            max_jump: 0.15,
            max_gap: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_index: u32,
    pub centroid: Point,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub tool: ToolClass,
    pub points: Vec<TrackPoint>,
}

impl Track {
    fn last(&self) -> &TrackPoint {
        self.points.last().expect("tracks are never empty")
    }
}

fn box_key(b: &BBox) -> [f64; 4] {
    b.to_array()
}

fn cmp_boxes(a: &BBox, b: &BBox) -> Ordering {
    box_key(a)
        .iter()
        .zip(box_key(b))
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Greedy nearest-centroid tracking, per class, in frame order.
///
/// Within a frame every (detection, open track) pair passing both gates is a
/// candidate; candidates are taken in order of (distance, box coordinates,
/// track id) with each detection and track used at most once. Leftover
/// detections open new tracks, in box-coordinate order, so the result does
/// not depend on the order of detections within a frame.
pub fn build_tracks(dets: &[Detection], meta: &VideoMeta, cfg: &TrackingConfig) -> Vec<Track> {
    let jump = cfg.max_jump * meta.frame_diagonal();
    let mut tracks: Vec<Track> = Vec::new();

    for class in ToolClass::ALL {
        let mut by_frame: BTreeMap<u32, Vec<BBox>> = BTreeMap::new();
        for d in dets {
            if d.tool == class && d.confidence >= cfg.min_confidence {
                by_frame.entry(d.frame_index).or_default().push(d.bbox);
            }
        }
        let mut open: Vec<usize> = Vec::new();

        for (frame, mut boxes) in by_frame {
            boxes.sort_by(cmp_boxes);
            open.retain(|&k| frame - tracks[k].last().frame_index <= cfg.max_gap);

            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                let c = b.centroid();
                for &k in &open {
                    let dist = c.distance(tracks[k].last().centroid);
                    if dist <= jump {
                        candidates.push((dist, i, k));
                    }
                }
            }
            // Boxes are already sorted, so box index order is coordinate order.
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

            let mut used_box = vec![false; boxes.len()];
            let mut used_track = BTreeSet::new();
            for (_, i, k) in candidates {
                if used_box[i] || used_track.contains(&k) {
                    continue;
                }
                used_box[i] = true;
                used_track.insert(k);
                tracks[k].points.push(TrackPoint {
                    frame_index: frame,
                    centroid: boxes[i].centroid(),
                    bbox: boxes[i],
                });
            }
            for (i, b) in boxes.iter().enumerate() {
                if used_box[i] {
                    continue;
                }
                let id = tracks.len();
                tracks.push(Track {
                    track_id: id,
                    tool: class,
                    points: vec![TrackPoint {
                        frame_index: frame,
                        centroid: b.centroid(),
                        bbox: *b,
                    }],
                });
                open.push(id);
            }
        }
    }
    tracks
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMotion {
    pub path_length_px: f64,
    /// Path length divided by the frame diagonal.
    pub path_length_normalized: f64,
    /// Tracks with at least one point inside the window.
    pub n_tracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    pub phase: PhaseWindow,
    pub per_class: BTreeMap<ToolClass, ClassMotion>,
}

impl MotionMetrics {
    /// Summed pixel path length over all classes.
    pub fn total_px(&self) -> f64 {
        self.per_class.values().map(|m| m.path_length_px).sum()
    }

    pub fn total_normalized(&self) -> f64 {
        self.per_class.values().map(|m| m.path_length_normalized).sum()
    }
}

/// Distance traveled per class inside `phase`: the sum over tracks of the
/// centroid steps between consecutive points that both lie in the window.
/// A window with no tracked points yields zeros.
pub fn path_length(tracks: &[Track], phase: &PhaseWindow, meta: &VideoMeta) -> MotionMetrics {
    let mut per_class: BTreeMap<ToolClass, ClassMotion> =
        ToolClass::ALL.iter().map(|&c| (c, ClassMotion::default())).collect();
    for track in tracks {
        let entry = per_class.get_mut(&track.tool).expect("all classes present");
        if track.points.iter().any(|p| phase.contains(p.frame_index)) {
            entry.n_tracks += 1;
        }
        entry.path_length_px += track
            .points
            .windows(2)
            .filter(|w| phase.contains(w[0].frame_index) && phase.contains(w[1].frame_index))
            .map(|w| w[0].centroid.distance(w[1].centroid))
            .sum::<f64>();
    }
    let diag = meta.frame_diagonal();
    for m in per_class.values_mut() {
        m.path_length_normalized = m.path_length_px / diag;
    }
    MotionMetrics {
        phase: phase.clone(),
        per_class,
    }
}

/// Ranks with ties given the mean of the positions they span (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::LengthMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or(AnalyticsError::ConstantInput)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub spearman_rho: f64,
    pub n: usize,
}

/// Mean GOALS total per video across raters.
pub fn mean_goals_totals(ratings: &[GoalsRating]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in ratings {
        let e = sums.entry(r.video_id.clone()).or_default();
        e.0 += r.total;
        e.1 += 1;
    }
    sums.into_iter().map(|(v, (s, n))| (v, s / n as f64)).collect()
}

/// Rank correlation between a per-video metric and the mean GOALS total,
/// over the videos present in both.
pub fn goals_correlation(metric: &BTreeMap<String, f64>, ratings: &[GoalsRating]) -> Result<Correlation, AnalyticsError> {
    let totals = mean_goals_totals(ratings);
    let (x, y): (Vec<f64>, Vec<f64>) = metric
        .iter()
        .filter_map(|(v, &m)| totals.get(v).map(|&t| (m, t)))
        .unzip();
    if x.len() < 3 {
        return Err(AnalyticsError::InsufficientVideos(x.len()));
    }
    Ok(Correlation {
        spearman_rho: spearman(&x, &y)?,
        n: x.len(),
    })
}

/// Thresholds for a full per-video analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Confidence gate for presence, heat maps and tracking.
    pub min_confidence: f64,
    pub smoothing_window: usize,
    pub switch_window: u32,
    pub max_jump: f64,
    pub max_gap: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let t = TrackingConfig::default();
        AnalysisConfig {
            min_confidence: t.min_confidence,
            smoothing_window: 3,
            switch_window: DEFAULT_SWITCH_WINDOW,
            max_jump: t.max_jump,
            max_gap: t.max_gap,
            grid_rows: DEFAULT_GRID,
            grid_cols: DEFAULT_GRID,
        }
    }
}

impl AnalysisConfig {
    pub fn tracking(&self) -> TrackingConfig {
        TrackingConfig {
            min_confidence: self.min_confidence,
            max_jump: self.max_jump,
            max_gap: self.max_gap,
        }
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let fail = |m: &str| Err(AnalyticsError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return fail("min_confidence must lie in [0, 1]");
        }
        if self.smoothing_window.is_multiple_of(2) {
            return Err(AnalyticsError::EvenWindow(self.smoothing_window));
        }
        if !(self.max_jump.is_finite() && self.max_jump >= 0.0) {
            return fail("max_jump must be a non-negative fraction of the diagonal");
        }
        if self.grid_rows < 1 || self.grid_cols < 1 {
            return Err(AnalyticsError::BadGrid {
                rows: self.grid_rows,
                cols: self.grid_cols,
            });
        }
        Ok(())
    }
}

/// Everything known about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInput {
    pub meta: VideoMeta,
    pub detections: Vec<Detection>,
    /// Windows for path length; the whole video when empty.
    pub phases: Vec<PhaseWindow>,
    pub goals: Vec<GoalsRating>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMaps {
    pub per_class: BTreeMap<ToolClass, HeatMap>,
    pub combined: HeatMap,
}

/// Mean of the raters' domain scores and totals for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalsSummary {
    pub n_raters: usize,
    pub depth_perception: f64,
    pub bimanual_dexterity: f64,
    pub efficiency: f64,
    pub tissue_handling: f64,
    pub total: f64,
}

impl GoalsSummary {
    pub fn from_ratings(ratings: &[&GoalsRating]) -> Option<Self> {
        if ratings.is_empty() {
            return None;
        }
        let n = ratings.len() as f64;
        let mean = |f: fn(&GoalsRating) -> f64| ratings.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(GoalsSummary {
            n_raters: ratings.len(),
            depth_perception: mean(|r| r.depth_perception),
            bimanual_dexterity: mean(|r| r.bimanual_dexterity),
            efficiency: mean(|r| r.efficiency),
            tissue_handling: mean(|r| r.tissue_handling),
            total: mean(|r| r.total),
        })
    }
}

pub const REPORT_SCHEMA: &str = "scopemetrics/1";

/// All per-video skill metrics plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub schema: String,
    pub video_id: String,
    pub meta: VideoMeta,
    pub config: AnalysisConfig,
    pub timeline: Timeline,
    pub usage_seconds: UsageTotals,
    pub switch_count: usize,
    pub heatmaps: HeatMaps,
    pub tracks: Vec<Track>,
    pub motion: Vec<MotionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<GoalsSummary>,
    /// Seconds since the Unix epoch; only set when stamping is requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl SkillReport {
    pub fn motion_for(&self, phase: &str) -> Option<&MotionMetrics> {
        self.motion.iter().find(|m| m.phase.name() == phase)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }
}

fn check_detections(input: &VideoInput) -> Result<(), AnalyticsError> {
    let meta = &input.meta;
    for d in &input.detections {
        if d.video_id != meta.video_id() {
            return Err(AnalyticsError::ForeignVideo {
                expected: meta.video_id().to_string(),
                found: d.video_id.clone(),
            });
        }
        if d.frame_index >= meta.n_frames() {
            return Err(AnalyticsError::FrameOutOfRange {
                frame: d.frame_index,
                n_frames: meta.n_frames(),
            });
        }
        if !meta.contains_box(&d.bbox) {
            return Err(AnalyticsError::BoxOutOfFrame {
                frame: d.frame_index,
                width: meta.width(),
                height: meta.height(),
            });
        }
    }
    Ok(())
}

fn analyze(input: &VideoInput, cfg: &AnalysisConfig) -> Result<SkillReport, AnalyticsError> {
    cfg.validate()?;
    check_detections(input)?;
    let meta = &input.meta;

    let raw = presence_from_detections(&input.detections, meta, cfg.min_confidence);
    let rows = smooth_presence(&raw, cfg.smoothing_window)?;
    let timeline = build_timeline(&rows, meta)?;
    let usage = usage_totals(&timeline, meta);
    let switches = switch_count(&rows, cfg.switch_window);

    let gated: Vec<&Detection> = input
        .detections
        .iter()
        .filter(|d| d.confidence >= cfg.min_confidence)
        .collect();
    let mut per_class = BTreeMap::new();
    for class in ToolClass::ALL {
        let boxes: Vec<BBox> = gated.iter().filter(|d| d.tool == class).map(|d| d.bbox).collect();
        per_class.insert(class, build_heatmap(&boxes, meta, cfg.grid_rows, cfg.grid_cols)?);
    }
    let all_boxes: Vec<BBox> = gated.iter().map(|d| d.bbox).collect();
    let combined = build_heatmap(&all_boxes, meta, cfg.grid_rows, cfg.grid_cols)?;

    let tracks = build_tracks(&input.detections, meta, &cfg.tracking());
    let phases = if input.phases.is_empty() {
        vec![PhaseWindow::full(meta)]
    } else {
        input.phases.clone()
    };
    let motion = phases.iter().map(|p| path_length(&tracks, p, meta)).collect();

    let goals: Vec<&GoalsRating> = input
        .goals
        .iter()
        .filter(|g| g.video_id == meta.video_id())
        .collect();

    Ok(SkillReport {
        schema: REPORT_SCHEMA.to_string(),
        video_id: meta.video_id().to_string(),
        meta: meta.clone(),
        config: cfg.clone(),
        timeline,
        usage_seconds: usage,
        switch_count: switches,
        heatmaps: HeatMaps { per_class, combined },
        tracks,
        motion,
        goals: GoalsSummary::from_ratings(&goals),
        generated_at: None,
    })
}

/// Runs every metric for one video. Errors carry the video id.
pub fn build_report(input: &VideoInput, cfg: &AnalysisConfig) -> Result<SkillReport, AnalyticsError> {
    analyze(input, cfg).map_err(|e| AnalyticsError::Video {
        video_id: input.meta.video_id().to_string(),
        source: Box::new(e),
    })
}
