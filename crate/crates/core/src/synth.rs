//! Deterministic synthetic scenarios and brute-force oracles.
//!
//! A scenario scripts tool appearances (class, frame interval, box size and
//! piecewise-linear centroid waypoints) for one video. Ground truth follows
//! the script exactly; detections are derived from it with a small noise
//! model: centroid jitter, dropped detections, and at most one false
//! positive per frame.
//!
//! # Random stream
//!
//! All randomness comes from [`XorShift64Star`] (Vigna's xorshift64*, shifts
//! 12/25/27, multiplier `0x2545F4914F6CDD1D`) seeded with `seed`, or with
//! `0x9E3779B97F4A7C15` when `seed` is zero. A uniform draw is
//! `(next_u64() >> 11) · 2⁻⁵³`, in `[0, 1)`. For every frame `t` in order:
//!
//! 1. for each script entry active at `t`, in script order, four draws:
//!    drop test, two Box–Muller inputs for the jitter, confidence;
//! 2. six draws for the false-positive slot: trigger, class, center x,
//!    center y, width, height; then one more for its confidence.
//!
//! Draws are consumed whether or not they are used, so changing one rate
//! does not shift the stream seen by the others.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::DEFAULT_SWITCH_WINDOW;
use crate::dataset::{BoxRecord, FrameRecord, FrameSet, PresenceRecord, RecordKind};
use crate::geometry::{BBox, Detection, GeometryError, GroundTruthBox, PhaseWindow, ToolClass, VideoMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("script entry {entry}: {reason}")]
    ScriptOutOfBounds { entry: usize, reason: String },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// xorshift64* pseudorandom generator.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        XorShift64Star {
            state: if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// One scripted tool appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScript {
    pub tool: ToolClass,
    pub start_frame: u32,
    pub end_frame: u32,
    /// Box width and height in pixels.
    pub size: [f64; 2],
    /// `(frame, x, y)` centroid waypoints in increasing frame order. The
    /// centroid is linearly interpolated between them and held constant
    /// before the first and after the last.
    pub waypoints: Vec<[f64; 3]>,
}

impl ToolScript {
    pub fn is_active(&self, frame: u32) -> bool {
        frame >= self.start_frame && frame <= self.end_frame
    }

    /// Scripted centroid at a (possibly fractional) frame time.
    pub fn position(&self, t: f64) -> (f64, f64) {
        let w = &self.waypoints;
        if t <= w[0][0] {
            return (w[0][1], w[0][2]);
        }
        for seg in w.windows(2) {
            let ([f0, x0, y0], [f1, x1, y1]) = (seg[0], seg[1]);
            if t <= f1 {
                let a = (t - f0) / (f1 - f0);
                return (x0 + a * (x1 - x0), y0 + a * (y1 - y0));
            }
        }
        let last = w[w.len() - 1];
        (last[1], last[2])
    }

    fn bbox_at(&self, frame: u32) -> BBox {
        let (x, y) = self.position(frame as f64);
        BBox::from_center(x, y, self.size[0], self.size[1]).expect("validated script")
    }
}

/// Uniform range `[lo, hi]` for drawn confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRange(pub f64, pub f64);

impl ConfidenceRange {
    fn sample(self, u: f64) -> f64 {
        self.0 + (self.1 - self.0) * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of the Gaussian centroid jitter, in pixels.
    pub centroid_jitter_px: f64,
    pub drop_rate: f64,
    /// Probability that a frame gets one false positive.
    pub fp_rate_per_frame: f64,
    pub tp_confidence: ConfidenceRange,
    pub fp_confidence: ConfidenceRange,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            centroid_jitter_px: 0.0,
            drop_rate: 0.0,
            fp_rate_per_frame: 0.0,
            tp_confidence: ConfidenceRange(0.6, 1.0),
            fp_confidence: ConfidenceRange(0.1, 0.6),
        }
    }
}

impl NoiseConfig {
    /// Detections equal to the ground truth, each with confidence 1.
    pub fn none() -> Self {
        NoiseConfig {
            tp_confidence: ConfidenceRange(1.0, 1.0),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.centroid_jitter_px.is_finite() && self.centroid_jitter_px >= 0.0) {
            return Err(SynthError::InvalidNoise("jitter must be non-negative".into()));
        }
        if !unit(self.drop_rate) || !unit(self.fp_rate_per_frame) {
            return Err(SynthError::InvalidNoise("rates must lie in [0, 1]".into()));
        }
        for r in [self.tp_confidence, self.fp_confidence] {
            if !(unit(r.0) && unit(r.1) && r.0 <= r.1) {
                return Err(SynthError::InvalidNoise("confidence ranges must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    pub start_frame: u32,
    pub end_frame: u32,
}

fn default_fps() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub video_id: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub n_frames: u32,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    pub tools: Vec<ToolScript>,
    #[serde(default = "NoiseConfig::none")]
    pub noise: NoiseConfig,
}

impl ScenarioConfig {
    pub fn meta(&self) -> Result<VideoMeta, SynthError> {
        Ok(VideoMeta::new(&self.video_id, self.fps, self.width, self.height, self.n_frames)?)
    }

    pub fn phase_windows(&self) -> Result<Vec<PhaseWindow>, SynthError> {
        let meta = self.meta()?;
        self.phases
            .iter()
            .map(|p| Ok(PhaseWindow::new(&p.name, p.start_frame, p.end_frame, &meta)?))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let meta = self.meta()?;
        self.phase_windows()?;
        self.noise.validate()?;
        let (w, h) = (meta.width() as f64, meta.height() as f64);
        for (entry, s) in self.tools.iter().enumerate() {
            let fail = |reason: &str| {
                Err(SynthError::ScriptOutOfBounds {
                    entry,
                    reason: reason.to_string(),
                })
            };
            if s.start_frame > s.end_frame || s.end_frame >= self.n_frames {
                return fail("interval outside the video");
            }
            if !(s.size[0] > 0.0 && s.size[1] > 0.0 && s.size[0] <= w && s.size[1] <= h) {
                return fail("box size must be positive and fit the frame");
            }
            if s.waypoints.is_empty() {
                return fail("at least one waypoint is required");
            }
            if s.waypoints.windows(2).any(|p| p[1][0] <= p[0][0]) {
                return fail("waypoint frames must increase");
            }
            // The frame is convex, so boxes at the waypoints bound every
            // interpolated box.
            for &[_, x, y] in &s.waypoints {
                let inside = x - s.size[0] / 2.0 >= 0.0
                    && y - s.size[1] / 2.0 >= 0.0
                    && x + s.size[0] / 2.0 <= w
                    && y + s.size[1] / 2.0 <= h;
                if !inside {
                    return fail("box leaves the frame at a waypoint");
                }
            }
        }
        Ok(())
    }
}

/// Script-level truth for the skill metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub video_id: String,
    pub fps: f64,
    pub n_frames: u32,
    pub usage_seconds: BTreeMap<ToolClass, f64>,
    pub switch_count: usize,
    /// Per phase name, per class path length in pixels.
    pub path_length_px: BTreeMap<String, BTreeMap<ToolClass, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub meta: VideoMeta,
    pub phases: Vec<PhaseWindow>,
    pub ground_truth: FrameSet,
    pub detections: FrameSet,
    pub truth: TruthRecord,
}

impl Scenario {
    pub fn ground_truth_boxes(&self) -> Vec<GroundTruthBox> {
        self.ground_truth.ground_truth()
    }

    pub fn detection_list(&self) -> Vec<Detection> {
        self.detections.detections()
    }

    /// Presence labels for every frame, from the ground truth.
    pub fn presence_labels(&self) -> Vec<PresenceRecord> {
        let mut flags = vec![[false; 7]; self.meta.n_frames() as usize];
        for g in self.ground_truth_boxes() {
            flags[g.frame_index as usize][g.tool.index()] = true;
        }
        flags
            .into_iter()
            .enumerate()
            .map(|(f, flags)| PresenceRecord {
                video_id: self.meta.video_id().to_string(),
                frame_index: f as u32,
                flags,
            })
            .collect()
    }
}

fn shift_inside(lo: f64, size: f64, limit: f64) -> f64 {
    lo.clamp(0.0, limit - size)
}

/// Generates ground truth, detections and truth metrics for a scenario.
pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let meta = cfg.meta()?;
    let phases = cfg.phase_windows()?;
    let (w, h) = (meta.width() as f64, meta.height() as f64);
    let noise = &cfg.noise;
    let mut rng = XorShift64Star::new(cfg.seed);

    let mut gt_frames = Vec::new();
    let mut det_frames = Vec::new();
    for t in 0..cfg.n_frames {
        let mut gt_boxes = Vec::new();
        let mut det_boxes = Vec::new();
        for s in cfg.tools.iter().filter(|s| s.is_active(t)) {
            let truth = s.bbox_at(t);
            gt_boxes.push(BoxRecord {
                class: s.tool,
                bbox: truth,
                confidence: None,
            });

            let u_drop = rng.next_f64();
            let (u1, u2) = (rng.next_f64(), rng.next_f64());
            let u_conf = rng.next_f64();
            if u_drop < noise.drop_rate {
                continue;
            }
            let bbox = if noise.centroid_jitter_px > 0.0 {
                let r = (-2.0 * (1.0 - u1).ln()).sqrt();
                let theta = std::f64::consts::TAU * u2;
                let dx = noise.centroid_jitter_px * r * theta.cos();
                let dy = noise.centroid_jitter_px * r * theta.sin();
                let x0 = shift_inside(truth.x_min() + dx, truth.width(), w);
                let y0 = shift_inside(truth.y_min() + dy, truth.height(), h);
                BBox::new(x0, y0, x0 + truth.width(), y0 + truth.height())?
            } else {
                truth
            };
            det_boxes.push(BoxRecord {
                class: s.tool,
                bbox,
                confidence: Some(noise.tp_confidence.sample(u_conf)),
            });
        }

        let u_fp = rng.next_f64();
        let u_class = rng.next_f64();
        let (u_x, u_y, u_w, u_h) = (rng.next_f64(), rng.next_f64(), rng.next_f64(), rng.next_f64());
        let u_conf = rng.next_f64();
        if u_fp < noise.fp_rate_per_frame {
            let class = ToolClass::ALL[((u_class * 7.0) as usize).min(6)];
            let bw = w * (0.05 + 0.2 * u_w);
            let bh = h * (0.05 + 0.2 * u_h);
            let x0 = (w - bw) * u_x;
            let y0 = (h - bh) * u_y;
            det_boxes.push(BoxRecord {
                class,
                bbox: BBox::new(x0, y0, x0 + bw, y0 + bh)?,
                confidence: Some(noise.fp_confidence.sample(u_conf)),
            });
        }

        let record = |boxes| FrameRecord {
            video_id: cfg.video_id.clone(),
            frame_index: t,
            width: meta.width(),
            height: meta.height(),
            boxes,
        };
        if !gt_boxes.is_empty() {
            gt_frames.push(record(gt_boxes));
        }
        if !det_boxes.is_empty() {
            det_frames.push(record(det_boxes));
        }
    }

    let truth = truth_record(cfg, &meta, &phases);
    Ok(Scenario {
        meta,
        phases,
        ground_truth: FrameSet {
            kind: Some(RecordKind::GroundTruth),
            frames: gt_frames,
        },
        detections: FrameSet {
            kind: Some(RecordKind::Detections),
            frames: det_frames,
        },
        truth,
    })
}

fn truth_record(cfg: &ScenarioConfig, meta: &VideoMeta, phases: &[PhaseWindow]) -> TruthRecord {
    let mut present: BTreeMap<ToolClass, BTreeSet<u32>> = ToolClass::ALL.iter().map(|&c| (c, BTreeSet::new())).collect();
    for s in &cfg.tools {
        present
            .get_mut(&s.tool)
            .expect("all classes")
            .extend(s.start_frame..=s.end_frame);
    }
    let usage_seconds = present
        .iter()
        .map(|(&c, frames)| (c, frames.len() as f64 / meta.fps()))
        .collect();

    // Exchange events from the scripted presence sets.
    let n = cfg.n_frames;
    let mut appear: BTreeMap<u32, BTreeSet<ToolClass>> = BTreeMap::new();
    let mut disappear: BTreeMap<u32, BTreeSet<ToolClass>> = BTreeMap::new();
    for (&c, frames) in &present {
        for &f in frames {
            if f >= 1 && !frames.contains(&(f - 1)) {
                appear.entry(f).or_default().insert(c);
            }
            if f + 1 < n && !frames.contains(&(f + 1)) {
                disappear.entry(f + 1).or_default().insert(c);
            }
        }
    }
    let window = DEFAULT_SWITCH_WINDOW;
    let switch_count = appear
        .iter()
        .filter(|(&t, entering)| {
            disappear
                .range(t.saturating_sub(window)..=t + window)
                .any(|(_, leaving)| entering.iter().any(|c| leaving.iter().any(|d| d != c)))
        })
        .count();

    let mut windows = if phases.is_empty() {
        vec![PhaseWindow::full(meta)]
    } else {
        phases.to_vec()
    };
    windows.dedup();
    let path_length_px = windows
        .iter()
        .map(|p| (p.name().to_string(), oracle_path_length(&cfg.tools, Some(p))))
        .collect();

    TruthRecord {
        video_id: cfg.video_id.clone(),
        fps: meta.fps(),
        n_frames: n,
        usage_seconds,
        switch_count,
        path_length_px,
    }
}

/// Exact distance traveled per class along the scripted waypoint paths,
/// restricted to each entry's active interval and, when given, to `phase`.
pub fn oracle_path_length(script: &[ToolScript], phase: Option<&PhaseWindow>) -> BTreeMap<ToolClass, f64> {
    let mut out: BTreeMap<ToolClass, f64> = ToolClass::ALL.iter().map(|&c| (c, 0.0)).collect();
    for s in script {
        let mut lo = s.start_frame as f64;
        let mut hi = s.end_frame as f64;
        if let Some(p) = phase {
            lo = lo.max(p.start_frame() as f64);
            hi = hi.min(p.end_frame() as f64);
        }
        if hi <= lo {
            continue;
        }
        let mut length = 0.0;
        for seg in s.waypoints.windows(2) {
            let ([f0, x0, y0], [f1, x1, y1]) = (seg[0], seg[1]);
            let overlap = f1.min(hi) - f0.max(lo);
            if overlap > 0.0 {
                length += (x1 - x0).hypot(y1 - y0) * overlap / (f1 - f0);
            }
        }
        *out.get_mut(&s.tool).expect("all classes") += length;
    }
    out
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let iy = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = ix * iy;
    let union = (a.x_max() - a.x_min()) * (a.y_max() - a.y_min()) + (b.x_max() - b.x_min()) * (b.y_max() - b.y_min())
        - inter;
    inter / union
}

/// Exhaustive per-class AP, written independently of the evaluation module.
///
/// For every distinct confidence cut the detections at or above it are
/// matched from scratch, giving one precision/recall point per cut. AP sums,
/// over each increase in recall, the increase times the best precision
/// reached at that recall or beyond. Classes without ground truth map to
/// `None`. Quadratic in the number of detections; meant for small cases.
pub fn oracle_spatial_ap(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> BTreeMap<ToolClass, Option<f64>> {
    let mut out = BTreeMap::new();
    for class in ToolClass::ALL {
        let class_gts: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.tool == class).collect();
        let class_dets: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.tool == class).collect();
        if class_gts.is_empty() {
            out.insert(class, None);
            continue;
        }
        let mut cuts: Vec<f64> = class_dets.iter().map(|(_, d)| d.confidence).collect();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();

        let mut points: Vec<(f64, f64)> = Vec::new();
        for &cut in &cuts {
            let mut kept: Vec<(usize, &Detection)> =
                class_dets.iter().copied().filter(|(_, d)| d.confidence >= cut).collect();
            // Highest confidence first, earlier input first among equals.
            kept.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
            let mut used = vec![false; class_gts.len()];
            let mut tp = 0usize;
            for (_, d) in &kept {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in class_gts.iter().enumerate() {
                    if used[j] || g.video_id != d.video_id || g.frame_index != d.frame_index {
                        continue;
                    }
                    let v = oracle_iou(&d.bbox, &g.bbox);
                    match best {
                        Some((_, bv)) if bv >= v => {}
                        _ => best = Some((j, v)),
                    }
                }
                if let Some((j, v)) = best {
                    if v >= iou_threshold {
                        used[j] = true;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / class_gts.len() as f64, tp as f64 / kept.len() as f64));
        }

        let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        out.insert(class, Some(ap));
    }
    out
}

/// Small random spatial scenario for oracle comparisons: a few frames, up to
/// `max_per_class` detections per class, distinct continuous confidences.
pub fn random_eval_case(seed: u64, max_per_class: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let mut rng = XorShift64Star::new(seed);
    let draw_box = |rng: &mut XorShift64Star| {
        let x = rng.next_f64() * 80.0;
        let y = rng.next_f64() * 80.0;
        let w = 5.0 + rng.next_f64() * 40.0;
        let h = 5.0 + rng.next_f64() * 40.0;
        BBox::new(x, y, x + w, y + h).expect("positive size")
    };
    let n_frames = 1 + (rng.next_u64() % 4) as u32;
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for class in ToolClass::ALL {
        let n_gt = (rng.next_u64() % 6) as usize;
        for _ in 0..n_gt {
            let frame = (rng.next_u64() % n_frames as u64) as u32;
            gts.push(GroundTruthBox {
                video_id: "r".into(),
                frame_index: frame,
                tool: class,
                bbox: draw_box(&mut rng),
            });
        }
        let class_gts: Vec<GroundTruthBox> = gts.iter().filter(|g| g.tool == class).cloned().collect();
        let n_det = (rng.next_u64() % (max_per_class as u64 + 1)) as usize;
        for _ in 0..n_det {
            // Half the detections perturb a ground truth box, so matches occur.
            let (frame, bbox) = if !class_gts.is_empty() && rng.next_f64() < 0.5 {
                let g = &class_gts[(rng.next_u64() % class_gts.len() as u64) as usize];
                let s = 6.0 * (rng.next_f64() - 0.5);
                let b = BBox::new(
                    (g.bbox.x_min() + s).max(0.0),
                    (g.bbox.y_min() + s).max(0.0),
                    g.bbox.x_max() + s.abs() + 0.5,
                    g.bbox.y_max() + s.abs() + 0.5,
                )
                .expect("positive size");
                (g.frame_index, b)
            } else {
                ((rng.next_u64() % n_frames as u64) as u32, draw_box(&mut rng))
            };
            dets.push(Detection {
                video_id: "r".into(),
                frame_index: frame,
                tool: class,
                bbox,
                confidence: rng.next_f64(),
            });
        }
    }
    (dets, gts)
}
