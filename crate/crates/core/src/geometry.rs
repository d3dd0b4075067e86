//! Domain types shared by every other module: the tool taxonomy, boxes,
//! detections, video metadata and phase windows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need finite, non-negative coordinates and positive area")]
    InvalidBox(f64, f64, f64, f64),
    #[error("invalid video metadata for {video_id}: {reason}")]
    InvalidMeta { video_id: String, reason: String },
    #[error("invalid phase window {name} [{start}, {end}] for a video of {n_frames} frames")]
    InvalidPhase {
        name: String,
        start: u32,
        end: u32,
        n_frames: u32,
    },
    #[error("unknown tool class {0:?}")]
    UnknownClass(String),
}

/// The seven instrument classes, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ToolClass {
    Grasper,
    Bipolar,
    Hook,
    Scissors,
    Clipper,
    Irrigator,
    SpecimenBag,
}

impl ToolClass {
    pub const COUNT: usize = 7;

    pub const ALL: [ToolClass; 7] = [
        ToolClass::Grasper,
        ToolClass::Bipolar,
        ToolClass::Hook,
        ToolClass::Scissors,
        ToolClass::Clipper,
        ToolClass::Irrigator,
        ToolClass::SpecimenBag,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ToolClass> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ToolClass::Grasper => "grasper",
            ToolClass::Bipolar => "bipolar",
            ToolClass::Hook => "hook",
            ToolClass::Scissors => "scissors",
            ToolClass::Clipper => "clipper",
            ToolClass::Irrigator => "irrigator",
            ToolClass::SpecimenBag => "specimen_bag",
        }
    }

    /// Lane letter used in timeline legends, `a` through `g`.
    pub fn letter(self) -> char {
        (b'a' + self.index() as u8) as char
    }
}

impl fmt::Display for ToolClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToolClass {
    type Err = GeometryError;

    /// Accepts the canonical tokens plus the `clip_applier` spelling.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let class = match s {
            "grasper" => ToolClass::Grasper,
            "bipolar" => ToolClass::Bipolar,
            "hook" => ToolClass::Hook,
            "scissors" => ToolClass::Scissors,
            "clipper" | "clip_applier" => ToolClass::Clipper,
            "irrigator" => ToolClass::Irrigator,
            "specimen_bag" => ToolClass::SpecimenBag,
            other => return Err(GeometryError::UnknownClass(other.to_string())),
        };
        Ok(class)
    }
}

impl Serialize for ToolClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ToolClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A point in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box in corner form, `(x_min, y_min, x_max, y_max)`.
///
/// Area is `(x_max - x_min) * (y_max - y_min)`. Construction rejects
/// non-finite or negative coordinates and boxes without positive area, so
/// every `BBox` in circulation has a well-defined IoU with every other.
/// Serialized as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn centroid(&self) -> Point {
        Point::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    ///
    /// ```
    /// use scopemetrics::BBox;
    /// let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    /// let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    /// assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    /// ```
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// True when `p` lies in the half-open box `[x_min, x_max) × [y_min, y_max)`.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` when nothing
    /// of positive area remains.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
        .ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Free-function form of [`BBox::centroid`].
pub fn centroid(b: &BBox) -> Point {
    b.centroid()
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [a, b, c, d] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(a, b, c, d).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub frame_index: u32,
    pub tool: ToolClass,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub video_id: String,
    pub frame_index: u32,
    pub tool: ToolClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    video_id: String,
    fps: f64,
    width: u32,
    height: u32,
    n_frames: u32,
}

impl VideoMeta {
    pub fn new(
        video_id: impl Into<String>,
        fps: f64,
        width: u32,
        height: u32,
        n_frames: u32,
    ) -> Result<Self, GeometryError> {
        let video_id = video_id.into();
        let reason = if !(fps.is_finite() && fps > 0.0) {
            Some(format!("fps must be positive, got {fps}"))
        } else if width == 0 || height == 0 {
            Some(format!("frame size must be positive, got {width}x{height}"))
        } else if n_frames == 0 {
            Some("video must have at least one frame".to_string())
        } else {
            None
        };
        match reason {
            Some(reason) => Err(GeometryError::InvalidMeta { video_id, reason }),
            None => Ok(VideoMeta {
                video_id,
                fps,
                width,
                height,
                n_frames,
            }),
        }
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn n_frames(&self) -> u32 {
        self.n_frames
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_frames as f64 / self.fps
    }

    /// Length of the frame diagonal in pixels; the normalization base for
    /// distances.
    pub fn frame_diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn contains_box(&self, b: &BBox) -> bool {
        b.within(self.width as f64, self.height as f64)
    }
}

pub fn frame_diagonal(meta: &VideoMeta) -> f64 {
    meta.frame_diagonal()
}

/// A named, inclusive frame range such as the clipping phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindow {
    name: String,
    start_frame: u32,
    end_frame: u32,
}

impl PhaseWindow {
    pub fn new(
        name: impl Into<String>,
        start_frame: u32,
        end_frame: u32,
        meta: &VideoMeta,
    ) -> Result<Self, GeometryError> {
        let name = name.into();
        if start_frame > end_frame || end_frame >= meta.n_frames() {
            return Err(GeometryError::InvalidPhase {
                name,
                start: start_frame,
                end: end_frame,
                n_frames: meta.n_frames(),
            });
        }
        Ok(PhaseWindow {
            name,
            start_frame,
            end_frame,
        })
    }

    /// The window covering every frame of the video.
    pub fn full(meta: &VideoMeta) -> Self {
        PhaseWindow {
            name: "full".to_string(),
            start_frame: 0,
            end_frame: meta.n_frames() - 1,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn start_frame(&self) -> u32 {
        self.start_frame
    }

    pub fn end_frame(&self) -> u32 {
        self.end_frame
    }

    pub fn contains(&self, frame: u32) -> bool {
        frame >= self.start_frame && frame <= self.end_frame
    }
}
