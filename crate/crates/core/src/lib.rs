//! Evaluation and analytics for surgical tool detection in laparoscopic video.
//!
//! - [`geometry`]: boxes, IoU, tool classes, video metadata, phase windows.
//! - [`dataset`]: JSON Lines annotations and detections, CSV side files.
//! - [`rpn`]: reference anchors, labeling, box deltas, loss and gradient, NMS.
//! - [`eval`]: spatial and presence average precision.
//! - [`analytics`]: timelines, switches, heat maps, tracks, path length,
//!   correlation with GOALS ratings.
//! - [`synth`]: seeded synthetic scenarios with brute-force oracles.
//! - [`render`]: SVG and PGM output.
//!
//! ```
//! use scopemetrics::BBox;
//!
//! let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
//! let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
//! assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
//! ```

pub mod analytics;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod render;
pub mod rpn;
pub mod synth;

pub use geometry::*;
