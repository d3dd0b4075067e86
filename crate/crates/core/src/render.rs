//! Plain-text renderings of analysis results: SVG timelines and
//! trajectories, ASCII PGM heat maps.
//!
//! Output depends only on the inputs; coordinates are printed with a fixed
//! number of decimals so files are byte-stable across runs and platforms.

use std::fmt::Write;

use crate::analytics::{HeatMap, Timeline, Track};
use crate::geometry::{PhaseWindow, ToolClass, VideoMeta};

/// Stroke and fill color for each class.
pub fn class_color(class: ToolClass) -> &'static str {
    match class {
        ToolClass::Grasper => "#d62728",
        ToolClass::Bipolar => "#ff7f0e",
        ToolClass::Hook => "#2ca02c",
        ToolClass::Scissors => "#9467bd",
        ToolClass::Clipper => "#1f77b4",
        ToolClass::Irrigator => "#8c564b",
        ToolClass::SpecimenBag => "#e377c2",
    }
}

pub const TIMELINE_WIDTH: f64 = 800.0;
pub const LANE_HEIGHT: f64 = 20.0;
const LEFT: f64 = 150.0;
const TOP: f64 = 10.0;
const AXIS_SPACE: f64 = 30.0;

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
}

/// Horizontal x position of frame boundary `f` in the timeline plot.
pub fn timeline_x(frame: f64, meta: &VideoMeta) -> f64 {
    LEFT + (TIMELINE_WIDTH - LEFT - 10.0) * frame / meta.n_frames() as f64
}

/// One lane per class, labeled `(a)` to `(g)`; interval `[s, e]` is drawn
/// from frame `s` to frame `e + 1`. Ticks mark whole minutes.
pub fn render_timeline(timeline: &Timeline, meta: &VideoMeta) -> String {
    let height = TOP + 7.0 * LANE_HEIGHT + AXIS_SPACE;
    let mut out = String::new();
    header(&mut out, TIMELINE_WIDTH, height);
    for class in ToolClass::ALL {
        let y = TOP + class.index() as f64 * LANE_HEIGHT;
        let _ = writeln!(
            out,
            r#"<g id="lane-{}"><text x="4" y="{:.2}" font-size="12">({}) {}</text>"#,
            class.letter(),
            y + LANE_HEIGHT * 0.7,
            class.letter(),
            class.name()
        );
        for iv in timeline.intervals(class) {
            let x0 = timeline_x(iv.start as f64, meta);
            let x1 = timeline_x(iv.end as f64 + 1.0, meta);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x0,
                y + 2.0,
                x1 - x0,
                LANE_HEIGHT - 4.0,
                class_color(class)
            );
        }
        out.push_str("</g>\n");
    }

    let axis_y = TOP + 7.0 * LANE_HEIGHT;
    let _ = writeln!(
        out,
        r#"<g id="axis"><line x1="{:.2}" y1="{axis_y:.2}" x2="{:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
        timeline_x(0.0, meta),
        timeline_x(meta.n_frames() as f64, meta)
    );
    let frames_per_minute = meta.fps() * 60.0;
    let minutes = (meta.n_frames() as f64 / frames_per_minute).floor() as u64;
    // Keep at most about 20 labeled ticks.
    let step = (minutes / 20).max(1);
    for m in (0..=minutes).step_by(step as usize) {
        let x = timeline_x(m as f64 * frames_per_minute, meta);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{axis_y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{m}</text>"#,
            axis_y + 4.0,
            axis_y + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">minutes</text></g>"#,
        (LEFT + TIMELINE_WIDTH) / 2.0,
        axis_y + 28.0
    );
    out.push_str("</svg>\n");
    out
}

/// ASCII PGM, one grid row per line. Max value is the largest count, or 1
/// for an empty map.
pub fn render_heatmap(h: &HeatMap) -> String {
    let mut out = format!("P2\n{} {}\n{}\n", h.cols, h.rows, h.max().max(1));
    for row in &h.cells {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Track polylines inside `phase`, in image coordinates, sorted by track id.
/// Tracks with no points in the phase are skipped.
pub fn render_trajectories(tracks: &[Track], phase: &PhaseWindow, meta: &VideoMeta) -> String {
    let (w, h) = (meta.width() as f64, meta.height() as f64);
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="white" stroke="black"/>"#
    );
    let mut ordered: Vec<&Track> = tracks.iter().collect();
    ordered.sort_by_key(|t| t.track_id);
    for t in ordered {
        let pts: Vec<String> = t
            .points
            .iter()
            .filter(|p| phase.contains(p.frame_index))
            .map(|p| format!("{:.2},{:.2}", p.centroid.x, p.centroid.y))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            out,
            r#"<polyline id="track-{}" class="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            t.track_id,
            t.tool.name(),
            pts.join(" "),
            class_color(t.tool)
        );
    }
    out.push_str("</svg>\n");
    out
}
