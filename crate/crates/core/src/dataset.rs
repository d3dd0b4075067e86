//! Readers and writers for the on-disk formats: JSON Lines frame records for
//! ground truth and detections, CSV for presence labels, GOALS ratings, video
//! metadata and phase windows.
//!
//! Every parse error carries the 1-based line (JSONL) or data row (CSV)
//! where it was found.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Detection, GeometryError, GroundTruthBox, PhaseWindow, ToolClass, VideoMeta};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: unknown class {name:?}")]
    UnknownClass { line: usize, name: String },
    #[error("line {line}: invalid box in frame {frame_index}")]
    InvalidBox { line: usize, frame_index: u32 },
    #[error("line {line}: box out of frame bounds in frame {frame_index}")]
    BoxOutOfBounds { line: usize, frame_index: u32 },
    #[error("line {line}: duplicate frame {video_id}/{frame_index}")]
    DuplicateFrame {
        line: usize,
        video_id: String,
        frame_index: u32,
    },
    #[error("line {line}: frame size of {video_id} differs from earlier records")]
    InconsistentDimensions { line: usize, video_id: String },
    #[error("line {line}: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { line: usize, value: f64 },
    #[error("bad header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },
    #[error("row {row}: column {column} must be 0 or 1, found {value:?}")]
    BadFlag {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: malformed row: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: {column} score {value} outside [1, 5]")]
    ScoreOutOfRange {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: stored total {stored} disagrees with component sum {computed}")]
    TotalMismatch {
        row: usize,
        stored: f64,
        computed: f64,
    },
    #[error("row {row}: {source}")]
    Geometry {
        row: usize,
        #[source]
        source: GeometryError,
    },
    #[error("read error: {0}")]
    Io(#[from] std::io::Error),
}

pub const PRESENCE_HEADER: &str = "frame_index,grasper,bipolar,hook,scissors,clipper,irrigator,specimen_bag";
pub const GOALS_HEADER: &str =
    "video_id,rater_id,depth_perception,bimanual_dexterity,efficiency,tissue_handling,total";
pub const META_HEADER: &str = "video_id,fps,width,height,n_frames";
pub const PHASES_HEADER: &str = "video_id,phase,start_frame,end_frame";

/// Which flavor of JSONL file is being read; decides whether `confidence`
/// is required or forbidden on each box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    GroundTruth,
    Detections,
}

/// One box inside a frame record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub class: ToolClass,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// One line of a ground-truth or detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    video_id: String,
    frame_index: u32,
    width: u32,
    height: u32,
    #[serde(default)]
    boxes: Vec<RawBox>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    class: String,
    bbox: [f64; 4],
    confidence: Option<f64>,
}

/// A validated, canonically ordered collection of frame records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSet {
    pub kind: Option<RecordKind>,
    pub frames: Vec<FrameRecord>,
}

impl FrameSet {
    pub fn ground_truth(&self) -> Vec<GroundTruthBox> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.boxes.iter().map(move |b| GroundTruthBox {
                    video_id: f.video_id.clone(),
                    frame_index: f.frame_index,
                    tool: b.class,
                    bbox: b.bbox,
                })
            })
            .collect()
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.boxes.iter().map(move |b| Detection {
                    video_id: f.video_id.clone(),
                    frame_index: f.frame_index,
                    tool: b.class,
                    bbox: b.bbox,
                    confidence: b.confidence.unwrap_or(1.0),
                })
            })
            .collect()
    }

    /// Metadata inferred from the records: 1 fps, the recorded frame size and
    /// `n_frames = last frame index + 1`.
    pub fn video_metas(&self) -> Vec<VideoMeta> {
        let mut out: Vec<VideoMeta> = Vec::new();
        for f in &self.frames {
            match out.last_mut() {
                Some(m) if m.video_id() == f.video_id => {
                    *m = VideoMeta::new(&f.video_id, 1.0, f.width, f.height, f.frame_index + 1)
                        .expect("validated on parse");
                }
                _ => out.push(
                    VideoMeta::new(&f.video_id, 1.0, f.width, f.height, f.frame_index + 1)
                        .expect("validated on parse"),
                ),
            }
        }
        out
    }

    /// Canonical serialization: one compact JSON object per line, records
    /// ordered by `(video_id, frame_index)`, LF terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("frame records always serialize"));
            out.push('\n');
        }
        out
    }
}

/// Reads a JSONL frame file of the given kind.
pub fn parse_frames<R: BufRead>(reader: R, kind: RecordKind) -> Result<FrameSet, DatasetError> {
    let mut frames = Vec::new();
    let mut seen: BTreeMap<(String, u32), usize> = BTreeMap::new();
    let mut dims: BTreeMap<String, (u32, u32)> = BTreeMap::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawFrame = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if raw.width == 0 || raw.height == 0 {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                reason: "width and height must be positive".into(),
            });
        }
        match dims.get(&raw.video_id) {
            Some(&d) if d != (raw.width, raw.height) => {
                return Err(DatasetError::InconsistentDimensions {
                    line: line_no,
                    video_id: raw.video_id,
                })
            }
            Some(_) => {}
            None => {
                dims.insert(raw.video_id.clone(), (raw.width, raw.height));
            }
        }
        if seen.insert((raw.video_id.clone(), raw.frame_index), line_no).is_some() {
            return Err(DatasetError::DuplicateFrame {
                line: line_no,
                video_id: raw.video_id,
                frame_index: raw.frame_index,
            });
        }

        let mut boxes = Vec::with_capacity(raw.boxes.len());
        for rb in raw.boxes {
            let class: ToolClass = rb.class.parse().map_err(|_| DatasetError::UnknownClass {
                line: line_no,
                name: rb.class.clone(),
            })?;
            let [x0, y0, x1, y1] = rb.bbox;
            let bbox = BBox::new(x0, y0, x1, y1).map_err(|_| DatasetError::InvalidBox {
                line: line_no,
                frame_index: raw.frame_index,
            })?;
            if !bbox.within(raw.width as f64, raw.height as f64) {
                return Err(DatasetError::BoxOutOfBounds {
                    line: line_no,
                    frame_index: raw.frame_index,
                });
            }
            let confidence = match (kind, rb.confidence) {
                (RecordKind::GroundTruth, Some(_)) => {
                    return Err(DatasetError::MalformedLine {
                        line: line_no,
                        reason: "confidence is not allowed in ground-truth records".into(),
                    })
                }
                (RecordKind::GroundTruth, None) => None,
                (RecordKind::Detections, None) => {
                    return Err(DatasetError::MalformedLine {
                        line: line_no,
                        reason: "detection boxes require a confidence".into(),
                    })
                }
                (RecordKind::Detections, Some(c)) => {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(DatasetError::ConfidenceOutOfRange {
                            line: line_no,
                            value: c,
                        });
                    }
                    Some(c)
                }
            };
            boxes.push(BoxRecord {
                class,
                bbox,
                confidence,
            });
        }
        frames.push(FrameRecord {
            video_id: raw.video_id,
            frame_index: raw.frame_index,
            width: raw.width,
            height: raw.height,
            boxes,
        });
    }

    frames.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));
    Ok(FrameSet {
        kind: Some(kind),
        frames,
    })
}

/// Ground-truth boxes and the per-video metadata implied by the file.
pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<(Vec<GroundTruthBox>, Vec<VideoMeta>), DatasetError> {
    let set = parse_frames(reader, RecordKind::GroundTruth)?;
    Ok((set.ground_truth(), set.video_metas()))
}

pub fn parse_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>, DatasetError> {
    Ok(parse_frames(reader, RecordKind::Detections)?.detections())
}

/// Groups detections into frame records. `metas` supplies frame sizes; frames
/// are emitted only where at least one detection exists.
pub fn detections_to_frames(dets: &[Detection], metas: &[VideoMeta]) -> FrameSet {
    let sizes: BTreeMap<&str, (u32, u32)> = metas
        .iter()
        .map(|m| (m.video_id(), (m.width(), m.height())))
        .collect();
    let mut grouped: BTreeMap<(String, u32), Vec<BoxRecord>> = BTreeMap::new();
    for d in dets {
        grouped
            .entry((d.video_id.clone(), d.frame_index))
            .or_default()
            .push(BoxRecord {
                class: d.tool,
                bbox: d.bbox,
                confidence: Some(d.confidence),
            });
    }
    let frames = grouped
        .into_iter()
        .map(|((video_id, frame_index), boxes)| {
            let (width, height) = sizes.get(video_id.as_str()).copied().unwrap_or((0, 0));
            FrameRecord {
                video_id,
                frame_index,
                width,
                height,
                boxes,
            }
        })
        .collect();
    FrameSet {
        kind: Some(RecordKind::Detections),
        frames,
    }
}

/// Frame-level presence labels, one flag per class in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub flags: [bool; 7],
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn header_line(rdr: &mut csv::Reader<impl Read>) -> Result<Vec<String>, DatasetError> {
    let headers = rdr.headers().map_err(|e| DatasetError::BadHeader {
        expected: String::new(),
        found: e.to_string(),
    })?;
    Ok(headers.iter().map(str::to_string).collect())
}

fn row_error(row: usize, e: csv::Error) -> DatasetError {
    DatasetError::MalformedRow {
        row,
        reason: e.to_string(),
    }
}

/// Reads a presence CSV. The header is either the canonical
/// `frame_index,grasper,…,specimen_bag` (records take `default_video`) or the
/// same with a leading `video_id` column.
pub fn parse_presence_csv<R: Read>(reader: R, default_video: &str) -> Result<Vec<PresenceRecord>, DatasetError> {
    let mut rdr = csv_reader(reader);
    let header = header_line(&mut rdr)?;
    let joined = header.join(",");
    let with_video = if joined == PRESENCE_HEADER {
        false
    } else if joined == format!("video_id,{PRESENCE_HEADER}") {
        true
    } else {
        return Err(DatasetError::BadHeader {
            expected: PRESENCE_HEADER.to_string(),
            found: joined,
        });
    };
    let offset = usize::from(with_video);

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_error(row, e))?;
        let video_id = if with_video {
            rec[0].to_string()
        } else {
            default_video.to_string()
        };
        let frame_index: u32 = rec[offset].parse().map_err(|_| DatasetError::MalformedRow {
            row,
            reason: format!("bad frame_index {:?}", &rec[offset]),
        })?;
        let mut flags = [false; 7];
        for (k, flag) in flags.iter_mut().enumerate() {
            let col = offset + 1 + k;
            *flag = match &rec[col] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(DatasetError::BadFlag {
                        row,
                        column: header[col].clone(),
                        value: other.to_string(),
                    })
                }
            };
        }
        out.push(PresenceRecord {
            video_id,
            frame_index,
            flags,
        });
    }
    Ok(out)
}

/// Writes presence labels. The `video_id` column is included when
/// `include_video` is set or the records span more than one video.
pub fn write_presence_csv(records: &[PresenceRecord], include_video: bool) -> String {
    let multi = include_video
        || records
            .iter()
            .map(|r| r.video_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
            > 1;
    let mut out = String::new();
    if multi {
        out.push_str("video_id,");
    }
    out.push_str(PRESENCE_HEADER);
    out.push('\n');
    for r in records {
        if multi {
            out.push_str(&r.video_id);
            out.push(',');
        }
        out.push_str(&r.frame_index.to_string());
        for f in r.flags {
            out.push_str(if f { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

/// One rater's (or an averaged) GOALS assessment with the autonomy domain
/// omitted, so totals run from 4 to 20.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalsRating {
    pub video_id: String,
    pub rater_id: String,
    pub depth_perception: f64,
    pub bimanual_dexterity: f64,
    pub efficiency: f64,
    pub tissue_handling: f64,
    pub total: f64,
}

pub const GOALS_TOTAL_TOLERANCE: f64 = 0.005;

/// Snaps a two-decimal score to the nearest third when it is within the
/// rounding tolerance, recovering the exact mean of three integer ratings.
pub fn snap_to_thirds(value: f64) -> f64 {
    let thirds = (value * 3.0).round();
    if (value - thirds / 3.0).abs() <= GOALS_TOTAL_TOLERANCE {
        thirds / 3.0
    } else {
        value
    }
}

impl GoalsRating {
    /// Builds a rating from the four domain scores (depth perception,
    /// bimanual dexterity, efficiency, tissue handling). Scores are snapped
    /// to thirds and the total is their sum.
    pub fn from_components(
        video_id: impl Into<String>,
        rater_id: impl Into<String>,
        scores: [f64; 4],
    ) -> Result<Self, (usize, f64)> {
        let mut snapped = [0.0; 4];
        for (k, &s) in scores.iter().enumerate() {
            if !(1.0..=5.0).contains(&s) {
                return Err((k, s));
            }
            snapped[k] = snap_to_thirds(s);
        }
        Ok(GoalsRating {
            video_id: video_id.into(),
            rater_id: rater_id.into(),
            depth_perception: snapped[0],
            bimanual_dexterity: snapped[1],
            efficiency: snapped[2],
            tissue_handling: snapped[3],
            total: snapped.iter().sum(),
        })
    }
}

const GOALS_DOMAINS: [&str; 4] = ["depth_perception", "bimanual_dexterity", "efficiency", "tissue_handling"];

/// Reads GOALS ratings. `total` may be absent or blank; when present it must
/// match the recomputed total within [`GOALS_TOTAL_TOLERANCE`].
pub fn parse_goals_csv<R: Read>(reader: R) -> Result<Vec<GoalsRating>, DatasetError> {
    let mut rdr = csv_reader(reader);
    let header = header_line(&mut rdr)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let missing = || DatasetError::BadHeader {
        expected: GOALS_HEADER.to_string(),
        found: header.join(","),
    };
    let video_col = col("video_id").ok_or_else(missing)?;
    let rater_col = col("rater_id").ok_or_else(missing)?;
    let mut domain_cols = [0usize; 4];
    for (k, name) in GOALS_DOMAINS.iter().enumerate() {
        domain_cols[k] = col(name).ok_or_else(missing)?;
    }
    let total_col = col("total");

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_error(row, e))?;
        let mut scores = [0.0; 4];
        for (k, &c) in domain_cols.iter().enumerate() {
            scores[k] = rec[c].parse().map_err(|_| DatasetError::MalformedRow {
                row,
                reason: format!("bad {} score {:?}", GOALS_DOMAINS[k], &rec[c]),
            })?;
        }
        let rating = GoalsRating::from_components(&rec[video_col], &rec[rater_col], scores).map_err(
            |(k, value)| DatasetError::ScoreOutOfRange {
                row,
                column: GOALS_DOMAINS[k].to_string(),
                value,
            },
        )?;
        if let Some(tc) = total_col {
            let raw = &rec[tc];
            if !raw.is_empty() {
                let stored: f64 = raw.parse().map_err(|_| DatasetError::MalformedRow {
                    row,
                    reason: format!("bad total {raw:?}"),
                })?;
                if (stored - rating.total).abs() > GOALS_TOTAL_TOLERANCE {
                    return Err(DatasetError::TotalMismatch {
                        row,
                        stored,
                        computed: rating.total,
                    });
                }
            }
        }
        out.push(rating);
    }
    Ok(out)
}

/// Reads `video_id,fps,width,height,n_frames`.
pub fn parse_meta_csv<R: Read>(reader: R) -> Result<Vec<VideoMeta>, DatasetError> {
    let mut rdr = csv_reader(reader);
    let header = header_line(&mut rdr)?;
    if header.join(",") != META_HEADER {
        return Err(DatasetError::BadHeader {
            expected: META_HEADER.to_string(),
            found: header.join(","),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_error(row, e))?;
        let bad = |what: &str| DatasetError::MalformedRow {
            row,
            reason: format!("bad {what}"),
        };
        let fps: f64 = rec[1].parse().map_err(|_| bad("fps"))?;
        let width: u32 = rec[2].parse().map_err(|_| bad("width"))?;
        let height: u32 = rec[3].parse().map_err(|_| bad("height"))?;
        let n_frames: u32 = rec[4].parse().map_err(|_| bad("n_frames"))?;
        let meta = VideoMeta::new(&rec[0], fps, width, height, n_frames)
            .map_err(|source| DatasetError::Geometry { row, source })?;
        out.push(meta);
    }
    Ok(out)
}

pub fn write_meta_csv(metas: &[VideoMeta]) -> String {
    let mut out = format!("{META_HEADER}\n");
    for m in metas {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.video_id(),
            m.fps(),
            m.width(),
            m.height(),
            m.n_frames()
        ));
    }
    out
}

/// Reads `video_id,phase,start_frame,end_frame`, validating each window
/// against the matching video's metadata.
pub fn parse_phases_csv<R: Read>(
    reader: R,
    metas: &[VideoMeta],
) -> Result<BTreeMap<String, Vec<PhaseWindow>>, DatasetError> {
    let mut rdr = csv_reader(reader);
    let header = header_line(&mut rdr)?;
    if header.join(",") != PHASES_HEADER {
        return Err(DatasetError::BadHeader {
            expected: PHASES_HEADER.to_string(),
            found: header.join(","),
        });
    }
    let mut out: BTreeMap<String, Vec<PhaseWindow>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_error(row, e))?;
        let meta = metas
            .iter()
            .find(|m| m.video_id() == &rec[0])
            .ok_or_else(|| DatasetError::MalformedRow {
                row,
                reason: format!("no metadata for video {:?}", &rec[0]),
            })?;
        let bad = |what: &str| DatasetError::MalformedRow {
            row,
            reason: format!("bad {what}"),
        };
        let start: u32 = rec[2].parse().map_err(|_| bad("start_frame"))?;
        let end: u32 = rec[3].parse().map_err(|_| bad("end_frame"))?;
        let phase =
            PhaseWindow::new(&rec[1], start, end, meta).map_err(|source| DatasetError::Geometry { row, source })?;
        out.entry(rec[0].to_string()).or_default().push(phase);
    }
    Ok(out)
}

pub fn write_phases_csv(phases: &[(String, PhaseWindow)]) -> String {
    let mut out = format!("{PHASES_HEADER}\n");
    for (video, p) in phases {
        out.push_str(&format!(
            "{},{},{},{}\n",
            video,
            p.name(),
            p.start_frame(),
            p.end_frame()
        ));
    }
    out
}

/// Annotated-instance counts per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub per_class: BTreeMap<ToolClass, usize>,
    pub total_instances: usize,
    pub n_annotated_frames: usize,
}

pub fn build_manifest(gts: &[GroundTruthBox]) -> DatasetManifest {
    let mut per_class: BTreeMap<ToolClass, usize> = ToolClass::ALL.iter().map(|&c| (c, 0)).collect();
    let mut frames = BTreeSet::new();
    for g in gts {
        *per_class.get_mut(&g.tool).expect("all classes present") += 1;
        frames.insert((g.video_id.as_str(), g.frame_index));
    }
    DatasetManifest {
        total_instances: per_class.values().sum(),
        per_class,
        n_annotated_frames: frames.len(),
    }
}
