//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps failures to exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | invalid arguments or input data |
//! | 2 | a file could not be read or written |
//!
//! Failures print one line, `ERROR <validation|io> <message>`, on the error
//! stream.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scopemetrics::dataset::{
    parse_detections, parse_frames, parse_ground_truth, parse_presence_csv, write_meta_csv, write_phases_csv,
    write_presence_csv, DatasetError, FrameSet, RecordKind,
};
use scopemetrics::eval::{evaluate_spatial, presence_ap, to_presence, PresenceScores};
use scopemetrics::rpn::{
    assign_labels, generate_anchors, regression_targets, rpn_loss, AnchorConfig, BoxDelta, LossBreakdown, RpnBatch,
    RpnError,
};
use scopemetrics::synth::{gen_scenario, ScenarioConfig, TruthRecord, XorShift64Star};
use scopemetrics::{BBox, VideoMeta};

pub mod analyze;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn validation(msg: impl Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn diagnostic(&self) -> String {
        let (kind, msg) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Io(m) => ("io", m),
        };
        format!("ERROR {kind} {}", msg.replace('\n', " "))
    }
}

fn in_file(path: &Path, e: DatasetError) -> CliError {
    match e {
        DatasetError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| {
        if e.is_io() {
            CliError::Io(format!("{}: {e}", path.display()))
        } else {
            CliError::Validation(format!("{}: {e}", path.display()))
        }
    })
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data always serializes");
    s.push('\n');
    s
}

#[derive(Debug, Parser)]
#[command(name = "scopemetrics", version, about = "Surgical tool detection evaluation and skill analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-class spatial AP and mAP of detections against ground truth.
    EvaluateSpatial(EvaluateSpatialArgs),
    /// Per-class frame-level presence AP of detections against labels.
    EvaluatePresence(EvaluatePresenceArgs),
    /// Skill metrics, plots and a summary for every video.
    Analyze(analyze::AnalyzeArgs),
    /// Anchor label statistics and RPN loss per ground-truth frame.
    Anchors(AnchorsArgs),
    /// Generate a synthetic dataset from a scenario config.
    Synth(SynthArgs),
    /// Re-render the plots of an existing report.json.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct EvaluateSpatialArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    det: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Debug, Args)]
struct EvaluatePresenceArgs {
    /// Presence CSV; an optional leading video_id column.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    det: PathBuf,
    /// Video id for a labels file without a video_id column [default: file stem].
    #[arg(long)]
    video: Option<String>,
}

#[derive(Debug, Args)]
struct AnchorsArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Anchor config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predictions JSONL with objectness and deltas per anchor. Random
    /// predictions are drawn when absent.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// One scenario object, or `{"scenarios": [...]}`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A report.json written by `analyze`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI on `args` (program name first). Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", CliError::validation(first).diagnostic());
            return 1;
        }
    };
    let result = match cli.command {
        Command::EvaluateSpatial(a) => evaluate_spatial_cmd(&a, out),
        Command::EvaluatePresence(a) => evaluate_presence_cmd(&a, out),
        Command::Analyze(a) => analyze::run(&a),
        Command::Anchors(a) => anchors_cmd(&a, out),
        Command::Synth(a) => synth_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.diagnostic());
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn evaluate_spatial_cmd(a: &EvaluateSpatialArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(CliError::validation(format!("--iou must lie in (0, 1], got {}", a.iou)));
    }
    let (gts, _) = parse_ground_truth(open(&a.gt)?).map_err(|e| in_file(&a.gt, e))?;
    let dets = parse_detections(open(&a.det)?).map_err(|e| in_file(&a.det, e))?;
    let result = evaluate_spatial(&dets, &gts, a.iou).map_err(CliError::validation)?;
    emit(out, &to_json(&result))
}

fn evaluate_presence_cmd(a: &EvaluatePresenceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let default_video = match &a.video {
        Some(v) => v.clone(),
        None => a
            .labels
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let labels = parse_presence_csv(open(&a.labels)?, &default_video).map_err(|e| in_file(&a.labels, e))?;
    let frames = parse_frames(open(&a.det)?, RecordKind::Detections).map_err(|e| in_file(&a.det, e))?;

    let mut n_frames: BTreeMap<&str, u32> = BTreeMap::new();
    for l in &labels {
        let n = n_frames.entry(l.video_id.as_str()).or_default();
        *n = (*n).max(l.frame_index + 1);
    }
    let sizes: BTreeMap<String, (u32, u32)> = frames
        .video_metas()
        .iter()
        .map(|m| (m.video_id().to_string(), (m.width(), m.height())))
        .collect();
    if let Some(v) = sizes.keys().find(|v| !n_frames.contains_key(v.as_str())) {
        return Err(CliError::validation(format!("detections for video {v:?} have no labels")));
    }

    let dets = frames.detections();
    let mut scores = PresenceScores::default();
    for (&video, &n) in &n_frames {
        let (w, h) = sizes.get(video).copied().unwrap_or((1, 1));
        let meta = VideoMeta::new(video, 1.0, w, h, n).map_err(CliError::validation)?;
        let own: Vec<_> = dets.iter().filter(|d| d.video_id == video).cloned().collect();
        scores.merge(to_presence(&own, &meta).map_err(CliError::validation)?);
    }
    let result = presence_ap(&scores.restrict_to(&labels), &labels).map_err(CliError::validation)?;
    emit(out, &to_json(&result))
}

/// One line of an anchors prediction file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    video_id: String,
    frame_index: u32,
    objectness: Vec<f64>,
    deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Serialize)]
struct AnchorFrameStats {
    video_id: String,
    frame_index: u32,
    n_gt: usize,
    anchors: usize,
    positive: usize,
    negative: usize,
    ignored: usize,
    /// Ground-truth boxes left without a positive anchor.
    uncovered_gt: usize,
    clamped_probabilities: usize,
    loss: Option<LossBreakdown>,
}

#[derive(Debug, Serialize)]
struct AnchorReport {
    config: AnchorConfig,
    lambda: f64,
    predictions: String,
    frames: Vec<AnchorFrameStats>,
    mean_loss: Option<f64>,
}

fn read_predictions(path: &Path) -> Result<BTreeMap<(String, u32), PredictionRecord>, CliError> {
    use std::io::BufRead;
    let mut out = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        if rec.objectness.len() != rec.deltas.len() {
            return Err(CliError::validation(format!(
                "{}: line {}: {} objectness values but {} deltas",
                path.display(),
                i + 1,
                rec.objectness.len(),
                rec.deltas.len()
            )));
        }
        let key = (rec.video_id.clone(), rec.frame_index);
        if out.insert(key, rec).is_some() {
            return Err(CliError::validation(format!(
                "{}: line {}: duplicate frame",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(out)
}

fn anchors_cmd(a: &AnchorsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(a.lambda.is_finite() && a.lambda >= 0.0) {
        return Err(CliError::validation(format!("--lambda must be non-negative, got {}", a.lambda)));
    }
    let cfg: AnchorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AnchorConfig::default(),
    };
    cfg.validate().map_err(CliError::validation)?;
    let gt = parse_frames(open(&a.gt)?, RecordKind::GroundTruth).map_err(|e| in_file(&a.gt, e))?;
    let preds = a.pred.as_deref().map(read_predictions).transpose()?;
    let mut rng = XorShift64Star::new(a.seed);

    let mut frames = Vec::new();
    for f in &gt.frames {
        let meta = VideoMeta::new(&f.video_id, 1.0, f.width, f.height, f.frame_index + 1).map_err(CliError::validation)?;
        let anchors = generate_anchors(&meta, &cfg).map_err(CliError::validation)?;
        let gts: Vec<BBox> = f.boxes.iter().map(|b| b.bbox).collect();
        let labels = assign_labels(&anchors, &gts, &cfg).map_err(CliError::validation)?;
        let targets = regression_targets(&anchors, &labels, &gts);

        let (objectness, predicted): (Vec<f64>, Vec<BoxDelta>) = match &preds {
            Some(p) => {
                let rec = p.get(&(f.video_id.clone(), f.frame_index)).ok_or_else(|| {
                    CliError::validation(format!("no predictions for {}/{}", f.video_id, f.frame_index))
                })?;
                if rec.objectness.len() != anchors.len() {
                    return Err(CliError::validation(format!(
                        "{}/{}: {} predictions for {} anchors",
                        f.video_id,
                        f.frame_index,
                        rec.objectness.len(),
                        anchors.len()
                    )));
                }
                (rec.objectness.clone(), rec.deltas.iter().map(|&d| BoxDelta::from_array(d)).collect())
            }
            None => anchors
                .iter()
                .map(|_| {
                    let p = rng.next_f64();
                    let mut d = [0.0; 4];
                    for v in &mut d {
                        *v = 0.2 * (rng.next_f64() - 0.5);
                    }
                    (p, BoxDelta::from_array(d))
                })
                .unzip(),
        };

        let positive = labels.iter().filter(|l| l.is_positive()).count();
        let labeled = labels.iter().filter(|l| l.is_labeled()).count();
        let covered: BTreeSet<usize> = labels.iter().filter(|l| l.is_positive()).filter_map(|l| l.matched_gt()).collect();
        let n_anchors = anchors.len();
        let batch = RpnBatch::new(anchors, labels, objectness, predicted, targets)
            .map_err(CliError::validation)?
            .with_lambda(a.lambda);
        let loss = match rpn_loss(&batch) {
            Ok(l) => Some(l),
            Err(RpnError::NoAnchors) => None,
            Err(e) => return Err(CliError::validation(e)),
        };
        frames.push(AnchorFrameStats {
            video_id: f.video_id.clone(),
            frame_index: f.frame_index,
            n_gt: gts.len(),
            anchors: n_anchors,
            positive,
            negative: labeled - positive,
            ignored: n_anchors - labeled,
            uncovered_gt: (0..gts.len()).filter(|j| !covered.contains(j)).count(),
            clamped_probabilities: batch.clamped,
            loss,
        });
    }
    let losses: Vec<f64> = frames.iter().filter_map(|f| f.loss.map(|l| l.total)).collect();
    let report = AnchorReport {
        config: cfg,
        lambda: a.lambda,
        predictions: match &a.pred {
            Some(p) => p.display().to_string(),
            None => format!("random(seed={})", a.seed),
        },
        mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        frames,
    };
    emit(out, &to_json(&report))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SynthConfigFile {
    Many { scenarios: Vec<ScenarioConfig> },
    One(Box<ScenarioConfig>),
}

fn synth_cmd(a: &SynthArgs) -> Result<(), CliError> {
    let scenarios = match read_json::<SynthConfigFile>(&a.config)? {
        SynthConfigFile::Many { scenarios } => scenarios,
        SynthConfigFile::One(s) => vec![*s],
    };
    let mut seen = BTreeSet::new();
    for s in &scenarios {
        if !seen.insert(s.video_id.as_str()) {
            return Err(CliError::validation(format!("duplicate video_id {:?}", s.video_id)));
        }
    }

    let mut gt = FrameSet { kind: Some(RecordKind::GroundTruth), frames: vec![] };
    let mut det = FrameSet { kind: Some(RecordKind::Detections), frames: vec![] };
    let mut truth: Vec<TruthRecord> = Vec::new();
    let mut metas = Vec::new();
    let mut phases = Vec::new();
    let mut labels = Vec::new();
    for cfg in &scenarios {
        let s = gen_scenario(cfg).map_err(|e| CliError::validation(format!("scenario {:?}: {e}", cfg.video_id)))?;
        labels.extend(s.presence_labels());
        gt.frames.extend(s.ground_truth.frames);
        det.frames.extend(s.detections.frames);
        phases.extend(s.phases.into_iter().map(|p| (cfg.video_id.clone(), p)));
        metas.push(s.meta);
        truth.push(s.truth);
    }
    let by_key = |a: &scopemetrics::dataset::FrameRecord, b: &scopemetrics::dataset::FrameRecord| {
        (a.video_id.as_str(), a.frame_index).cmp(&(b.video_id.as_str(), b.frame_index))
    };
    gt.frames.sort_by(by_key);
    det.frames.sort_by(by_key);
    metas.sort_by(|a, b| a.video_id().cmp(b.video_id()));
    truth.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    phases.sort_by(|a, b| a.0.cmp(&b.0));
    labels.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));

    create_dir(&a.out)?;
    write_file(&a.out.join("gt.jsonl"), &gt.to_jsonl())?;
    write_file(&a.out.join("det.jsonl"), &det.to_jsonl())?;
    write_file(&a.out.join("truth.json"), &to_json(&truth))?;
    write_file(&a.out.join("meta.csv"), &write_meta_csv(&metas))?;
    write_file(&a.out.join("phases.csv"), &write_phases_csv(&phases))?;
    write_file(&a.out.join("presence.csv"), &write_presence_csv(&labels, true))?;
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<(), CliError> {
    let report: scopemetrics::analytics::SkillReport = read_json(&a.input)?;
    if report.schema != scopemetrics::analytics::REPORT_SCHEMA {
        return Err(CliError::validation(format!("unsupported report schema {:?}", report.schema)));
    }
    create_dir(&a.out)?;
    analyze::write_plots(&report, &a.out)
}
