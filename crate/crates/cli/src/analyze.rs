//! The `analyze` subcommand: one [`SkillReport`] and its plots per video,
//! plus a cross-video summary with GOALS correlations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use scopemetrics::analytics::{
    build_report, goals_correlation, mean_goals_totals, path_length, AnalysisConfig, Correlation, SkillReport,
    VideoInput, REPORT_SCHEMA,
};
use scopemetrics::dataset::{parse_detections, parse_goals_csv, parse_meta_csv, parse_phases_csv, DatasetError};
use scopemetrics::render::{render_heatmap, render_timeline, render_trajectories};
use scopemetrics::{PhaseWindow, ToolClass};

use crate::{create_dir, open, to_json, write_file, CliError};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Detections JSONL.
    #[arg(long)]
    pub det: PathBuf,
    /// Video metadata CSV: video_id,fps,width,height,n_frames.
    #[arg(long)]
    pub meta: PathBuf,
    /// Phase windows CSV: video_id,phase,start_frame,end_frame.
    #[arg(long)]
    pub phases: Option<PathBuf>,
    /// GOALS ratings CSV.
    #[arg(long)]
    pub goals: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Confidence gate for presence, heat maps and tracking [default: 0.5].
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Odd majority-vote window over presence flags [default: 3].
    #[arg(long)]
    pub smoothing_window: Option<usize>,
    /// Half-width of the switch pairing window in frames [default: 2].
    #[arg(long)]
    pub switch_window: Option<u32>,
    /// Largest tracking step as a fraction of the frame diagonal [default: 0.15].
    #[arg(long)]
    pub max_jump: Option<f64>,
    /// Largest frame gap inside a track [default: 3].
    #[arg(long)]
    pub max_gap: Option<u32>,
    /// Heat map rows [default: 32].
    #[arg(long)]
    pub grid_rows: Option<usize>,
    /// Heat map columns [default: 32].
    #[arg(long)]
    pub grid_cols: Option<usize>,
    /// Phase whose path length enters the summary [default: whole video].
    #[arg(long)]
    pub summary_phase: Option<String>,
    /// Worker threads [default: logical cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Record the generation time in each report.
    #[arg(long)]
    pub stamp: bool,
}

impl AnalyzeArgs {
    pub fn config(&self) -> AnalysisConfig {
        let d = AnalysisConfig::default();
        AnalysisConfig {
            min_confidence: self.min_confidence.unwrap_or(d.min_confidence),
            smoothing_window: self.smoothing_window.unwrap_or(d.smoothing_window),
            switch_window: self.switch_window.unwrap_or(d.switch_window),
            max_jump: self.max_jump.unwrap_or(d.max_jump),
            max_gap: self.max_gap.unwrap_or(d.max_gap),
            grid_rows: self.grid_rows.unwrap_or(d.grid_rows),
            grid_cols: self.grid_cols.unwrap_or(d.grid_cols),
        }
    }
}

// Ids become file and directory names.
fn check_name(kind: &str, name: &str) -> Result<(), CliError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{kind} {name:?} must be non-empty and use only letters, digits, '.', '_' or '-'"
        )))
    }
}

fn parse<T>(path: &Path, r: Result<T, DatasetError>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        DatasetError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::validation(format!("{}: {other}", path.display())),
    })
}

/// Per-video values entering the summary.
#[derive(Debug, Clone, Serialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub duration_seconds: f64,
    pub usage_seconds_total: f64,
    pub switch_count: usize,
    pub path_length_px: f64,
    pub path_length_normalized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goals_total: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: String,
    pub path_phase: String,
    pub videos: Vec<VideoSummary>,
    /// Spearman correlation of each metric with the mean GOALS total; null
    /// when fewer than three rated videos or a constant metric.
    pub correlations: BTreeMap<String, Option<Correlation>>,
}

/// Writes the timeline, heat maps and one trajectory plot per phase.
pub fn write_plots(report: &SkillReport, dir: &Path) -> Result<(), CliError> {
    let meta = &report.meta;
    write_file(&dir.join("timeline.svg"), &render_timeline(&report.timeline, meta))?;
    for (class, h) in &report.heatmaps.per_class {
        write_file(&dir.join(format!("heatmap_{}.pgm", class.name())), &render_heatmap(h))?;
    }
    write_file(&dir.join("heatmap_combined.pgm"), &render_heatmap(&report.heatmaps.combined))?;
    for m in &report.motion {
        check_name("phase name", m.phase.name())?;
        write_file(
            &dir.join(format!("trajectory_{}.svg", m.phase.name())),
            &render_trajectories(&report.tracks, &m.phase, meta),
        )?;
    }
    Ok(())
}

fn summarize(report: &SkillReport, phase: Option<&str>) -> Result<VideoSummary, CliError> {
    let meta = &report.meta;
    let motion = match phase {
        Some(name) => report
            .motion_for(name)
            .cloned()
            .ok_or_else(|| CliError::validation(format!("video {} has no phase {name:?}", report.video_id)))?,
        None => path_length(&report.tracks, &PhaseWindow::full(meta), meta),
    };
    Ok(VideoSummary {
        video_id: report.video_id.clone(),
        duration_seconds: meta.duration_seconds(),
        usage_seconds_total: report.usage_seconds.seconds.values().sum(),
        switch_count: report.switch_count,
        path_length_px: motion.total_px(),
        path_length_normalized: motion.total_normalized(),
        goals_total: report.goals.as_ref().map(|g| g.total),
    })
}

pub fn run(a: &AnalyzeArgs) -> Result<(), CliError> {
    let cfg = a.config();
    cfg.validate().map_err(CliError::validation)?;
    if a.jobs == Some(0) {
        return Err(CliError::validation("--jobs must be at least 1"));
    }

    let metas = parse(&a.meta, parse_meta_csv(open(&a.meta)?))?;
    let mut ids = BTreeSet::new();
    for m in &metas {
        check_name("video id", m.video_id())?;
        if !ids.insert(m.video_id()) {
            return Err(CliError::validation(format!("duplicate metadata for video {:?}", m.video_id())));
        }
    }
    let dets = parse(&a.det, parse_detections(open(&a.det)?))?;
    if let Some(d) = dets.iter().find(|d| !ids.contains(d.video_id.as_str())) {
        return Err(CliError::validation(format!("detections for video {:?} have no metadata", d.video_id)));
    }
    let mut phases = match &a.phases {
        Some(p) => parse(p, parse_phases_csv(open(p)?, &metas))?,
        None => BTreeMap::new(),
    };
    for windows in phases.values() {
        let mut names = BTreeSet::new();
        for w in windows {
            check_name("phase name", w.name())?;
            if !names.insert(w.name()) {
                return Err(CliError::validation(format!("phase {:?} listed twice for one video", w.name())));
            }
        }
    }
    let goals = match &a.goals {
        Some(p) => parse(p, parse_goals_csv(open(p)?))?,
        None => Vec::new(),
    };

    let mut inputs: Vec<VideoInput> = metas
        .iter()
        .map(|m| VideoInput {
            meta: m.clone(),
            detections: Vec::new(),
            phases: phases.remove(m.video_id()).unwrap_or_default(),
            goals: goals.iter().filter(|g| g.video_id == m.video_id()).cloned().collect(),
        })
        .collect();
    inputs.sort_by(|x, y| x.meta.video_id().cmp(y.meta.video_id()));
    let index: BTreeMap<String, usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, v)| (v.meta.video_id().to_string(), i))
        .collect();
    for d in dets {
        let i = index[&d.video_id];
        inputs[i].detections.push(d);
    }

    let stamp = a.stamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    create_dir(&a.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::validation(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<VideoSummary, CliError>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|input| {
                let mut report = build_report(input, &cfg).map_err(CliError::validation)?;
                report.generated_at = stamp;
                let dir = a.out.join(&report.video_id);
                create_dir(&dir)?;
                write_file(&dir.join("report.json"), &report.to_json())?;
                write_plots(&report, &dir)?;
                summarize(&report, a.summary_phase.as_deref())
            })
            .collect()
    });
    let videos = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut correlations = BTreeMap::new();
    type Metric = fn(&VideoSummary) -> f64;
    let metrics: [(&str, Metric); 4] = [
        ("usage_seconds_total", |v| v.usage_seconds_total),
        ("switch_count", |v| v.switch_count as f64),
        ("path_length_px", |v| v.path_length_px),
        ("path_length_normalized", |v| v.path_length_normalized),
    ];
    let rated = mean_goals_totals(&goals);
    for (name, f) in metrics {
        let metric: BTreeMap<String, f64> = videos
            .iter()
            .filter(|v| rated.contains_key(&v.video_id))
            .map(|v| (v.video_id.clone(), f(v)))
            .collect();
        correlations.insert(name.to_string(), goals_correlation(&metric, &goals).ok());
    }
    let summary = Summary {
        schema: REPORT_SCHEMA.to_string(),
        path_phase: a.summary_phase.clone().unwrap_or_else(|| "full".to_string()),
        videos,
        correlations,
    };
    write_file(&a.out.join("summary.json"), &to_json(&summary))
}

/// File names `analyze` writes for one report, relative to its directory.
pub fn artifact_names(report: &SkillReport) -> Vec<String> {
    let mut names = vec!["report.json".to_string(), "timeline.svg".to_string()];
    names.extend(ToolClass::ALL.iter().map(|c| format!("heatmap_{}.pgm", c.name())));
    names.push("heatmap_combined.pgm".to_string());
    names.extend(report.motion.iter().map(|m| format!("trajectory_{}.svg", m.phase.name())));
    names
}
