//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS or FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use scopemetrics::analytics::{build_report, AnalysisConfig, SkillReport, VideoInput};
use scopemetrics::dataset::{build_manifest, parse_goals_csv, parse_ground_truth, GOALS_HEADER};
use scopemetrics::eval::{evaluate_spatial, mean_ap};
use scopemetrics::rpn::{
    assign_labels, generate_anchors, rpn_loss, rpn_loss_gradient, AnchorConfig, AnchorLabel,
    BoxDelta, RpnBatch,
};
use scopemetrics::synth::{
    gen_scenario, oracle_spatial_ap, random_eval_case, NoiseConfig, ScenarioConfig, ToolScript, TruthRecord,
    XorShift64Star,
};
use scopemetrics::{BBox, ToolClass, VideoMeta};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

const SPATIAL_AP: [f64; 7] = [48.3, 67.0, 78.4, 67.7, 86.3, 17.5, 76.3];
const PRESENCE_AP: [f64; 7] = [87.2, 75.1, 95.3, 70.8, 88.4, 73.5, 82.1];

fn map_fixture() -> Outcome {
    let start = Instant::now();
    let spatial = mean_ap(SPATIAL_AP.iter().map(|&v| Some(v))).map_err(|e| e.to_string())?;
    let presence = mean_ap(PRESENCE_AP.iter().map(|&v| Some(v))).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure((spatial - 63.07).abs() <= 0.005, || format!("spatial mAP {spatial}"))?;
    ensure((presence - 81.77).abs() <= 0.005, || format!("presence mAP {presence}"))?;
    within_time(elapsed, Duration::from_millis(1))?;
    Ok(format!("spatial {spatial:.4}, presence {presence:.4} in {elapsed:?}"))
}

fn goals_fixture() -> Outcome {
    let rows = [
        ("1", "2.67,3.00,2.00,2.33", 10.00),
        ("2", "4.67,4.67,4.67,4.67", 18.67),
        ("3", "2.33,2.00,2.33,2.67", 9.33),
        ("4", "3.67,3.33,3.00,3.33", 13.33),
    ];
    let mut csv = format!("{GOALS_HEADER}\n");
    for (video, scores, total) in rows {
        writeln!(csv, "{video},mean,{scores},{total:.2}").unwrap();
    }
    let ratings = parse_goals_csv(csv.as_bytes()).map_err(|e| e.to_string())?;
    let mut got = Vec::new();
    for (r, (_, _, expected)) in ratings.iter().zip(rows) {
        ensure((r.total - expected).abs() <= 0.005, || format!("video {}: total {}", r.video_id, r.total))?;
        got.push(format!("{:.2}", r.total));
    }
    ensure(ratings.len() == 4, || format!("{} rows parsed", ratings.len()))?;
    Ok(format!("totals {}", got.join(", ")))
}

fn ap_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for seed in 1..=1000u64 {
        let (dets, gts) = random_eval_case(seed, 50);
        let oracle = oracle_spatial_ap(&dets, &gts, 0.5);
        let per_class = match evaluate_spatial(&dets, &gts, 0.5) {
            Ok(r) => r.per_class,
            Err(_) => ToolClass::ALL.iter().map(|&c| (c, None)).collect(),
        };
        for class in ToolClass::ALL {
            match (per_class[&class], oracle[&class]) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    compared += 1;
                }
                (None, None) => {}
                (a, b) => return Err(format!("seed {seed} {class}: {a:?} vs oracle {b:?}")),
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-9, || format!("max |AP - oracle| = {worst:e}"))?;
    within_time(elapsed, Duration::from_secs(10))?;
    Ok(format!("{compared} class APs, max diff {worst:e}, {elapsed:?}"))
}

fn random_batch(rng: &mut XorShift64Star) -> RpnBatch {
    let n = 5 + (rng.next_u64() % 60) as usize;
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = (rng.next_f64() * 200.0, rng.next_f64() * 200.0);
        let (w, h) = (10.0 + rng.next_f64() * 80.0, 10.0 + rng.next_f64() * 80.0);
        anchors.push(BBox::new(x, y, x + w, y + h).unwrap());
    }
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.next_f64();
        if u < 0.4 {
            labels.push(AnchorLabel::positive(0));
            let mut t = [0.0; 4];
            for v in &mut t {
                *v = 3.0 * (rng.next_f64() - 0.5);
            }
            targets.push(Some(BoxDelta::from_array(t)));
        } else {
            labels.push(if u < 0.85 { AnchorLabel::negative() } else { AnchorLabel::ignore() });
            targets.push(None);
        }
    }
    if !labels.iter().any(|l| l.is_labeled()) {
        labels[0] = AnchorLabel::negative();
    }
    let objectness = (0..n).map(|_| 0.02 + 0.96 * rng.next_f64()).collect();
    let predicted = (0..n)
        .map(|_| {
            let mut t = [0.0; 4];
            for v in &mut t {
                *v = 3.0 * (rng.next_f64() - 0.5);
            }
            BoxDelta::from_array(t)
        })
        .collect();
    RpnBatch::new(anchors, labels, objectness, predicted, targets)
        .unwrap()
        .with_normalizers(1.0 + (rng.next_u64() % 50) as f64, 1.0 + (rng.next_u64() % 500) as f64)
}

// Relative 1e-5, with an absolute floor at the round-off of a central
// difference of a loss of size `loss` taken with step `h`.
fn close(analytic: f64, numeric: f64, loss: f64, h: f64) -> bool {
    let roundoff = 4.0 * f64::EPSILON * loss.abs().max(1.0) / h;
    (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()) + roundoff
}

fn loss_and_gradient() -> Outcome {
    let start = Instant::now();
    let a = BBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
    let single = RpnBatch::new(vec![a], vec![AnchorLabel::negative()], vec![0.5], vec![BoxDelta::default()], vec![None])
        .map_err(|e| e.to_string())?;
    let l = rpn_loss(&single).map_err(|e| e.to_string())?.total;
    ensure((l - std::f64::consts::LN_2).abs() <= 1e-6, || format!("single-anchor loss {l}"))?;

    let mut rng = XorShift64Star::new(2024);
    let h = 1e-6;
    let mut checked = 0;
    for b in 0..100 {
        let batch = random_batch(&mut rng);
        let grad = rpn_loss_gradient(&batch).map_err(|e| e.to_string())?;
        let loss = |x: &RpnBatch| rpn_loss(x).unwrap().total;
        let l0 = loss(&batch);
        for i in 0..batch.anchors.len() {
            let mut up = batch.clone();
            let mut down = batch.clone();
            up.objectness[i] += h;
            down.objectness[i] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            ensure(close(grad.objectness[i], fd, l0, h), || {
                format!("batch {b} anchor {i} dL/dp: analytic {} vs numeric {fd}", grad.objectness[i])
            })?;
            for k in 0..4 {
                let mut up = batch.clone();
                let mut down = batch.clone();
                let mut t = up.predicted[i].to_array();
                t[k] += h;
                up.predicted[i] = BoxDelta::from_array(t);
                let mut t = down.predicted[i].to_array();
                t[k] -= h;
                down.predicted[i] = BoxDelta::from_array(t);
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                ensure(close(grad.deltas[i][k], fd, l0, h), || {
                    format!("batch {b} anchor {i} dL/dt{k}: analytic {} vs numeric {fd}", grad.deltas[i][k])
                })?;
            }
            checked += 5;
        }
    }
    let elapsed = start.elapsed();
    within_time(elapsed, Duration::from_secs(5))?;
    Ok(format!("loss {l:.6}; {checked} partials on 100 batches in {elapsed:?}"))
}

fn anchor_rules() -> Outcome {
    let mut rng = XorShift64Star::new(99);
    let mut total_gts = 0;
    let mut total_anchors = 0;
    let mut unreachable = 0;
    for case in 0..500 {
        let width = 64 + (rng.next_u64() % 600) as u32;
        let height = 64 + (rng.next_u64() % 400) as u32;
        let meta = VideoMeta::new("a", 1.0, width, height, 1).unwrap();
        let cfg = AnchorConfig {
            stride: 8 + (rng.next_u64() % 40) as u32,
            scales: (0..1 + rng.next_u64() % 3).map(|_| 16.0 + rng.next_f64() * 200.0).collect(),
            aspect_ratios: (0..1 + rng.next_u64() % 3).map(|_| 0.33 + rng.next_f64() * 2.7).collect(),
            ..AnchorConfig::default()
        };
        let anchors = generate_anchors(&meta, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let n_gt = 1 + (rng.next_u64() % 5) as usize;
        let gts: Vec<BBox> = (0..n_gt)
            .map(|_| {
                let w = 4.0 + rng.next_f64() * (width as f64 - 4.0);
                let h = 4.0 + rng.next_f64() * (height as f64 - 4.0);
                let x = rng.next_f64() * (width as f64 - w);
                let y = rng.next_f64() * (height as f64 - h);
                BBox::new(x, y, x + w, y + h).unwrap()
            })
            .collect();
        let labels = assign_labels(&anchors, &gts, &cfg).map_err(|e| format!("case {case}: {e}"))?;

        let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| a.iou(g)).collect()).collect();
        let gt_max: Vec<f64> = (0..n_gt).map(|j| ious.iter().map(|r| r[j]).fold(0.0, f64::max)).collect();
        for (i, row) in ious.iter().enumerate() {
            let best = row.iter().copied().fold(0.0, f64::max);
            let rescued = (0..n_gt).any(|j| gt_max[j] > 0.0 && gt_max[j] <= cfg.pos_iou && row[j] >= gt_max[j] - 1e-12);
            let positive = best > cfg.pos_iou || rescued;
            let l = labels[i];
            let expected = if positive {
                "positive"
            } else if best < cfg.neg_iou {
                "negative"
            } else {
                "ignore"
            };
            let actual = if l.is_positive() {
                "positive"
            } else if l.is_labeled() {
                "negative"
            } else {
                "ignore"
            };
            ensure(expected == actual, || format!("case {case} anchor {i}: {actual}, rule says {expected}"))?;
        }
        // A gt overlapping no anchor at all has no argmax to promote.
        for j in (0..n_gt).filter(|&j| gt_max[j] > 0.0) {
            let covered = labels
                .iter()
                .zip(&ious)
                .any(|(l, row)| l.is_positive() && row[j] > 0.0 && row[j] >= gt_max[j] - 1e-12);
            ensure(covered, || format!("case {case}: gt {j} has no positive anchor"))?;
        }
        total_gts += n_gt;
        unreachable += gt_max.iter().filter(|&&m| m == 0.0).count();
        total_anchors += anchors.len();
    }
    Ok(format!("500 configs, {total_anchors} anchors, {total_gts} gts ({unreachable} overlap no anchor)"))
}

/// Noiseless random script whose runs survive smoothing and whose steps stay
/// inside the tracking gates.
fn trackable_script(seed: u64) -> ScenarioConfig {
    let mut rng = XorShift64Star::new(seed);
    let n_frames = 300;
    let mut tools = Vec::new();
    for class in ToolClass::ALL {
        let mut t = (rng.next_u64() % 40) as u32;
        while t + 10 < n_frames && rng.next_f64() < 0.7 {
            let end = (t + 2 + (rng.next_u64() % 60) as u32).min(n_frames - 1);
            let mut f = t;
            let (mut x, mut y) = (60.0 + 520.0 * rng.next_f64(), 60.0 + 360.0 * rng.next_f64());
            let mut waypoints = Vec::new();
            loop {
                waypoints.push([f as f64, x, y]);
                if f >= end {
                    break;
                }
                let next = (f + 1 + (rng.next_u64() % 12) as u32).min(end);
                let reach = 40.0 * (next - f) as f64 / std::f64::consts::SQRT_2;
                x = (x + reach * (2.0 * rng.next_f64() - 1.0)).clamp(60.0, 580.0);
                y = (y + reach * (2.0 * rng.next_f64() - 1.0)).clamp(60.0, 420.0);
                f = next;
            }
            tools.push(ToolScript {
                tool: class,
                start_frame: t,
                end_frame: end,
                size: [40.0 + 60.0 * rng.next_f64(), 40.0 + 60.0 * rng.next_f64()],
                waypoints,
            });
            t = end + 6 + (rng.next_u64() % 30) as u32;
        }
    }
    let config = format!(
        r#"{{"seed":{seed},"video_id":"clean{seed:03}","width":640,"height":480,"n_frames":{n_frames},
            "phases":[{{"name":"early","start_frame":0,"end_frame":149}},{{"name":"late","start_frame":150,"end_frame":299}}],
            "tools":[]}}"#
    );
    let mut cfg: ScenarioConfig = serde_json::from_str(&config).unwrap();
    cfg.tools = tools;
    cfg
}

fn compare_truth(report: &SkillReport, truth: &TruthRecord) -> Result<f64, String> {
    ensure(report.usage_seconds.seconds == truth.usage_seconds, || {
        format!("{}: usage {:?} vs {:?}", truth.video_id, report.usage_seconds.seconds, truth.usage_seconds)
    })?;
    ensure(report.switch_count == truth.switch_count, || {
        format!("{}: {} switches, script has {}", truth.video_id, report.switch_count, truth.switch_count)
    })?;
    let mut worst: f64 = 0.0;
    for (phase, lengths) in &truth.path_length_px {
        let m = report
            .motion_for(phase)
            .ok_or_else(|| format!("{}: no phase {phase}", truth.video_id))?;
        for class in ToolClass::ALL {
            worst = worst.max((m.per_class[&class].path_length_px - lengths[&class]).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("{}: path length off by {worst:e}", truth.video_id))?;
    Ok(worst)
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_scopemetrics")
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn noiseless_end_to_end() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut switches = 0;
    for seed in 1..=30 {
        let cfg = trackable_script(seed);
        let s = gen_scenario(&cfg).map_err(|e| e.to_string())?;
        let input = VideoInput {
            meta: s.meta.clone(),
            detections: s.detection_list(),
            phases: s.phases.clone(),
            goals: vec![],
        };
        let report = build_report(&input, &AnalysisConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max(compare_truth(&report, &s.truth)?);
        switches += s.truth.switch_count;
    }

    // 3-4-5 path through the command line: synth, then analyze.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = r#"{"seed":5,"video_id":"tri","width":100,"height":100,"n_frames":2,
        "tools":[{"tool":"grasper","start_frame":0,"end_frame":1,"size":[10,10],
                  "waypoints":[[0,20,20],[1,23,24]]}]}"#;
    std::fs::write(d.join("tri.json"), cfg).map_err(|e| e.to_string())?;
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    cli(&["synth", "--config", &p("tri.json"), "--out", &p("data")])?;
    cli(&["analyze", "--det", &p("data/det.jsonl"), "--meta", &p("data/meta.csv"), "--out", &p("out")])?;
    let report: SkillReport = serde_json::from_str(&std::fs::read_to_string(d.join("out/tri/report.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let truth: Vec<TruthRecord> = serde_json::from_str(&std::fs::read_to_string(d.join("data/truth.json")).unwrap())
        .map_err(|e| e.to_string())?;
    compare_truth(&report, &truth[0])?;
    let tri = report.motion_for("full").unwrap().per_class[&ToolClass::Grasper].path_length_px;
    ensure((tri - 5.0).abs() <= 1e-9, || format!("3-4-5 path measured {tri}"))?;
    Ok(format!("30 scripts ({switches} switches), max path error {worst:e}; 3-4-5 -> {tri}"))
}

const INSTANCE_COUNTS: [usize; 7] = [923, 350, 308, 400, 400, 485, 275];

fn manifest_fixture() -> Outcome {
    let mut instances = Vec::new();
    for (class, &n) in ToolClass::ALL.iter().zip(&INSTANCE_COUNTS) {
        instances.extend(std::iter::repeat_n(*class, n));
    }
    // 609 two-tool frames pair each of the first graspers with a non-grasper.
    let pairs = 609;
    let mut frames: Vec<Vec<ToolClass>> = (0..pairs).map(|k| vec![instances[k], instances[k + 923]]).collect();
    frames.extend(instances[pairs..923].iter().map(|&c| vec![c]));
    frames.extend(instances[923 + pairs..].iter().map(|&c| vec![c]));
    let mut text = String::new();
    for (i, tools) in frames.iter().enumerate() {
        let boxes: Vec<String> = tools
            .iter()
            .enumerate()
            .map(|(k, c)| format!(r#"{{"class":"{}","bbox":[{},40,{},200]}}"#, c.name(), 20 + 300 * k, 260 + 300 * k))
            .collect();
        writeln!(
            text,
            r#"{{"video_id":"v{:02}","frame_index":{},"width":640,"height":480,"boxes":[{}]}}"#,
            i / 250,
            i % 250,
            boxes.join(",")
        )
        .unwrap();
    }
    let (gts, _) = parse_ground_truth(text.as_bytes()).map_err(|e| e.to_string())?;
    let m = build_manifest(&gts);
    let counts: Vec<usize> = ToolClass::ALL.iter().map(|c| m.per_class[c]).collect();
    ensure(counts == INSTANCE_COUNTS, || format!("per class {counts:?}"))?;
    ensure(m.total_instances == 3141, || format!("total {}", m.total_instances))?;
    ensure(m.n_annotated_frames == 2532, || format!("frames {}", m.n_annotated_frames))?;
    Ok(format!("{counts:?}; total {}; frames {}", m.total_instances, m.n_annotated_frames))
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_videos.json");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    cli(&["synth", "--config", &fixture.to_string_lossy(), "--out", &p("data")])?;
    let mut runs = Vec::new();
    for run in 0..3 {
        let out = p(&format!("run{run}"));
        cli(&[
            "analyze", "--det", &p("data/det.jsonl"), "--meta", &p("data/meta.csv"), "--phases",
            &p("data/phases.csv"), "--out", &out,
        ])?;
        runs.push(read_tree(Path::new(&out)));
    }
    let files = runs[0].len();
    ensure(files == 2 * 12 + 1, || format!("{files} files written"))?;
    for (k, other) in runs.iter().enumerate().skip(1) {
        ensure(other == &runs[0], || format!("run {k} differs from run 0"))?;
    }
    let bytes: usize = runs[0].values().map(Vec::len).sum();
    Ok(format!("3 runs, {files} files, {bytes} bytes identical"))
}

fn throughput() -> Outcome {
    // 75 minutes at 1 fps; three tools cycling through long appearances.
    let n_frames = 4500u32;
    let mut tools = Vec::new();
    let lanes = [(160.0, 160.0), (420.0, 300.0), (320.0, 120.0)];
    for (lane, &(cx, cy)) in lanes.iter().enumerate() {
        let mut start = lane as u32 * 7;
        let mut k = lane;
        while start + 20 < n_frames {
            let end = (start + 150 + (k as u32 * 37) % 200).min(n_frames - 1);
            let waypoints = (start..=end)
                .step_by(10)
                .chain(std::iter::once(end))
                .map(|f| {
                    let a = f as f64 * 0.05;
                    [f as f64, cx + 60.0 * a.cos(), cy + 40.0 * a.sin()]
                })
                .collect::<Vec<_>>();
            let mut waypoints = waypoints;
            waypoints.dedup_by(|a, b| a[0] == b[0]);
            tools.push(ToolScript {
                tool: ToolClass::ALL[(k * 3 + lane) % 7],
                start_frame: start,
                end_frame: end,
                size: [80.0, 70.0],
                waypoints,
            });
            start = end + 4;
            k += 1;
        }
    }
    let cfg = ScenarioConfig {
        seed: 75,
        video_id: "long".into(),
        fps: 1.0,
        width: 640,
        height: 480,
        n_frames,
        phases: vec![],
        tools,
        noise: NoiseConfig {
            centroid_jitter_px: 2.0,
            drop_rate: 0.05,
            fp_rate_per_frame: 0.0,
            ..NoiseConfig::default()
        },
    };
    let s = gen_scenario(&cfg).map_err(|e| e.to_string())?;
    let dets = s.detection_list();
    let max_per_frame = s.detections.frames.iter().map(|f| f.boxes.len()).max().unwrap_or(0);
    ensure(max_per_frame <= 3, || format!("{max_per_frame} tools in one frame"))?;
    let input = VideoInput { meta: s.meta.clone(), detections: dets, phases: vec![], goals: vec![] };
    let start = Instant::now();
    let report = build_report(&input, &AnalysisConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within_time(elapsed, Duration::from_secs(1))?;
    Ok(format!(
        "{} frames, {} detections, {} tracks in {elapsed:?}",
        n_frames,
        input.detections.len(),
        report.tracks.len()
    ))
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 9] = [
        ("mAP aggregation fixture", map_fixture),
        ("GOALS totals fixture", goals_fixture),
        ("AP oracle equivalence", ap_oracle_equivalence),
        ("RPN loss value and gradient", loss_and_gradient),
        ("anchor labeling rules", anchor_rules),
        ("noiseless end-to-end", noiseless_end_to_end),
        ("manifest fixture", manifest_fixture),
        ("analyze determinism", determinism),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
