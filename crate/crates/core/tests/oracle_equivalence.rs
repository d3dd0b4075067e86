use scopemetrics::eval::{evaluate_spatial, match_spatial, presence_ap, to_presence};
use scopemetrics::synth::{gen_scenario, oracle_spatial_ap, ConfidenceRange, random_eval_case, NoiseConfig, ScenarioConfig, ToolScript};
use scopemetrics::ToolClass;

#[test]
fn spatial_ap_matches_oracle() {
    for seed in 1..=300u64 {
        let (dets, gts) = random_eval_case(seed, 50);
        let expected = oracle_spatial_ap(&dets, &gts, 0.5);
        match evaluate_spatial(&dets, &gts, 0.5) {
            Ok(result) => {
                for class in ToolClass::ALL {
                    match (result.per_class[&class], expected[&class]) {
                        (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "seed {seed} {class}: {a} vs {b}"),
                        (a, b) => assert_eq!(a, b, "seed {seed} {class}"),
                    }
                }
            }
            Err(_) => assert!(expected.values().all(Option::is_none), "seed {seed}"),
        }
    }
}

#[test]
fn matching_is_one_to_one() {
    for seed in 1..=50u64 {
        let (dets, gts) = random_eval_case(seed, 30);
        let outcomes = match_spatial(&dets, &gts, 0.3).unwrap();
        let mut used: Vec<usize> = outcomes.iter().filter_map(|o| o.matched_gt).collect();
        let n = used.len();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), n);
        for o in &outcomes {
            assert_eq!(o.is_true_positive, o.matched_gt.is_some());
        }
    }
}

fn scenario(noise: NoiseConfig, seed: u64) -> ScenarioConfig {
    let script = |tool, s, e, x0: f64, x1: f64| ToolScript {
        tool,
        start_frame: s,
        end_frame: e,
        size: [60.0, 40.0],
        waypoints: vec![[s as f64, x0, 100.0], [e as f64, x1, 140.0]],
    };
    ScenarioConfig {
        seed,
        video_id: "p".into(),
        fps: 1.0,
        width: 640,
        height: 480,
        n_frames: 120,
        phases: vec![],
        tools: vec![
            script(ToolClass::Grasper, 0, 100, 100.0, 300.0),
            script(ToolClass::Hook, 20, 60, 400.0, 500.0),
            script(ToolClass::Clipper, 70, 110, 200.0, 250.0),
        ],
        noise,
    }
}

#[test]
fn noiseless_presence_is_perfect() {
    let s = gen_scenario(&scenario(NoiseConfig::none(), 1)).unwrap();
    let scores = to_presence(&s.detection_list(), &s.meta).unwrap();
    let result = presence_ap(&scores, &s.presence_labels()).unwrap();
    assert_eq!(result.map, 1.0);
    assert_eq!(result.per_class[&ToolClass::Bipolar], None);
}

#[test]
fn confident_false_positives_lower_presence_ap() {
    let noise = NoiseConfig {
        fp_rate_per_frame: 0.5,
        fp_confidence: ConfidenceRange(0.5, 1.0),
        ..NoiseConfig::default()
    };
    let s = gen_scenario(&scenario(noise, 7)).unwrap();
    let scores = to_presence(&s.detection_list(), &s.meta).unwrap();
    let result = presence_ap(&scores, &s.presence_labels()).unwrap();
    assert!(result.map < 1.0);
    assert!(result.map > 0.0);

    // Below every true positive, false positives cannot reorder frames.
    let noise = NoiseConfig {
        fp_rate_per_frame: 0.5,
        ..NoiseConfig::default()
    };
    let s = gen_scenario(&scenario(noise, 7)).unwrap();
    let scores = to_presence(&s.detection_list(), &s.meta).unwrap();
    assert_eq!(presence_ap(&scores, &s.presence_labels()).unwrap().map, 1.0);
}
