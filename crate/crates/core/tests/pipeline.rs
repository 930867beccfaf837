use anomalycd::baselines::Baseline;
use anomalycd::cache::{cache_file_name, write_cache};
use anomalycd::embed::{EmbedKey, Embedder, ReferenceEmbedder};
use anomalycd::maps::stitch;
use anomalycd::pipeline::{run_sweep, write_detection, EmbedderKind, Pipeline, RunConfig, SweepParam};
use anomalycd::scene::{extract_tile, load_scene, plan_tiles, TimeSeriesScene};
use anomalycd::synth::{generate, write_synth, SynthConfig};
use anomalycd::Error;
use proptest::prelude::*;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        size: 256,
        movers: 4,
        ..SynthConfig::with_seed(seed)
    }
}

fn config(tile: usize) -> RunConfig {
    RunConfig {
        tile_size: tile,
        workers: Some(2),
        ..RunConfig::default()
    }
}

#[test]
fn quiet_scene_flags_only_the_anomaly() {
    let cfg = SynthConfig {
        movers: 0,
        noise_sigma: 0.0,
        brightness_jitter: 0.0,
        ..small(4)
    };
    let scene = generate::<f64>(&cfg).unwrap().scene;
    let gt = scene.gt_mask().unwrap();
    let det = Pipeline::<f64>::new(config(256)).unwrap().detect(&scene).unwrap();
    let b = &det.stage1.binary;
    assert!(b.count() > 0);
    for y in 0..b.height() {
        for x in 0..b.width() {
            if b.get(y, x) {
                assert!(gt.get(y, x), "stage 1 flagged ({x}, {y}) outside the anomaly");
            }
        }
    }
    assert!(det.stage2.anomaly_map.count() > 0);
}

#[test]
fn default_scene_overlaps_ground_truth() {
    let scene = generate::<f32>(&SynthConfig::with_seed(1)).unwrap().scene;
    let gt = scene.gt_mask().unwrap();
    let det = Pipeline::<f32>::new(config(512)).unwrap().detect(&scene).unwrap();
    let map = &det.stage2.anomaly_map;
    let tp = (0..gt.height())
        .flat_map(|y| (0..gt.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| gt.get(y, x) && map.get(y, x))
        .count();
    assert!(tp > 0);
}

#[test]
fn anomaly_map_within_candidates_within_stage1_support() {
    let scene = generate::<f32>(&small(2)).unwrap().scene;
    let det = Pipeline::<f32>::new(config(128)).unwrap().detect(&scene).unwrap();
    let (h, w) = (scene.height(), scene.width());
    let mut in_candidates = vec![false; h * w];
    for c in &det.stage1.selected {
        for (y, x) in c.scene_pixels() {
            in_candidates[y * w + x] = true;
        }
    }
    for y in 0..h {
        for x in 0..w {
            if det.stage2.anomaly_map.get(y, x) {
                assert!(in_candidates[y * w + x]);
            }
            if in_candidates[y * w + x] {
                assert!(det.stage1.fused.get(y, x) > 0.0);
            }
        }
    }
    for rec in &det.stage2.records {
        assert!(rec.s_a <= rec.distances[0]);
    }
}

#[test]
fn scene_directory_round_trip_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(5);
    write_synth(&cfg, dir.path()).unwrap();
    let loaded = load_scene::<f32>(dir.path()).unwrap();
    let memory = generate::<f32>(&cfg).unwrap().scene;
    assert_eq!(loaded.timestamps(), memory.timestamps());
    assert_eq!(loaded.gt_mask(), memory.gt_mask());
    for (a, b) in loaded.steps().iter().zip(memory.steps()) {
        let worst = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "pixel drift {worst}");
    }
}

fn fill_cache(scene: &TimeSeriesScene<f32>, tile: usize, dir: &std::path::Path) {
    let emb = ReferenceEmbedder::default();
    for spec in plan_tiles(scene.height(), scene.width(), tile).unwrap() {
        for (ts, step) in scene.timestamps().iter().zip(scene.steps()) {
            let key = EmbedKey { timestamp: ts, tile: spec };
            let map: anomalycd::EmbeddingMap<f32> = emb.embed(&extract_tile(step, &spec), &key).unwrap();
            write_cache(&map, &dir.join(cache_file_name(ts, &spec))).unwrap();
        }
    }
}

#[test]
fn cache_embedder_reproduces_reference_run() {
    let scene = generate::<f32>(&small(6)).unwrap().scene;
    let dir = tempfile::tempdir().unwrap();
    fill_cache(&scene, 128, dir.path());
    let reference = Pipeline::<f32>::new(config(128)).unwrap().detect(&scene).unwrap();
    let cached = Pipeline::<f32>::new(RunConfig {
        embedder: EmbedderKind::Cache,
        cache_dir: Some(dir.path().to_path_buf()),
        ..config(128)
    })
    .unwrap()
    .detect(&scene)
    .unwrap();
    assert_eq!(reference.stage2.anomaly_map, cached.stage2.anomaly_map);
    assert_eq!(reference.stage2.records, cached.stage2.records);
}

#[test]
fn missing_cache_entry_names_the_file() {
    let scene = generate::<f32>(&small(6)).unwrap().scene;
    let dir = tempfile::tempdir().unwrap();
    let err = Pipeline::<f32>::new(RunConfig {
        embedder: EmbedderKind::Cache,
        cache_dir: Some(dir.path().to_path_buf()),
        ..config(128)
    })
    .unwrap()
    .detect(&scene)
    .unwrap_err();
    assert!(matches!(err, Error::MissingEmbedding { .. }), "{err}");
    assert!(err.to_string().contains(".aecd"));
}

#[test]
fn two_step_scene_warns_and_stage2_uses_t1_only() {
    let cfg = SynthConfig { steps: 2, ..small(7) };
    let scene = generate::<f32>(&cfg).unwrap().scene;
    let det = Pipeline::<f32>::new(config(256)).unwrap().detect(&scene).unwrap();
    assert_eq!(det.warnings.len(), 1);
    assert_eq!(det.stage2.history_steps, vec![0]);
    for rec in &det.stage2.records {
        assert_eq!(rec.distances.len(), 1);
        assert_eq!(rec.s_a, rec.distances[0]);
    }
}

#[test]
fn ablation_reports_per_k_and_rejects_too_many() {
    let scene = generate::<f32>(&small(8)).unwrap().scene;
    let p = Pipeline::<f32>::new(config(256)).unwrap();
    let reports = p.ablate_timesteps(std::slice::from_ref(&scene), 3).unwrap();
    assert_eq!(reports.len(), 4);
    let det = p.detect(&scene).unwrap();
    let standard = p.score_event(&scene, &det.stage2.anomaly_map).unwrap();
    assert_eq!(reports[0].events[0], standard);
    assert_eq!(reports[2].config["steps_removed"], 2);
    let err = p.ablate_timesteps(&[scene], 4).unwrap_err();
    assert!(matches!(err, Error::InsufficientSteps { found: 4, required: 5 }));
}

#[test]
fn removing_the_matching_step_restores_the_movers_score() {
    // the only mover has period 2, so X matches T_2 exactly before noise
    let synth = (0..)
        .map(|seed| {
            let cfg = SynthConfig {
                movers: 1,
                noise_sigma: 0.0,
                brightness_jitter: 0.0,
                steps: 3,
                ..small(seed)
            };
            generate::<f64>(&cfg).unwrap()
        })
        .find(|s| s.truth.movers[0].period == 2)
        .unwrap();
    let mover = &synth.truth.movers[0];
    let p = Pipeline::<f64>::new(RunConfig {
        keep_fraction: 1.0,
        ..config(256)
    })
    .unwrap();
    let mut s1 = p.stage1(&synth.scene).unwrap();
    let full = p.stage2(&synth.scene, &mut s1, 0).unwrap();
    let reduced = p.stage2(&synth.scene, &mut s1, 1).unwrap();
    let at_mover = s1
        .selected
        .iter()
        .position(|c| {
            let r = mover.footprint_at(2);
            c.scene_pixels().any(|(y, x)| r.contains(y, x)) && c.score > 0.0
        })
        .expect("mover candidate");
    assert!(full.records[at_mover].s_a < 1e-9);
    assert!(full.records[at_mover].distances[0] > 0.01);
    assert_eq!(reduced.records[at_mover].s_a, reduced.records[at_mover].distances[0]);
    assert!(reduced.records[at_mover].s_a >= full.records[at_mover].s_a);
}

#[test]
fn outputs_are_written() {
    let scene = generate::<f32>(&small(10)).unwrap().scene;
    let p = Pipeline::<f32>::new(config(256)).unwrap();
    let det = p.detect(&scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_detection(&det, p.config(), dir.path()).unwrap();
    for f in [
        "stage1_change_map.png",
        "anomaly_map.png",
        "candidates.jsonl",
        "scores.jsonl",
        "config.json",
        "timing.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let lines = std::fs::read_to_string(dir.path().join("candidates.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), det.stage1.selected.len());
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["tile", "instance", "direction", "score"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn baselines_cover_the_scene() {
    let scene = generate::<f32>(&small(11)).unwrap().scene;
    let p = Pipeline::<f32>::new(config(128)).unwrap();
    for b in Baseline::ALL {
        let m = p.baseline(&scene, b).unwrap();
        assert_eq!((m.height(), m.width()), (256, 256), "{b}");
    }
}

#[test]
fn sweep_over_tile_size_times_each_value() {
    let scenes = vec![generate::<f32>(&small(12)).unwrap().scene];
    let values: Vec<String> = vec!["128".into(), "256".into()];
    let points = run_sweep(SweepParam::TileSize, &values, &scenes, &config(256)).unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0].report.config["tile_size"], 128);
    assert!(points.iter().all(|p| p.seconds >= 0.0));
    let bad = run_sweep(SweepParam::Quantile, &["1.5".into()], &scenes, &config(256)).unwrap_err();
    assert!(bad.to_string().contains("quantile"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fused_map_ignores_tile_order(seed in 0u64..1000, rot in 0usize..4) {
        let scene = generate::<f32>(&SynthConfig { size: 192, movers: 2, mover_size: (10, 20), anomaly_size: (20, 30), ..SynthConfig::with_seed(seed) }).unwrap().scene;
        let p = Pipeline::<f32>::new(config(64)).unwrap();
        let s1 = p.stage1(&scene).unwrap();
        let tiles = plan_tiles(192, 192, 64).unwrap();
        let n = s1.c_t.width() / 64;
        let mut pieces: Vec<_> = tiles
            .iter()
            .map(|t| {
                let data: Vec<f32> = (0..64)
                    .flat_map(|y| (0..64).map(move |x| (y, x)))
                    .map(|(y, x)| s1.fused.get(t.y0 + y, t.x0 + x))
                    .collect();
                (*t, anomalycd::ChangeDensityMap::from_vec(64, 64, data, anomalycd::maps::Provenance::Stage1).unwrap())
            })
            .collect();
        prop_assert_eq!(n, 3);
        pieces.rotate_left(rot);
        pieces.reverse();
        let back = stitch(&pieces).unwrap();
        prop_assert_eq!(back.data(), s1.fused.data());
    }
}
