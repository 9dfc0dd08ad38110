use std::io::Write;

use super::*;
use crate::eval_metrics::{read_metrics_csv, Phase};
use crate::Error;

fn tiny(seed: u64) -> RunConfig {
    let sets: Vec<String> = [
        "data.train_frames=8",
        "data.val_frames=4",
        "data.stream_frames=5",
        "depth_train.epochs=1",
        "energy_train.epochs=1",
        "experiment.iteration_sweep=[1,2]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    resolve_config(Some(Scenario::Fog), Some(seed), None, &sets).unwrap()
}

#[test]
fn presets_validate_and_round_trip_through_toml() {
    for sc in [Scenario::Fog, Scenario::Illum, Scenario::Outdoor2indoor] {
        let c = RunConfig::preset(sc, 3);
        c.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        let back = resolve_config(None, None, Some(&p), &[]).unwrap();
        assert_eq!(back.to_toml(), c.to_toml());
    }
}

#[test]
fn precedence_is_preset_then_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    let mut f = std::fs::File::create(&p).unwrap();
    writeln!(f, "[adapt]\nlearning_rate = 0.5\ninner_iters = 4").unwrap();
    let c = resolve_config(Some(Scenario::Fog), Some(1), Some(&p), &["adapt.inner_iters=2".into()]).unwrap();
    assert_eq!(c.adapt.learning_rate, 0.5);
    assert_eq!(c.adapt.inner_iters, 2);
    assert_eq!(c.adapt.w_smooth, RunConfig::preset(Scenario::Fog, 1).adapt.w_smooth);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let e = resolve_config(None, None, None, &["adapt.nope=1".into()]).unwrap_err();
    assert!(matches!(&e, Error::Config { key, .. } if key.contains("nope")), "{e}");
    let e = resolve_config(None, None, None, &["adapt.learning_rate=-1".into()]).unwrap_err();
    assert!(matches!(e, Error::Config { .. }), "{e}");
    let e = resolve_config(None, None, None, &["no_equals".into()]).unwrap_err();
    assert!(matches!(e, Error::Config { .. }));
    let e = resolve_config(None, None, Some(std::path::Path::new("/nonexistent/c.toml")), &[]).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact { .. }));
}

#[test]
fn frame_seeds_differ_across_splits_and_indices() {
    let mut seen = std::collections::HashSet::new();
    for tag in 1..4 {
        for i in 0..100 {
            assert!(seen.insert(frame_seed(9, tag, i)));
        }
    }
}

#[test]
fn stream_keeps_ground_truth_and_applies_the_shift() {
    let c = tiny(0);
    let src = synth_source(&c).unwrap();
    let stream = synth_stream(&c).unwrap();
    assert_eq!(stream.len(), 5);
    assert!(stream.iter().all(|s| s.gt.is_some() && s.frame_id.starts_with("tgt-")));
    assert!(src.train.iter().all(|s| s.frame_id.starts_with("src-")));
    assert_eq!(synth_stream(&c).unwrap()[0].image, stream[0].image);
}

#[test]
fn disk_pipeline_matches_in_memory_pipeline() {
    let c = tiny(4);
    let mem = run_experiment(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rd = RunDir::create(dir.path(), c.clone()).unwrap();
    rd.all().unwrap();
    let mut disk = read_metrics_csv(&rd.path(crate::eval_metrics::METRICS_FILE)).unwrap();
    let mut want = mem.records();
    let key = |r: &crate::eval_metrics::MetricRecord| (r.run_id.clone(), r.frame_id.clone(), r.phase == Phase::Post);
    disk.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(disk.len(), want.len());
    for (a, b) in disk.iter().zip(&want) {
        assert_eq!(key(a), key(b));
        assert!((a.mae_m - b.mae_m).abs() < 1e-5, "{a:?} vs {b:?}");
    }
    let methods: Vec<_> = mem.runs.iter().map(|r| r.info.method.as_str()).collect();
    assert_eq!(methods, [METHOD_SOURCE, METHOD_ETA, METHOD_BASELINE, METHOD_GLOBAL, "eta-iters2"]);
    let base = mem.run(METHOD_BASELINE).unwrap();
    assert!(base.snapshots.is_empty());
    assert!(!mem.run(METHOD_ETA).unwrap().snapshots.is_empty());
}
