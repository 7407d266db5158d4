use std::fs;

use crossview::association::NO_OVERLAP_WARNING;
use crossview::config::PipelineConfig;
use crossview::pipeline::{self, Artifacts};
use crossview::trainer::{NO_LABELS_WARNING, NO_PAIRS_WARNING};

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.scene.n_frames = 50;
    c.scene.n_objects = 12;
    c.train.schedule.epochs_phase1 = 3;
    c.train.schedule.epochs_phase2 = 4;
    c.model.pretrain_epochs = 2;
    c.separability.style_scales = vec![0.0, 1.0];
    c.separability.draws = 2;
    c
}

#[test]
fn rerun_skips_current_stages() {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    let config = small_config();
    let first = pipeline::run(&config, &art, false).unwrap();

    let params = art.train("cam0").join("params.json");
    let modified = |p: &std::path::Path| fs::metadata(p).unwrap().modified().unwrap();
    let (gt_time, params_time) = (modified(&art.gt()), modified(&params));

    let again = pipeline::run(&config, &art, false).unwrap();
    assert_eq!(again, first);
    assert_eq!(modified(&art.gt()), gt_time);
    assert_eq!(modified(&params), params_time);

    // A training change reruns training and later stages only.
    let mut changed = config.clone();
    changed.train.lr = 0.02;
    pipeline::run(&changed, &art, false).unwrap();
    assert_eq!(modified(&art.gt()), gt_time);
    assert_ne!(modified(&params), params_time);

    pipeline::run(&changed, &art, true).unwrap();
    assert_ne!(modified(&art.gt()), gt_time);
}

#[test]
fn loss_curve_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    let config = small_config();
    pipeline::run(&config, &art, false).unwrap();
    for cam in config.student_cameras() {
        let csv = fs::read_to_string(art.train(&cam).join("losses.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 3 + 4);
        assert!(rows[..3].iter().all(|r| r.split(',').nth(1) == Some("1")));
        assert!(rows[3..].iter().all(|r| r.split(',').nth(1) == Some("2")));
        let only = fs::read_to_string(art.train(&cam).join("losses_phase2_only.csv")).unwrap();
        assert_eq!(only.lines().count(), 1 + 4);
    }
}

#[test]
fn camera_without_shared_view_warns_and_skips_training() {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    let mut config = small_config();
    config.scene.rig.overlap = vec![1.0, 1.0, 0.0];
    config.students = vec!["cam2".into()];
    config.ablations = false;
    let report = pipeline::run(&config, &art, false).unwrap();
    let cam = &report.cameras[0];
    assert_eq!(cam.camera, "cam2");
    assert_eq!(cam.n_train_pairs, 0);
    assert!(cam.warnings.iter().any(|w| w == NO_OVERLAP_WARNING), "{:?}", cam.warnings);
    assert!(cam.warnings.iter().any(|w| w == NO_PAIRS_WARNING), "{:?}", cam.warnings);
    // The camera faces away from the world and sees nothing at all.
    assert!(cam.warnings.iter().any(|w| w == NO_LABELS_WARNING), "{:?}", cam.warnings);
    assert_eq!(cam.training.initial_consistency, None);
}

#[test]
fn report_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    pipeline::run(&small_config(), &art, false).unwrap();
    let snapshot = |art: &Artifacts| {
        let mut files: Vec<_> = fs::read_dir(art.report_dir())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files.into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect::<Vec<_>>()
    };
    let before = snapshot(&art);
    assert!(before.len() >= 6);
    let text = pipeline::report_stage(&art).unwrap();
    assert!(text.contains("pruning factor"));
    assert_eq!(snapshot(&art), before);
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.t_cls = 1.5;
    let err = pipeline::run(&config, &Artifacts::new(dir.path()), false).unwrap_err();
    assert!(err.is_config());
    assert!(!dir.path().join("config.json").exists());
}

#[test]
fn missing_inputs_are_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    let err = pipeline::associate_stage(&small_config(), &art).unwrap_err();
    assert!(!err.is_config());
}
