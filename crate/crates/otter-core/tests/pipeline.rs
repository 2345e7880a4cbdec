//! End-to-end pipeline smoke: synth -> train -> eval -> analyze through the
//! command layer, checking the emitted artifacts semantically.

use std::collections::HashMap;
use std::fs;
use std::time::Instant;

use otter_core::analysis::FrameAnalysisRecord;
use otter_core::cli;
use otter_core::detector::train::EPOCH_CSV_HEADER;
use otter_core::eval::{parse_predictions, MetricsTable};

fn flags(pairs: &[(&str, &str)]) -> HashMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn full_pipeline_on_tiny_synthetic_data() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let synth_cfg = root.path().join("synth.cfg");
    fs::write(
        &synth_cfg,
        "n_videos = 4\nframes = 12\nsize = 64\nclasses = 2\nocclusion_episodes = 1\n",
    )
    .unwrap();
    cli::cmd_synth(&flags(&[
        ("config", synth_cfg.to_str().unwrap()),
        ("out", data.to_str().unwrap()),
        ("seed", "3"),
    ]))
    .unwrap();

    // 1-epoch smoke run at width 8, image 64 must finish quickly
    let model_cfg = root.path().join("model.cfg");
    fs::write(&model_cfg, "width = 8\nimage_size = 64\n").unwrap();
    let train_cfg = root.path().join("train.cfg");
    fs::write(
        &train_cfg,
        "epochs = 1\nbatch_size = 4\nwindow_stride = 2\neval_stride = 6\noptimizer = adamw\nlr = 0.003\n",
    )
    .unwrap();
    let train_out = root.path().join("train");
    let started = Instant::now();
    cli::cmd_train(&flags(&[
        ("data", data.to_str().unwrap()),
        ("out", train_out.to_str().unwrap()),
        ("variant", "baseline"),
        ("model-config", model_cfg.to_str().unwrap()),
        ("config", train_cfg.to_str().unwrap()),
        ("seed", "3"),
    ]))
    .unwrap();
    assert!(
        started.elapsed().as_secs() < 60,
        "1-epoch smoke run took {:?}",
        started.elapsed()
    );
    let csv = fs::read_to_string(train_out.join("epochs.csv")).unwrap();
    assert!(csv.starts_with(EPOCH_CSV_HEADER));
    assert!(train_out.join("best.ckpt").is_file());
    assert!(train_out.join("last.ckpt").is_file());
    assert!(train_out.join("split.txt").is_file());

    // warm-start the temporal variant from the baseline checkpoint
    let temporal_out = root.path().join("temporal");
    cli::cmd_train(&flags(&[
        ("data", data.to_str().unwrap()),
        ("out", temporal_out.to_str().unwrap()),
        ("variant", "temporal"),
        ("model-config", model_cfg.to_str().unwrap()),
        ("config", train_cfg.to_str().unwrap()),
        ("init", train_out.join("best.ckpt").to_str().unwrap()),
        ("seed", "3"),
    ]))
    .unwrap();

    // evaluate on the recorded split
    let eval_out = root.path().join("eval");
    cli::cmd_eval(&flags(&[
        (
            "checkpoint",
            temporal_out.join("best.ckpt").to_str().unwrap(),
        ),
        ("data", data.to_str().unwrap()),
        ("split", "test"),
        (
            "split-file",
            temporal_out.join("split.txt").to_str().unwrap(),
        ),
        ("out", eval_out.to_str().unwrap()),
    ]))
    .unwrap();
    let table: MetricsTable =
        serde_json::from_str(&fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(table.rows[0].class, "all");
    let csv = fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("Class,Instances,P,R,mAP50,mAP50-95\n"));
    let preds = fs::read_to_string(eval_out.join("predictions.txt")).unwrap();
    parse_predictions(&preds, "predictions.txt").unwrap();

    // analyze an inclusive range: 3 records, JSON round-trips
    let analyze_out = root.path().join("analysis");
    cli::cmd_analyze(&flags(&[
        (
            "checkpoint",
            temporal_out.join("best.ckpt").to_str().unwrap(),
        ),
        ("data", data.to_str().unwrap()),
        ("video", "video_002"),
        ("frames", "5-7"),
        ("out", analyze_out.to_str().unwrap()),
    ]))
    .unwrap();
    let records: Vec<FrameAnalysisRecord> =
        serde_json::from_str(&fs::read_to_string(analyze_out.join("analysis.json")).unwrap())
            .unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0].frame_index, 5);
    assert!(analyze_out.join("frame_00005.ppm").is_file());
    assert!(analyze_out.join("confidence.csv").is_file());

    // out-of-range analyze fails with a data error
    let err = cli::cmd_analyze(&flags(&[
        (
            "checkpoint",
            temporal_out.join("best.ckpt").to_str().unwrap(),
        ),
        ("data", data.to_str().unwrap()),
        ("video", "video_002"),
        ("frames", "5-500"),
        ("out", analyze_out.to_str().unwrap()),
    ]))
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let synth_cfg = root.path().join("synth.cfg");
    fs::write(
        &synth_cfg,
        "n_videos = 3\nframes = 6\nsize = 64\nclasses = 1\n",
    )
    .unwrap();
    cli::cmd_synth(&flags(&[
        ("config", synth_cfg.to_str().unwrap()),
        ("out", data.to_str().unwrap()),
        ("seed", "2"),
    ]))
    .unwrap();

    // checkpoint built for two classes
    use otter_core::detector::model::build_model;
    use otter_core::detector::{ModelConfig, Variant};
    let cfg = ModelConfig::new(Variant::Baseline, 4, 2, 64);
    let model = build_model::<f32>(&cfg, &mut otter_core::rng::Rng::seed_from(1)).unwrap();
    let ckpt = root.path().join("two_class.ckpt");
    otter_core::detector::checkpoint::save_checkpoint(&ckpt, &model).unwrap();

    let err = cli::cmd_eval(&flags(&[
        ("checkpoint", ckpt.to_str().unwrap()),
        ("data", data.to_str().unwrap()),
        ("split", "test"),
        ("out", root.path().join("eval").to_str().unwrap()),
    ]))
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("classes"), "{err}");
}
