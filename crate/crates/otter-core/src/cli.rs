//! Command-line entry points: `synth | train | eval | analyze`.
//!
//! Every command validates its inputs before touching the output directory.
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{analyze_frames, confidence_csv, parse_frame_range, render_annotated};
use crate::config::KvMap;
use crate::data::ingest::{ingest, read_classes, standardize_frames, STANDARD_FRAMES};
use crate::data::synth::{class_names, synth_moving_blob, write_dataset, MotionKind, SynthConfig};
use crate::data::window::materialize_window;
use crate::data::{split_videos, DatasetSplit, VideoRecord};
use crate::detector::checkpoint::{load_checkpoint, model_from_checkpoint};
use crate::detector::model::build_model;
use crate::detector::train::{evaluate_model, fit};
use crate::detector::{ModelConfig, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{format_prediction_line, MetricsTable};
use crate::imageio::write_ppm;
use crate::rng::Rng;

const USAGE: &str = "\
usage: otter <command> [flags]

commands:
  synth    --out DIR [--config FILE] [--seed N]
           generate a synthetic moving-blob video dataset
  train    --data DIR --out DIR [--variant baseline|temporal|temporal_cbam]
           [--model-config FILE] [--config FILE] [--init CKPT] [--seed N]
           train a detector and write best/last checkpoints + epoch CSV
  eval     --checkpoint FILE --data DIR --split val|test --out DIR
           [--split-file FILE] [--seed N]
           evaluate a checkpoint and emit per-class metric tables
  analyze  --checkpoint FILE --data DIR --video ID --frames A-B --out DIR
           per-frame detections with confidence series and annotated frames

flags take a value; config files use `key = value` lines.";

/// Parse argv into (subcommand, flag map).
fn parse_args(argv: &[String]) -> Result<(String, HashMap<String, String>)> {
    if argv.is_empty() {
        return Err(Error::Usage("missing command\n\n".to_string() + USAGE));
    }
    if argv[0] == "--help" || argv[0] == "-h" || argv[0] == "help" {
        println!("{USAGE}");
        return Ok(("help".into(), HashMap::new()));
    }
    let cmd = argv[0].clone();
    let mut flags = HashMap::new();
    let mut i = 1;
    while i < argv.len() {
        let arg = &argv[i];
        let Some(name) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument '{arg}'")));
        };
        let value = argv
            .get(i + 1)
            .ok_or_else(|| Error::Usage(format!("flag --{name} needs a value")))?;
        if flags.insert(name.to_string(), value.clone()).is_some() {
            return Err(Error::Usage(format!("flag --{name} given twice")));
        }
        i += 2;
    }
    Ok((cmd, flags))
}

fn require<'a>(flags: &'a HashMap<String, String>, name: &str) -> Result<&'a str> {
    flags
        .get(name)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Usage(format!("missing required flag --{name}")))
}

fn parse_seed(flags: &HashMap<String, String>) -> Result<u64> {
    match flags.get("seed") {
        None => Ok(0),
        Some(s) => s
            .parse()
            .map_err(|_| Error::Usage(format!("bad --seed value '{s}'"))),
    }
}

fn load_kv(path: Option<&String>) -> Result<KvMap> {
    match path {
        None => Ok(KvMap::new("defaults")),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {p}: {e}")))?;
            KvMap::parse(&text, p)
        }
    }
}

/// Top-level dispatch; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    match dispatch(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(argv: &[String]) -> Result<()> {
    let (cmd, flags) = parse_args(argv)?;
    match cmd.as_str() {
        "help" => Ok(()),
        "synth" => cmd_synth(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "analyze" => cmd_analyze(&flags),
        other => Err(Error::Usage(format!(
            "unknown command '{other}'\n\n{USAGE}"
        ))),
    }
}

pub fn cmd_synth(flags: &HashMap<String, String>) -> Result<()> {
    let out = PathBuf::from(require(flags, "out")?);
    let seed = parse_seed(flags)?;
    let kv = load_kv(flags.get("config"))?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_videos: kv.field("n_videos", defaults.n_videos)?,
        frames: kv.field("frames", defaults.frames)?,
        size: kv.field("size", defaults.size)?,
        classes: kv.field("classes", defaults.classes)?,
        occlusion_episodes: kv.field("occlusion_episodes", defaults.occlusion_episodes)?,
        motion: MotionKind::parse(kv.get("motion").unwrap_or("sudden"))?,
    };
    cfg.validate()?;
    if cfg.frames < 3 {
        eprintln!(
            "warning: {} frames per video is shorter than the default temporal window (3)",
            cfg.frames
        );
    }
    let videos = synth_moving_blob(&cfg, seed)?;
    write_dataset(&videos, &class_names(cfg.classes), &out)?;
    let total_frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    println!(
        "wrote {} videos, {} frames total to {}",
        videos.len(),
        total_frames,
        out.display()
    );
    Ok(())
}

fn load_videos(data_dir: &str) -> Result<(Vec<VideoRecord>, Vec<String>)> {
    let root = Path::new(data_dir);
    let classes = read_classes(root)?;
    let videos: Vec<VideoRecord> = ingest(root)?
        .into_iter()
        .map(|v| standardize_frames(v, STANDARD_FRAMES))
        .collect();
    Ok((videos, classes))
}

fn split_from_flags(
    flags: &HashMap<String, String>,
    videos: &[VideoRecord],
    cfg: &TrainConfig,
) -> Result<DatasetSplit> {
    if let Some(path) = flags.get("split-file") {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read split file {path}: {e}")))?;
        let kv = KvMap::parse(&text, path)?;
        let parse_list = |key: &str| -> Result<Vec<String>> {
            Ok(kv
                .require(key)?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect())
        };
        return Ok(DatasetSplit {
            train: parse_list("train")?,
            val: parse_list("val")?,
            test: parse_list("test")?,
            seed: kv.field("seed", 0)?,
        });
    }
    let ids: Vec<String> = videos.iter().map(|v| v.id.clone()).collect();
    split_videos(&ids, cfg.split, cfg.split_seed)
}

/// Pixel (w, h) of every training-split label at the model input size.
pub fn training_box_sizes(
    videos: &[VideoRecord],
    ids: &[String],
    image_size: usize,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for v in videos.iter().filter(|v| ids.contains(&v.id)) {
        for frame in &v.labels {
            for b in frame {
                out.push((b.w * image_size as f64, b.h * image_size as f64));
            }
        }
    }
    out
}

fn split_to_kv(split: &DatasetSplit) -> KvMap {
    let mut kv = KvMap::new("split");
    kv.set("train", split.train.join(","));
    kv.set("val", split.val.join(","));
    kv.set("test", split.test.join(","));
    kv.set("seed", split.seed);
    kv
}

pub fn cmd_train(flags: &HashMap<String, String>) -> Result<()> {
    let data_dir = require(flags, "data")?;
    let out = PathBuf::from(require(flags, "out")?);
    let seed = parse_seed(flags)?;
    if let Some(v) = flags.get("variant") {
        Variant::parse(v)?;
    }

    let (videos, classes) = load_videos(data_dir)?;

    // model configuration: file keys, then flag overrides, then defaults
    let mut model_kv = load_kv(flags.get("model-config"))?;
    if let Some(v) = flags.get("variant") {
        model_kv.set("variant", v);
    } else if model_kv.get("variant").is_none() {
        model_kv.set("variant", "baseline");
    }
    if model_kv.get("width").is_none() {
        model_kv.set("width", 16);
    }
    if model_kv.get("image_size").is_none() {
        model_kv.set("image_size", 640);
    }
    if model_kv.get("num_classes").is_none() {
        model_kv.set("num_classes", classes.len());
    }
    let mut model_cfg = ModelConfig::from_kv(&model_kv)?;
    if model_cfg.num_classes != classes.len() {
        return Err(Error::Data(format!(
            "model expects {} classes but {} lists {}",
            model_cfg.num_classes,
            Path::new(data_dir).join("classes.txt").display(),
            classes.len()
        )));
    }

    let train_kv = load_kv(flags.get("config"))?;
    let mut train_cfg = TrainConfig::from_kv(&train_kv, model_cfg.variant)?;
    if flags.contains_key("seed") {
        train_cfg.seed = seed;
        train_cfg.augment.seed = seed;
    }
    if let Some(init) = flags.get("init") {
        train_cfg.init_weights = Some(init.clone());
    }
    train_cfg.validate()?;

    let split = split_from_flags(flags, &videos, &train_cfg)?;
    if train_cfg.kmeans_anchors {
        let sizes = training_box_sizes(&videos, &split.train, model_cfg.image_size);
        model_cfg.anchors = crate::detector::kmeans_anchors(&sizes, model_cfg.anchors, 25);
    }
    let mut model = build_model::<f32>(&model_cfg, &mut Rng::seed_from(train_cfg.seed))?;

    let result = fit(&mut model, &train_cfg, &videos, &split, &out)?;
    fs::write(out.join("split.txt"), split_to_kv(&split).to_text())?;
    if train_cfg.init_weights.is_some() {
        println!(
            "transferred {} tensors from init checkpoint",
            result.transferred
        );
    }
    println!(
        "trained {} for {} epochs ({} steps); best val mAP50-95 {:.3} at epoch {}",
        model_cfg.variant.name(),
        result.epochs.len(),
        result.steps,
        result.best_map50_95,
        result.best_epoch
    );
    println!(
        "checkpoints: {} and {}",
        result.best_path.display(),
        result.last_path.display()
    );
    Ok(())
}

pub fn cmd_eval(flags: &HashMap<String, String>) -> Result<()> {
    let ckpt_path = require(flags, "checkpoint")?;
    let data_dir = require(flags, "data")?;
    let split_name = require(flags, "split")?;
    if split_name != "val" && split_name != "test" {
        return Err(Error::Usage(format!(
            "--split must be val or test, got '{split_name}'"
        )));
    }
    let out = PathBuf::from(require(flags, "out")?);

    let ckpt = load_checkpoint(Path::new(ckpt_path))?;
    let model = model_from_checkpoint(&ckpt)?;
    let (videos, classes) = load_videos(data_dir)?;
    if model.config.num_classes != classes.len() {
        return Err(Error::Data(format!(
            "checkpoint was trained for {} classes but the dataset lists {}",
            model.config.num_classes,
            classes.len()
        )));
    }
    let train_cfg = TrainConfig::default_for(model.config.variant);
    let mut cfg_with_seed = train_cfg;
    cfg_with_seed.split_seed = parse_seed(flags)?;
    let split = split_from_flags(flags, &videos, &cfg_with_seed)?;
    let ids = split.subset(split_name)?;

    let output = evaluate_model(&model, &videos, ids, cfg_with_seed.eval_stride)?;
    let table = MetricsTable::from_summary(&output.summary, &classes);

    fs::create_dir_all(&out)?;
    fs::write(out.join("metrics.csv"), table.to_csv())?;
    fs::write(out.join("metrics.json"), table.to_json())?;
    let predictions: String = output
        .detections
        .iter()
        .map(|d| format_prediction_line(d) + "\n")
        .collect();
    fs::write(out.join("predictions.txt"), predictions)?;

    print!("{}", table.to_aligned_text());
    println!(
        "P R mAP50 mAP50-95\n{:.3} {:.3} {:.3} {:.3}",
        output.summary.precision,
        output.summary.recall,
        output.summary.map50,
        output.summary.map50_95
    );
    Ok(())
}

pub fn cmd_analyze(flags: &HashMap<String, String>) -> Result<()> {
    let ckpt_path = require(flags, "checkpoint")?;
    let data_dir = require(flags, "data")?;
    let video_id = require(flags, "video")?;
    let range = parse_frame_range(require(flags, "frames")?)?;
    let out = PathBuf::from(require(flags, "out")?);

    let ckpt = load_checkpoint(Path::new(ckpt_path))?;
    let model = model_from_checkpoint(&ckpt)?;
    let (videos, classes) = load_videos(data_dir)?;
    let video = videos
        .iter()
        .find(|v| v.id == video_id)
        .ok_or_else(|| Error::Data(format!("no video '{video_id}' in {data_dir}")))?;

    let records = analyze_frames(&model, video, range, &classes)?;

    fs::create_dir_all(&out)?;
    fs::write(
        out.join("analysis.json"),
        serde_json::to_string_pretty(&records).expect("records serialize"),
    )?;
    fs::write(out.join("confidence.csv"), confidence_csv(&records))?;
    for record in &records {
        let seq = materialize_window(video, record.frame_index, 1)?;
        let seq = crate::detector::train::conform_window(seq, model.config.image_size)?;
        let img = render_annotated(&seq.frames[0], record)?;
        write_ppm(
            &out.join(format!("frame_{:05}.ppm", record.frame_index)),
            &img,
        )?;
    }
    println!(
        "analyzed {} frames of {video_id}; {} detections total",
        records.len(),
        records.iter().map(|r| r.detections.len()).sum::<usize>()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flag_map(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&args(&["bogus"])), 1);
        assert_eq!(run(&args(&["train", "--variant"])), 1);
        assert_eq!(run(&args(&[])), 1);
    }

    #[test]
    fn invalid_variant_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(&args(&[
            "train",
            "--data",
            dir.path().to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--variant",
            "mega",
        ]));
        assert_eq!(code, 1);
    }

    #[test]
    fn synth_writes_ingestible_dataset_deterministically() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_file = dir_a.path().join("synth.cfg");
        fs::write(
            &cfg_file,
            "n_videos = 3\nframes = 8\nsize = 64\nclasses = 2\n",
        )
        .unwrap();
        for out in [dir_a.path().join("data"), dir_b.path().join("data")] {
            let flags = flag_map(&[
                ("out", out.to_str().unwrap()),
                ("config", cfg_file.to_str().unwrap()),
                ("seed", "9"),
            ]);
            cmd_synth(&flags).unwrap();
        }
        // identical bytes across the two runs
        let img_a = fs::read(dir_a.path().join("data/video_000/img_00000.ppm")).unwrap();
        let img_b = fs::read(dir_b.path().join("data/video_000/img_00000.ppm")).unwrap();
        assert_eq!(img_a, img_b);
        let records = ingest(&dir_a.path().join("data")).unwrap();
        assert_eq!(records.len(), 3);
    }

    #[test]
    fn synth_rejects_unwritable_out() {
        let flags = flag_map(&[("out", "/proc/otter-cannot-write-here")]);
        assert!(cmd_synth(&flags).is_err());
    }

    #[test]
    fn eval_rejects_missing_split_name() {
        let flags = flag_map(&[
            ("checkpoint", "x"),
            ("data", "y"),
            ("split", "holdout"),
            ("out", "z"),
        ]);
        let err = cmd_eval(&flags).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn train_validates_before_writing_outputs() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let out_path = out.path().join("run");
        // data dir is empty: ingestion fails before any output is created
        let flags = flag_map(&[
            ("data", data.path().to_str().unwrap()),
            ("out", out_path.to_str().unwrap()),
        ]);
        assert!(cmd_train(&flags).is_err());
        assert!(!out_path.exists(), "no partial output directory");
    }
}
