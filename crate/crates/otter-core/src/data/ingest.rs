//! Dataset directory ingestion and frame-count standardization.
//!
//! Layout:
//!
//! ```text
//! <root>/classes.txt              one class name per line, id = line number
//! <root>/<video>/img_00000.ppm    frames, sorted by the number in the stem
//! <root>/<video>/labels/img_00000.txt   one YOLO label line per box
//! ```
//!
//! Every frame must have a label file; an empty file means "no objects".

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::VideoRecord;
use crate::error::{Error, Result};
use crate::geometry::{parse_label_line, NormBox};
use crate::imageio::{read_ppm, IMAGE_EXT};
use crate::numkit::tensor::Tensor;

/// Standard clip length; longer videos are truncated, shorter ones flagged.
pub const STANDARD_FRAMES: usize = 100;

pub fn read_classes(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("missing classes.txt in {}: {e}", root.display())))?;
    let classes: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "{}: no classes listed",
            path.display()
        )));
    }
    Ok(classes)
}

fn frame_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn read_labels_file(path: &Path) -> Result<Vec<NormBox>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("missing label file {}: {e}", path.display())))?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let b = parse_label_line(trimmed)
            .map_err(|msg| Error::parse(path.display().to_string(), lineno + 1, msg))?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// Load every video under `dir`. Videos are subdirectories; frames are
/// sorted numerically so the result is independent of filesystem order.
pub fn ingest(dir: &Path) -> Result<Vec<VideoRecord>> {
    let classes = read_classes(dir).ok();
    let mut video_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset dir {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    video_dirs.sort();
    if video_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no video subdirectories in {}",
            dir.display()
        )));
    }

    let mut records = Vec::with_capacity(video_dirs.len());
    for vdir in video_dirs {
        let id = vdir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let mut frames: Vec<(u64, PathBuf)> = fs::read_dir(&vdir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", vdir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().map(|e| e == IMAGE_EXT).unwrap_or(false))
            .filter_map(|p| frame_index(&p).map(|i| (i, p)))
            .collect();
        if frames.is_empty() {
            return Err(Error::Data(format!(
                "video {} has no frames",
                vdir.display()
            )));
        }
        frames.sort();

        let labels_dir = vdir.join("labels");
        let mut labels = Vec::with_capacity(frames.len());
        for (_, fpath) in &frames {
            let stem = fpath
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            let lpath = labels_dir.join(format!("{stem}.txt"));
            if !lpath.is_file() {
                return Err(Error::Data(format!(
                    "frame {} has no label file {}",
                    fpath.display(),
                    lpath.display()
                )));
            }
            labels.push(read_labels_file(&lpath)?);
        }

        // dominant label class names the video
        let class_name = dominant_class(&labels)
            .and_then(|cid| classes.as_ref().and_then(|c| c.get(cid).cloned()))
            .unwrap_or_default();

        records.push(VideoRecord {
            id,
            class_name,
            frames: frames.into_iter().map(|(_, p)| p).collect(),
            labels,
            short: false,
        });
    }
    Ok(records)
}

fn dominant_class(labels: &[Vec<NormBox>]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for frame in labels {
        for b in frame {
            *counts.entry(b.class_id).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by_key(|&(cid, n)| (n, std::cmp::Reverse(cid)))
        .map(|(cid, _)| cid)
}

/// Truncate to the first `n` frames; shorter videos are kept and flagged.
pub fn standardize_frames(mut v: VideoRecord, n: usize) -> VideoRecord {
    if v.frames.len() > n {
        v.frames.truncate(n);
        v.labels.truncate(n);
        v.short = false;
    } else {
        v.short = v.frames.len() < n;
    }
    v
}

/// Read one frame as a [3, H, W] tensor in [0, 1].
pub fn load_frame(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_ppm(path)?.to_tensor())
}
