//! Training loop: seeded shuffling, temporal augmentation, optimizer steps,
//! per-epoch validation, and best-checkpoint tracking.

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::augment_window;
use crate::data::window::{materialize_window, windows_for_videos, WindowSpec};
use crate::data::{DatasetSplit, FrameSequence, VideoRecord};
use crate::detector::checkpoint::{load_checkpoint, load_overlapping, save_checkpoint};
use crate::detector::loss::detection_loss;
use crate::detector::model::Model;
use crate::detector::target::{assign_targets, decode_predictions, ScaleTargets};
use crate::detector::{Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{map_range, EvalSummary, ImageBox};
use crate::geometry::{self, letterbox, nms};
use crate::numkit::graph::Graph;
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub val_p: f64,
    pub val_r: f64,
    pub val_map50: f64,
    pub val_map50_95: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_map50_95: f64,
    /// Parameters copied from `init_weights`, when warm-started.
    pub transferred: usize,
    pub steps: usize,
    /// Weighted total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,box,obj,cls,val_P,val_R,val_mAP50,val_mAP50_95";

/// Scale a window to the model's square input, mapping labels through the
/// same transform. A no-op when frames already match.
pub fn conform_window(mut seq: FrameSequence, size: usize) -> Result<FrameSequence> {
    let needs = seq
        .frames
        .first()
        .map(|f| f.shape() != [3, size, size])
        .unwrap_or(false);
    if !needs {
        return Ok(seq);
    }
    for (frame, labels) in seq.frames.iter_mut().zip(seq.labels.iter_mut()) {
        let (boxed, transform) = letterbox(frame, size, 0.447_f32)?;
        *frame = boxed;
        for b in labels.iter_mut() {
            *b = transform.map_norm_box(b).clamped();
        }
    }
    Ok(seq)
}

/// Stack a batch of equal-length windows frame-major: row `t*B + b` holds
/// frame `t` of window `b`.
pub fn stack_windows(seqs: &[FrameSequence]) -> Result<Tensor<f32>> {
    let b = seqs.len();
    let t_len = seqs[0].len();
    let shape = seqs[0].frames[0].shape().to_vec();
    let frame_len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(b * t_len * frame_len);
    for t in 0..t_len {
        for seq in seqs {
            if seq.len() != t_len || seq.frames[t].shape() != shape.as_slice() {
                return Err(Error::shape("stack_windows", "inconsistent window shapes"));
            }
            data.extend_from_slice(seq.frames[t].data());
        }
    }
    Tensor::new(vec![b * t_len, shape[0], shape[1], shape[2]], data)
}

fn videos_for_ids<'a>(videos: &'a [VideoRecord], ids: &[String]) -> Vec<&'a VideoRecord> {
    videos.iter().filter(|v| ids.contains(&v.id)).collect()
}

/// Train `model` on the train split, validating after each epoch; returns
/// the log and writes `best.ckpt`, `last.ckpt` and `epochs.csv` to
/// `out_dir`.
pub fn fit(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    videos: &[VideoRecord],
    split: &DatasetSplit,
    out_dir: &Path,
) -> Result<FitResult> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let train_videos: Vec<VideoRecord> = videos_for_ids(videos, &split.train)
        .into_iter()
        .cloned()
        .collect();
    if train_videos.is_empty() || split.val.is_empty() {
        return Err(Error::Data("train and val splits must be non-empty".into()));
    }

    let mut transferred = 0;
    if let Some(init) = &cfg.init_weights {
        let ckpt = load_checkpoint(Path::new(init))?;
        transferred = load_overlapping(model, &ckpt.tensors);
        eprintln!("warm start: transferred {transferred} tensors from {init}");
    }

    let t_len = model.config.window;
    let specs = windows_for_videos(&train_videos, t_len, cfg.window_stride);
    if specs.is_empty() {
        return Err(Error::Data(format!(
            "no training windows: videos shorter than T={t_len}"
        )));
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &model.params);
    let base_rng = Rng::seed_from(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best_map = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut steps = 0usize;
    let mut step_losses: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut rng = base_rng.derive(1000 + epoch as u64);
        let mut order: Vec<usize> = (0..specs.len()).collect();
        rng.shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut sequences = Vec::with_capacity(chunk.len());
            for &wi in chunk {
                let spec: WindowSpec = specs[wi];
                let video = &train_videos[spec.video_index];
                let seq = conform_window(
                    materialize_window(video, spec.start, spec.len)?,
                    model.config.image_size,
                )?;
                // neighbors for mosaic/mixup come from other training windows;
                // skip the loads entirely when both transforms are disabled
                let wants_neighbors = cfg.augment.mosaic_p > 0.0 || cfg.augment.mixup_p > 0.0;
                let mut neighbors = Vec::with_capacity(3);
                if wants_neighbors {
                    for _ in 0..3 {
                        let other: WindowSpec = specs[rng.below(specs.len())];
                        neighbors.push(conform_window(
                            materialize_window(
                                &train_videos[other.video_index],
                                other.start,
                                other.len,
                            )?,
                            model.config.image_size,
                        )?);
                    }
                }
                let refs: Vec<&FrameSequence> = neighbors.iter().collect();
                let (augmented, _records) = augment_window(&seq, &refs, &cfg.augment, &mut rng)?;
                sequences.push(augmented);
            }

            let input = stack_windows(&sequences)?;
            let targets: Vec<[ScaleTargets; 3]> = sequences
                .iter()
                .map(|s| assign_targets(s.target_labels(), &model.config).0)
                .collect();

            let mut g = Graph::new();
            let raw = model.forward(&mut g, &input, t_len)?;
            let terms = detection_loss(
                &mut g,
                &raw,
                &targets,
                &model.config,
                (cfg.loss_box, cfg.loss_obj, cfg.loss_cls),
            )?;
            let (bv, ov, cv, total) = (
                g.value(terms.box_term).data()[0] as f64,
                g.value(terms.obj_term).data()[0] as f64,
                g.value(terms.cls_term).data()[0] as f64,
                g.value(terms.total).data()[0] as f64,
            );
            if !total.is_finite() {
                let ids: Vec<&str> = sequences.iter().map(|s| s.video_id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_id} (windows from {ids:?})"
                )));
            }
            g.backward(terms.total)?;
            g.accumulate_into(&mut model.params);
            optimizer.step(&mut model.params);
            model.params.zero_grads();
            steps += 1;
            step_losses.push(total);
            sums.0 += bv;
            sums.1 += ov;
            sums.2 += cv;
            batches += 1;
        }

        let val = evaluate_model(model, videos, &split.val, cfg.eval_stride)?;
        let log = EpochLog {
            epoch,
            box_loss: sums.0 / batches as f64,
            obj_loss: sums.1 / batches as f64,
            cls_loss: sums.2 / batches as f64,
            val_p: val.summary.precision,
            val_r: val.summary.recall,
            val_map50: val.summary.map50,
            val_map50_95: val.summary.map50_95,
        };
        eprintln!(
            "epoch {epoch}: box {:.4} obj {:.4} cls {:.4} | val mAP50 {:.3} mAP50-95 {:.3}",
            log.box_loss, log.obj_loss, log.cls_loss, log.val_map50, log.val_map50_95
        );
        if log.val_map50_95 > best_map {
            best_map = log.val_map50_95;
            best_epoch = epoch;
            save_checkpoint(&best_path, model)?;
        }
        epochs.push(log);
    }

    save_checkpoint(&last_path, model)?;
    fs::write(out_dir.join("epochs.csv"), epochs_csv(&epochs))?;
    Ok(FitResult {
        epochs,
        best_epoch,
        best_map50_95: best_map,
        transferred,
        steps,
        step_losses,
        best_path,
        last_path,
    })
}

pub fn epochs_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for e in epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch,
            e.box_loss,
            e.obj_loss,
            e.cls_loss,
            e.val_p,
            e.val_r,
            e.val_map50,
            e.val_map50_95
        ));
    }
    out
}

/// Detections and ground truth gathered over an evaluation pass.
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub detections: Vec<ImageBox>,
    pub ground_truth: Vec<ImageBox>,
}

/// mAP needs the full precision-recall curve, so evaluation keeps detections
/// far below the deployment confidence threshold.
pub const EVAL_CONF_THR: f64 = 0.001;
/// Candidate cap before NMS and final cap per image.
pub const PRE_NMS_TOP_K: usize = 1000;
pub const MAX_DETECTIONS: usize = 300;

fn top_k_by_confidence(
    mut dets: Vec<crate::geometry::PixelBox>,
    k: usize,
) -> Vec<crate::geometry::PixelBox> {
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    dets.truncate(k);
    dets
}

/// Run forward + decode + NMS over every window of the given videos and
/// score against the final-frame labels.
pub fn evaluate_model(
    model: &Model<f32>,
    videos: &[VideoRecord],
    ids: &[String],
    eval_stride: usize,
) -> Result<EvalOutput> {
    let eval_videos: Vec<&VideoRecord> = videos_for_ids(videos, ids);
    if eval_videos.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let t_len = model.config.window;
    let size = model.config.image_size;
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();

    for video in eval_videos {
        let starts: Vec<usize> =
            crate::data::window::window_starts(video.len(), t_len, eval_stride);
        for batch in starts.chunks(8) {
            let mut sequences = Vec::with_capacity(batch.len());
            for &start in batch {
                sequences.push(conform_window(
                    materialize_window(video, start, t_len)?,
                    size,
                )?);
            }
            let input = stack_windows(&sequences)?;
            let raw = model.predict(&input, t_len)?;
            for (bi, seq) in sequences.iter().enumerate() {
                let frame_index = seq.start_index + t_len - 1;
                let image_id = format!("{}#{:05}", video.id, frame_index);
                let dets = decode_predictions(&raw, &model.config, bi, EVAL_CONF_THR)?;
                let dets = top_k_by_confidence(dets, PRE_NMS_TOP_K);
                let kept = nms(&dets, geometry::NMS_IOU_DEFAULT, EVAL_CONF_THR);
                for d in top_k_by_confidence(kept, MAX_DETECTIONS) {
                    detections.push(ImageBox::new(image_id.clone(), d));
                }
                for nb in seq.target_labels() {
                    let (pb, _) = geometry::norm_to_pixel(nb, size, size);
                    ground_truth.push(ImageBox::new(image_id.clone(), pb));
                }
            }
        }
    }

    let summary = map_range(&detections, &ground_truth, None)?;
    Ok(EvalOutput {
        summary,
        detections,
        ground_truth,
    })
}
