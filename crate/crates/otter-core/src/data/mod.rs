//! Dataset ingestion, frame standardization, splitting, temporal window
//! sampling, and the synthetic video generator used for desk-scale tests.

pub mod ingest;
pub mod split;
pub mod synth;
pub mod window;

use std::path::PathBuf;

use crate::geometry::NormBox;
use crate::numkit::tensor::Tensor;

pub use ingest::{ingest, load_frame, read_classes, standardize_frames, STANDARD_FRAMES};
pub use split::{split_videos, DatasetSplit, SplitRatios};
pub use synth::{synth_moving_blob, MotionKind, SynthConfig};
pub use window::{window_sampler, windows_for_videos};

/// One video clip: ordered frame image references plus per-frame label sets.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub id: String,
    pub class_name: String,
    /// Image file per frame, sorted by frame index.
    pub frames: Vec<PathBuf>,
    /// One label list per frame (empty list = no objects in that frame).
    pub labels: Vec<Vec<NormBox>>,
    /// Set when the video had fewer frames than the standard length.
    pub short: bool,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A contiguous run of frames from one video; the temporal unit of training
/// and evaluation. The label target of a window is the final frame's labels.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub video_id: String,
    pub start_index: usize,
    /// [C, H, W] pixel tensors in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<NormBox>>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Labels of the final frame: what the detector is supervised on.
    pub fn target_labels(&self) -> &[NormBox] {
        self.labels.last().map(|l| l.as_slice()).unwrap_or(&[])
    }
}
