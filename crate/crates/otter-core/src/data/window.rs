//! Temporal window sampling.
//!
//! Windows start at frame 0 and advance by `stride`; a video shorter than
//! the window length yields none. The supervision target of a window is the
//! final frame's labels, matching the hidden state the head consumes.

use crate::data::{FrameSequence, VideoRecord};
use crate::error::Result;

/// Cheap window descriptor; frames load lazily via [`materialize_window`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub video_index: usize,
    pub start: usize,
    pub len: usize,
}

/// Window start indices for one video: count = floor((len - T)/stride) + 1.
pub fn window_starts(video_len: usize, window: usize, stride: usize) -> Vec<usize> {
    if video_len < window || window == 0 || stride == 0 {
        return Vec::new();
    }
    (0..=(video_len - window)).step_by(stride).collect()
}

/// Materialized windows for a single video.
pub fn window_sampler(v: &VideoRecord, window: usize, stride: usize) -> Result<Vec<FrameSequence>> {
    let mut out = Vec::new();
    for start in window_starts(v.len(), window, stride) {
        out.push(materialize_window(v, start, window)?);
    }
    Ok(out)
}

/// Window descriptors across a set of videos.
pub fn windows_for_videos(videos: &[VideoRecord], window: usize, stride: usize) -> Vec<WindowSpec> {
    let mut specs = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for start in window_starts(v.len(), window, stride) {
            specs.push(WindowSpec {
                video_index: vi,
                start,
                len: window,
            });
        }
    }
    specs
}

/// Load the frames of one window from disk.
pub fn materialize_window(v: &VideoRecord, start: usize, len: usize) -> Result<FrameSequence> {
    let mut frames = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for i in start..start + len {
        frames.push(crate::data::ingest::load_frame(&v.frames[i])?);
        labels.push(v.labels[i].clone());
    }
    Ok(FrameSequence {
        video_id: v.id.clone(),
        start_index: start,
        frames,
        labels,
    })
}
