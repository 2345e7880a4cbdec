//! Overlap-free dataset splitting at whole-video granularity.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if r <= 0.0 {
                return Err(Error::Config(format!(
                    "split ratio {name} must be positive, got {r}"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Disjoint whole-video assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn subset(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!(
                "unknown split '{other}' (train|val|test)"
            ))),
        }
    }
}

/// Deterministic shuffle then cumulative-ratio assignment. Sizes floor per
/// split with the remainder going to train; if that leaves val or test empty
/// while train can spare a video, one is moved over so every split is
/// non-empty whenever three or more videos exist.
pub fn split_videos(video_ids: &[String], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let n = video_ids.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "need at least 3 videos to populate train/val/test, got {n}"
        )));
    }
    // sort before shuffling so the result ignores input enumeration order
    let mut ids = video_ids.to_vec();
    ids.sort();
    let mut rng = Rng::seed_from(seed);
    rng.shuffle(&mut ids);

    let mut n_val = (ratios.val * n as f64).floor() as usize;
    let mut n_test = (ratios.test * n as f64).floor() as usize;
    let mut n_train = n - n_val - n_test;
    while n_val == 0 && n_train > 1 {
        n_train -= 1;
        n_val += 1;
    }
    while n_test == 0 && n_train > 1 {
        n_train -= 1;
        n_test += 1;
    }

    let train = ids[..n_train].to_vec();
    let val = ids[n_train..n_train + n_val].to_vec();
    let test = ids[n_train + n_val..].to_vec();
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}
