//! Mini single-stage detector: backbone, PANet-style neck, optional CBAM and
//! ConvLSTM insertions, anchor-based heads, loss, and the training loop for
//! the three model variants.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod target;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{detection_loss, LossTerms};
pub use model::{build_model, Model};
pub use optim::{OptimKind, Optimizer};
pub use target::{assign_targets, decode_predictions, kmeans_anchors, ScaleTargets};
pub use train::{evaluate_model, fit, EpochLog, FitResult};

use crate::augment::AugmentConfig;
use crate::config::KvMap;
use crate::data::SplitRatios;
use crate::error::{Error, Result};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;

/// Reference anchors for a 640 image, scaled linearly to other sizes.
const BASE_ANCHORS: [[(f64, f64); 3]; 3] = [
    [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
    [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
    [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Temporal,
    TemporalCbam,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "temporal" => Ok(Variant::Temporal),
            "temporal_cbam" => Ok(Variant::TemporalCbam),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}' (baseline|temporal|temporal_cbam)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Temporal => "temporal",
            Variant::TemporalCbam => "temporal_cbam",
        }
    }

    pub fn uses_convlstm(&self) -> bool {
        matches!(self, Variant::Temporal | Variant::TemporalCbam)
    }

    pub fn uses_cbam(&self) -> bool {
        matches!(self, Variant::TemporalCbam)
    }
}

/// Declarative model description; the variant pins the attention/temporal
/// flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Base channel count of the backbone.
    pub width: usize,
    pub num_classes: usize,
    /// Per scale, three (w, h) anchor priors in pixels.
    pub anchors: [[(f64, f64); 3]; 3],
    pub strides: [usize; 3],
    pub cbam_after_neck: bool,
    pub convlstm_per_scale: [bool; 3],
    /// Temporal window length T.
    pub window: usize,
    pub image_size: usize,
    pub cbam_reduction: usize,
    pub cbam_spatial_k: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, width: usize, num_classes: usize, image_size: usize) -> Self {
        let scale = image_size as f64 / 640.0;
        let mut anchors = BASE_ANCHORS;
        for row in &mut anchors {
            for a in row {
                a.0 *= scale;
                a.1 *= scale;
            }
        }
        ModelConfig {
            variant,
            width,
            num_classes,
            anchors,
            strides: STRIDES,
            cbam_after_neck: variant.uses_cbam(),
            convlstm_per_scale: [variant.uses_convlstm(); 3],
            window: if variant.uses_convlstm() { 3 } else { 1 },
            image_size,
            cbam_reduction: 16,
            cbam_spatial_k: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be divisible by 32, got {}",
                self.image_size
            )));
        }
        if self.width == 0 || self.num_classes == 0 || self.window == 0 {
            return Err(Error::Config(
                "width, num_classes and window must be positive".into(),
            ));
        }
        for row in &self.anchors {
            for &(w, h) in row {
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::Config(format!(
                        "anchors must be positive, got ({w}, {h})"
                    )));
                }
            }
        }
        // variant implies flags
        let want_lstm = self.variant.uses_convlstm();
        if self.convlstm_per_scale.iter().any(|&f| f != want_lstm) && !want_lstm {
            return Err(Error::Config(
                "baseline variant cannot enable convlstm scales".into(),
            ));
        }
        if self.cbam_after_neck != self.variant.uses_cbam() {
            return Err(Error::Config(format!(
                "variant {} implies cbam_after_neck = {}",
                self.variant.name(),
                self.variant.uses_cbam()
            )));
        }
        if !want_lstm && self.window != 1 {
            return Err(Error::Config("baseline variant requires window = 1".into()));
        }
        Ok(())
    }

    /// Grid extent at scale `s` (image_size / stride).
    pub fn grid(&self, s: usize) -> usize {
        self.image_size / self.strides[s]
    }

    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new("model");
        kv.set("variant", self.variant.name());
        kv.set("width", self.width);
        kv.set("num_classes", self.num_classes);
        kv.set("image_size", self.image_size);
        kv.set("window", self.window);
        kv.set("cbam_after_neck", self.cbam_after_neck);
        kv.set(
            "convlstm_per_scale",
            format!(
                "{},{},{}",
                self.convlstm_per_scale[0], self.convlstm_per_scale[1], self.convlstm_per_scale[2]
            ),
        );
        kv.set("cbam_reduction", self.cbam_reduction);
        kv.set("cbam_spatial_k", self.cbam_spatial_k);
        for (si, row) in self.anchors.iter().enumerate() {
            let line: Vec<String> = row.iter().map(|(w, h)| format!("{w},{h}")).collect();
            kv.set(&format!("anchors.s{}", self.strides[si]), line.join(";"));
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let variant = Variant::parse(kv.require("variant")?)?;
        let width = kv.field_req::<usize>("width")?;
        let num_classes = kv.field_req::<usize>("num_classes")?;
        let image_size = kv.field_req::<usize>("image_size")?;
        let mut cfg = ModelConfig::new(variant, width, num_classes, image_size);
        cfg.window = kv.field("window", cfg.window)?;
        cfg.cbam_reduction = kv.field("cbam_reduction", cfg.cbam_reduction)?;
        cfg.cbam_spatial_k = kv.field("cbam_spatial_k", cfg.cbam_spatial_k)?;
        if let Some(flags) = kv.get("convlstm_per_scale") {
            let parts: Vec<&str> = flags.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "convlstm_per_scale needs 3 flags, got '{flags}'"
                )));
            }
            for (slot, p) in cfg.convlstm_per_scale.iter_mut().zip(parts) {
                *slot = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad convlstm_per_scale flag '{p}'")))?;
            }
        }
        for (si, stride) in STRIDES.iter().enumerate() {
            if let Some(spec) = kv.get(&format!("anchors.s{stride}")) {
                let pairs: Vec<&str> = spec.split(';').collect();
                if pairs.len() != 3 {
                    return Err(Error::Config(format!("anchors.s{stride} needs 3 pairs")));
                }
                for (slot, pair) in cfg.anchors[si].iter_mut().zip(pairs) {
                    let (w, h) = pair
                        .split_once(',')
                        .ok_or_else(|| Error::Config(format!("bad anchor pair '{pair}'")))?;
                    slot.0 = w
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad anchor '{pair}'")))?;
                    slot.1 = h
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad anchor '{pair}'")))?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimization settings; defaults depend on the variant (the temporal
/// variants train with a lower rate under AdamW).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub init_weights: Option<String>,
    pub seed: u64,
    /// Stride between training window starts.
    pub window_stride: usize,
    /// Stride between validation/eval window starts.
    pub eval_stride: usize,
    pub split: SplitRatios,
    pub split_seed: u64,
    /// Re-fit anchors to the training boxes before building the model.
    pub kmeans_anchors: bool,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn default_for(variant: Variant) -> Self {
        let (lr, optimizer) = match variant {
            Variant::Baseline => (0.01, OptimKind::SgdMomentum),
            _ => (0.001, OptimKind::AdamW),
        };
        TrainConfig {
            epochs: 30,
            lr,
            optimizer,
            weight_decay: 0.0005,
            batch_size: 8,
            loss_box: 0.05,
            loss_obj: 1.0,
            loss_cls: 0.5,
            init_weights: None,
            seed: 0,
            window_stride: 1,
            eval_stride: 7,
            split: SplitRatios::default(),
            split_seed: 0,
            kmeans_anchors: false,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.window_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config(
                "batch_size and strides must be positive".into(),
            ));
        }
        self.split.validate()?;
        self.augment.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new("train");
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("optimizer", self.optimizer.name());
        kv.set("weight_decay", self.weight_decay);
        kv.set("batch_size", self.batch_size);
        kv.set("loss_box", self.loss_box);
        kv.set("loss_obj", self.loss_obj);
        kv.set("loss_cls", self.loss_cls);
        if let Some(p) = &self.init_weights {
            kv.set("init_weights", p);
        }
        kv.set("seed", self.seed);
        kv.set("window_stride", self.window_stride);
        kv.set("eval_stride", self.eval_stride);
        kv.set("split.train", self.split.train);
        kv.set("split.val", self.split.val);
        kv.set("split.test", self.split.test);
        kv.set("split.seed", self.split_seed);
        kv.set("kmeans_anchors", self.kmeans_anchors);
        kv.set("augment.mosaic_p", self.augment.mosaic_p);
        kv.set("augment.mixup_p", self.augment.mixup_p);
        kv.set("augment.mixup_lambda_lo", self.augment.mixup_lambda_range.0);
        kv.set("augment.mixup_lambda_hi", self.augment.mixup_lambda_range.1);
        kv.set("augment.erase_p", self.augment.erase_p);
        kv.set("augment.erase_area_lo", self.augment.erase_area_range.0);
        kv.set("augment.erase_area_hi", self.augment.erase_area_range.1);
        kv.set("augment.blur_p", self.augment.blur_p);
        kv.set("augment.blur_sigma_lo", self.augment.blur_sigma_range.0);
        kv.set("augment.blur_sigma_hi", self.augment.blur_sigma_range.1);
        kv.set("augment.noise_p", self.augment.noise_p);
        kv.set("augment.noise_sigma", self.augment.noise_sigma);
        kv
    }

    pub fn from_kv(kv: &KvMap, variant: Variant) -> Result<Self> {
        let mut cfg = TrainConfig::default_for(variant);
        if let Some(opt) = kv.get("optimizer") {
            cfg.optimizer = OptimKind::parse(opt)?;
        }
        cfg.epochs = kv.field("epochs", cfg.epochs)?;
        cfg.lr = kv.field("lr", cfg.lr)?;
        cfg.weight_decay = kv.field("weight_decay", cfg.weight_decay)?;
        cfg.batch_size = kv.field("batch_size", cfg.batch_size)?;
        cfg.loss_box = kv.field("loss_box", cfg.loss_box)?;
        cfg.loss_obj = kv.field("loss_obj", cfg.loss_obj)?;
        cfg.loss_cls = kv.field("loss_cls", cfg.loss_cls)?;
        cfg.init_weights = kv.get("init_weights").map(|s| s.to_string());
        cfg.seed = kv.field("seed", cfg.seed)?;
        cfg.window_stride = kv.field("window_stride", cfg.window_stride)?;
        cfg.eval_stride = kv.field("eval_stride", cfg.eval_stride)?;
        cfg.split.train = kv.field("split.train", cfg.split.train)?;
        cfg.split.val = kv.field("split.val", cfg.split.val)?;
        cfg.split.test = kv.field("split.test", cfg.split.test)?;
        cfg.split_seed = kv.field("split.seed", cfg.split_seed)?;
        cfg.kmeans_anchors = kv.field("kmeans_anchors", cfg.kmeans_anchors)?;
        cfg.augment.mosaic_p = kv.field("augment.mosaic_p", cfg.augment.mosaic_p)?;
        cfg.augment.mixup_p = kv.field("augment.mixup_p", cfg.augment.mixup_p)?;
        cfg.augment.mixup_lambda_range.0 =
            kv.field("augment.mixup_lambda_lo", cfg.augment.mixup_lambda_range.0)?;
        cfg.augment.mixup_lambda_range.1 =
            kv.field("augment.mixup_lambda_hi", cfg.augment.mixup_lambda_range.1)?;
        cfg.augment.erase_p = kv.field("augment.erase_p", cfg.augment.erase_p)?;
        cfg.augment.erase_area_range.0 =
            kv.field("augment.erase_area_lo", cfg.augment.erase_area_range.0)?;
        cfg.augment.erase_area_range.1 =
            kv.field("augment.erase_area_hi", cfg.augment.erase_area_range.1)?;
        cfg.augment.blur_p = kv.field("augment.blur_p", cfg.augment.blur_p)?;
        cfg.augment.blur_sigma_range.0 =
            kv.field("augment.blur_sigma_lo", cfg.augment.blur_sigma_range.0)?;
        cfg.augment.blur_sigma_range.1 =
            kv.field("augment.blur_sigma_hi", cfg.augment.blur_sigma_range.1)?;
        cfg.augment.noise_p = kv.field("augment.noise_p", cfg.augment.noise_p)?;
        cfg.augment.noise_sigma = kv.field("augment.noise_sigma", cfg.augment.noise_sigma)?;
        cfg.augment.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_implies_flags() {
        let b = ModelConfig::new(Variant::Baseline, 8, 2, 128);
        assert!(!b.cbam_after_neck);
        assert_eq!(b.convlstm_per_scale, [false; 3]);
        assert_eq!(b.window, 1);
        b.validate().unwrap();

        let t = ModelConfig::new(Variant::Temporal, 8, 2, 128);
        assert!(!t.cbam_after_neck);
        assert_eq!(t.convlstm_per_scale, [true; 3]);
        t.validate().unwrap();

        let tc = ModelConfig::new(Variant::TemporalCbam, 8, 2, 128);
        assert!(tc.cbam_after_neck);
        tc.validate().unwrap();
    }

    #[test]
    fn image_size_must_be_divisible_by_32() {
        let cfg = ModelConfig::new(Variant::Baseline, 8, 2, 100);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_kv_round_trip() {
        let mut cfg = ModelConfig::new(Variant::TemporalCbam, 4, 3, 64);
        cfg.window = 5;
        cfg.anchors[0][0] = (3.25, 4.5);
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn train_kv_round_trip() {
        let mut cfg = TrainConfig::default_for(Variant::Temporal);
        cfg.epochs = 3;
        cfg.lr = 0.0025;
        cfg.augment.mosaic_p = 0.9;
        let kv = cfg.to_kv();
        let back = TrainConfig::from_kv(&kv, Variant::Temporal).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn optimizer_defaults_per_variant() {
        let b = TrainConfig::default_for(Variant::Baseline);
        assert_eq!(b.lr, 0.01);
        assert_eq!(b.optimizer, OptimKind::SgdMomentum);
        let t = TrainConfig::default_for(Variant::Temporal);
        assert_eq!(t.lr, 0.001);
        assert_eq!(t.optimizer, OptimKind::AdamW);
    }
}
