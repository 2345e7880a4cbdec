//! Model construction and the forward pass for all three variants.
//!
//! Backbone: a stride-2 stem conv plus four stride-2 blocks, emitting
//! features at strides 8/16/32. Neck: top-down (upsample + concat + conv)
//! then bottom-up (strided conv + concat + conv) fusion. Optional CBAM
//! refines each neck output; optional ConvLSTM consumes the per-frame
//! refined features across the window and hands its final hidden state to
//! that scale's 1x1 head.

use crate::attention::CbamParams;
use crate::detector::{ModelConfig, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::init::{conv_fan_in, he_tensor};
use crate::numkit::ops::Activation;
use crate::numkit::tensor::{ParamId, ParamSet, Scalar, Tensor};
use crate::rng::Rng;
use crate::temporal::{convlstm_rollout, ConvLstmParams};

use std::sync::Arc;

#[derive(Clone, Debug)]
struct ConvSpec {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    act: Option<Activation>,
}

impl ConvSpec {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.conv2d(x, w, Some(b), self.stride, self.pad)?;
        Ok(match self.act {
            Some(kind) => g.activation(y, kind),
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: ConvSpec,
    b1: ConvSpec,
    b2: ConvSpec,
    b2r: ConvSpec,
    b3: ConvSpec,
    b4: ConvSpec,
    lat5: ConvSpec,
    t4: ConvSpec,
    red4: ConvSpec,
    t3: ConvSpec,
    d3: ConvSpec,
    n4: ConvSpec,
    d4: ConvSpec,
    n5: ConvSpec,
    cbam: [Option<CbamParams>; 3],
    convlstm: [Option<ConvLstmParams>; 3],
    heads: [ConvSpec; 3],
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layers: Layers,
}

fn add_conv<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    act: Option<Activation>,
) -> ConvSpec {
    let w_shape = [cout, cin, k, k];
    let w = ps.add(
        format!("{name}.w"),
        he_tensor(&w_shape, conv_fan_in(&w_shape), rng),
    );
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvSpec {
        w,
        b,
        stride,
        pad: k / 2,
        act,
    }
}

/// Neck output channels per scale for a given base width.
pub fn neck_channels(width: usize) -> [usize; 3] {
    [2 * width, 4 * width, 8 * width]
}

/// Build a freshly initialized model. Head objectness biases start strongly
/// negative so an untrained model predicts near-zero confidence everywhere.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    cfg.validate()?;
    let w = cfg.width;
    let mut ps = ParamSet::new();
    let act = Some(Activation::Silu);

    let stem = add_conv(&mut ps, rng, "backbone.stem", 3, w, 3, 2, act);
    let b1 = add_conv(&mut ps, rng, "backbone.b1", w, 2 * w, 3, 2, act);
    let b2 = add_conv(&mut ps, rng, "backbone.b2", 2 * w, 4 * w, 3, 2, act);
    let b2r = add_conv(&mut ps, rng, "backbone.b2r", 4 * w, 4 * w, 3, 1, act);
    let b3 = add_conv(&mut ps, rng, "backbone.b3", 4 * w, 8 * w, 3, 2, act);
    let b4 = add_conv(&mut ps, rng, "backbone.b4", 8 * w, 8 * w, 3, 2, act);

    let lat5 = add_conv(&mut ps, rng, "neck.lat5", 8 * w, 4 * w, 1, 1, act);
    let t4 = add_conv(&mut ps, rng, "neck.t4", 12 * w, 4 * w, 3, 1, act);
    let red4 = add_conv(&mut ps, rng, "neck.red4", 4 * w, 2 * w, 1, 1, act);
    let t3 = add_conv(&mut ps, rng, "neck.t3", 6 * w, 2 * w, 3, 1, act);
    let d3 = add_conv(&mut ps, rng, "neck.d3", 2 * w, 2 * w, 3, 2, act);
    let n4 = add_conv(&mut ps, rng, "neck.n4", 6 * w, 4 * w, 3, 1, act);
    let d4 = add_conv(&mut ps, rng, "neck.d4", 4 * w, 4 * w, 3, 2, act);
    let n5 = add_conv(&mut ps, rng, "neck.n5", 8 * w, 8 * w, 3, 1, act);

    let nc = neck_channels(w);
    let scale_tag = ["s8", "s16", "s32"];

    let mut cbam: [Option<CbamParams>; 3] = [None, None, None];
    if cfg.cbam_after_neck {
        for s in 0..3 {
            cbam[s] = Some(CbamParams::init(
                &mut ps,
                &format!("cbam.{}", scale_tag[s]),
                nc[s],
                cfg.cbam_reduction,
                cfg.cbam_spatial_k,
                rng,
            )?);
        }
    }

    let mut convlstm: [Option<ConvLstmParams>; 3] = [None, None, None];
    for s in 0..3 {
        if cfg.convlstm_per_scale[s] {
            convlstm[s] = Some(ConvLstmParams::init(
                &mut ps,
                &format!("convlstm.{}", scale_tag[s]),
                nc[s],
                nc[s],
                3,
                rng,
            )?);
        }
    }

    let head_out = ANCHORS_PER_SCALE * cfg.channels_per_anchor();
    let heads = [
        add_conv(&mut ps, rng, "head.s8", nc[0], head_out, 1, 1, None),
        add_conv(&mut ps, rng, "head.s16", nc[1], head_out, 1, 1, None),
        add_conv(&mut ps, rng, "head.s32", nc[2], head_out, 1, 1, None),
    ];
    for head in &heads {
        let bias = &mut ps.get_mut(head.b).value;
        let cpa = cfg.channels_per_anchor();
        for a in 0..ANCHORS_PER_SCALE {
            bias.data_mut()[a * cpa + 4] = T::from_f64(-4.0);
        }
    }

    Ok(Model {
        config: cfg.clone(),
        params: ps,
        layers: Layers {
            stem,
            b1,
            b2,
            b2r,
            b3,
            b4,
            lat5,
            t4,
            red4,
            t3,
            d3,
            n4,
            d4,
            n5,
            cbam,
            convlstm,
            heads,
        },
    })
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Backbone + neck over a flat frame batch, yielding per-scale features.
    fn features(&self, g: &mut Graph<T>, input: NodeId) -> Result<[NodeId; 3]> {
        let l = &self.layers;
        let ps = &self.params;
        let s = l.stem.apply(g, ps, input)?;
        let x1 = l.b1.apply(g, ps, s)?;
        let x2 = l.b2.apply(g, ps, x1)?;
        let p3 = l.b2r.apply(g, ps, x2)?;
        let p4 = l.b3.apply(g, ps, p3)?;
        let p5 = l.b4.apply(g, ps, p4)?;

        // top-down
        let lat5 = l.lat5.apply(g, ps, p5)?;
        let up5 = g.upsample_nearest2(lat5)?;
        let cat4 = g.concat_channels(up5, p4)?;
        let t4 = l.t4.apply(g, ps, cat4)?;
        let red4 = l.red4.apply(g, ps, t4)?;
        let up4 = g.upsample_nearest2(red4)?;
        let cat3 = g.concat_channels(up4, p3)?;
        let n3 = l.t3.apply(g, ps, cat3)?;

        // bottom-up
        let d3 = l.d3.apply(g, ps, n3)?;
        let cat4b = g.concat_channels(d3, t4)?;
        let n4 = l.n4.apply(g, ps, cat4b)?;
        let d4 = l.d4.apply(g, ps, n4)?;
        let cat5 = g.concat_channels(d4, lat5)?;
        let n5 = l.n5.apply(g, ps, cat5)?;

        Ok([n3, n4, n5])
    }

    /// Forward pass over a frame-major stacked batch.
    ///
    /// `input` holds `batch * t_len` frames shaped [B*T, 3, S, S] where row
    /// `t*B + b` is frame `t` of window `b`. `t_len` must equal the
    /// configured window length for the variant.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        t_len: usize,
    ) -> Result<[NodeId; 3]> {
        let (bt, c, h, w) = input.dims4("model.forward")?;
        if c != 3 {
            return Err(Error::shape(
                "model.forward",
                format!("expected RGB input, got {c} channels"),
            ));
        }
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::shape(
                "model.forward",
                format!(
                    "expected {0}x{0} input, got {h}x{w}",
                    self.config.image_size
                ),
            ));
        }
        if t_len != self.config.window {
            return Err(Error::shape(
                "model.forward",
                format!(
                    "variant {} expects windows of {} frame(s), got {t_len}",
                    self.config.variant.name(),
                    self.config.window
                ),
            ));
        }
        if bt % t_len != 0 {
            return Err(Error::shape(
                "model.forward",
                format!("batch {bt} not divisible by window length {t_len}"),
            ));
        }
        let b = bt / t_len;

        let input = g.constant(input.clone());
        let feats = self.features(g, input)?;

        let mut raw = [NodeId::default(); 3];
        for s in 0..3 {
            let mut f = feats[s];
            if let Some(cbam) = &self.layers.cbam[s] {
                f = crate::attention::cbam(g, &self.params, f, cbam)?;
            }
            let head_in = match &self.layers.convlstm[s] {
                Some(lstm) => {
                    let nodes = lstm.nodes(g, &self.params);
                    let mut frames = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
                        frames.push(g.batch_select(f, Arc::new(rows))?);
                    }
                    let states = convlstm_rollout(g, &frames, &nodes, None)?;
                    states.last().unwrap().h
                }
                None => {
                    if t_len == 1 {
                        f
                    } else {
                        // temporal variant with this scale's fusion disabled:
                        // the head sees the final frame's features
                        let rows: Vec<usize> = ((t_len - 1) * b..t_len * b).collect();
                        g.batch_select(f, Arc::new(rows))?
                    }
                }
            };
            raw[s] = self.layers.heads[s].apply(g, &self.params, head_in)?;
        }
        Ok(raw)
    }

    /// Forward pass returning raw prediction tensors (inference path).
    pub fn predict(&self, input: &Tensor<T>, t_len: usize) -> Result<[Tensor<T>; 3]> {
        let mut g = Graph::new();
        let raw = self.forward(&mut g, input, t_len)?;
        Ok([
            g.value(raw[0]).clone(),
            g.value(raw[1]).clone(),
            g.value(raw[2]).clone(),
        ])
    }
}
