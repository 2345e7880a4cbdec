//! CBAM: channel attention followed by spatial attention, as a drop-in
//! feature-map refinement block.
//!
//! Channel attention squeezes the map with global average and max pooling,
//! pushes both descriptors through one shared two-layer MLP (no biases,
//! ReLU hidden) and gates channels with the sigmoid of the sum. Spatial
//! attention pools across channels, convolves the stacked avg/max maps with
//! a single wide kernel and gates positions.

use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::init::{conv_fan_in, he_tensor, linear_fan_in};
use crate::numkit::ops::{Activation, PoolMode};
use crate::numkit::tensor::{ParamId, ParamSet, Scalar};
use crate::rng::Rng;

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_K: usize = 7;

/// Handles to one CBAM block's weights inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct CbamParams {
    pub mlp_w1: ParamId,
    pub mlp_w2: ParamId,
    pub spatial_kernel: ParamId,
    pub channels: usize,
    pub hidden: usize,
    pub spatial_k: usize,
}

impl CbamParams {
    /// Register freshly initialized weights under `prefix`.
    ///
    /// The MLP hidden width is floor(C/r) clamped to at least 1, so tiny
    /// channel counts still get a valid bottleneck.
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        spatial_k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spatial_k % 2 == 0 {
            return Err(Error::Config(format!(
                "cbam spatial kernel must be odd, got {spatial_k}"
            )));
        }
        if reduction == 0 {
            return Err(Error::Config("cbam reduction must be positive".into()));
        }
        let hidden = (channels / reduction).max(1);
        let w1_shape = [hidden, channels];
        let w2_shape = [channels, hidden];
        let sk_shape = [1, 2, spatial_k, spatial_k];
        let mlp_w1 = ps.add(
            format!("{prefix}.mlp_w1"),
            he_tensor(&w1_shape, linear_fan_in(&w1_shape), rng),
        );
        let mlp_w2 = ps.add(
            format!("{prefix}.mlp_w2"),
            he_tensor(&w2_shape, linear_fan_in(&w2_shape), rng),
        );
        let spatial_kernel = ps.add(
            format!("{prefix}.spatial_kernel"),
            he_tensor(&sk_shape, conv_fan_in(&sk_shape), rng),
        );
        Ok(CbamParams {
            mlp_w1,
            mlp_w2,
            spatial_kernel,
            channels,
            hidden,
            spatial_k,
        })
    }

    fn nodes<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> CbamNodes {
        CbamNodes {
            mlp_w1: g.param(ps, self.mlp_w1),
            mlp_w2: g.param(ps, self.mlp_w2),
            spatial_kernel: g.param(ps, self.spatial_kernel),
            spatial_k: self.spatial_k,
        }
    }
}

/// Tape-level handles to the same weights; lets gradient checks feed the
/// block from plain inputs instead of a parameter set.
#[derive(Clone, Copy, Debug)]
pub struct CbamNodes {
    pub mlp_w1: NodeId,
    pub mlp_w2: NodeId,
    pub spatial_kernel: NodeId,
    pub spatial_k: usize,
}

fn shared_mlp<T: Scalar>(g: &mut Graph<T>, x: NodeId, n: &CbamNodes) -> Result<NodeId> {
    let hidden = g.linear(x, n.mlp_w1, None)?;
    let hidden = g.activation(hidden, Activation::Relu);
    g.linear(hidden, n.mlp_w2, None)
}

/// Per-channel gate in (0,1), shape [B, C, 1, 1].
pub fn channel_attention_nodes<T: Scalar>(
    g: &mut Graph<T>,
    f: NodeId,
    n: &CbamNodes,
) -> Result<NodeId> {
    let (b, c, _, _) = g.value(f).dims4("channel_attention")?;
    let avg = g.global_pool(f, PoolMode::Avg)?;
    let avg = g.reshape(avg, &[b, c])?;
    let max = g.global_pool(f, PoolMode::Max)?;
    let max = g.reshape(max, &[b, c])?;
    let avg_path = shared_mlp(g, avg, n)?;
    let max_path = shared_mlp(g, max, n)?;
    let sum = g.add(avg_path, max_path)?;
    let gate = g.activation(sum, Activation::Sigmoid);
    g.reshape(gate, &[b, c, 1, 1])
}

/// Per-position gate in (0,1), shape [B, 1, H, W].
pub fn spatial_attention_nodes<T: Scalar>(
    g: &mut Graph<T>,
    f: NodeId,
    n: &CbamNodes,
) -> Result<NodeId> {
    let avg = g.channel_reduce(f, PoolMode::Avg)?;
    let max = g.channel_reduce(f, PoolMode::Max)?;
    let stacked = g.concat_channels(avg, max)?;
    let pad = (n.spatial_k - 1) / 2;
    let conv = g.conv2d(stacked, n.spatial_kernel, None, 1, pad)?;
    Ok(g.activation(conv, Activation::Sigmoid))
}

/// Full block: F'' = Ms(F') (.) F' where F' = Mc(F) (.) F.
pub fn cbam_nodes<T: Scalar>(g: &mut Graph<T>, f: NodeId, n: &CbamNodes) -> Result<NodeId> {
    let mc = channel_attention_nodes(g, f, n)?;
    let refined = g.mul(f, mc)?;
    let ms = spatial_attention_nodes(g, refined, n)?;
    g.mul(refined, ms)
}

pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    f: NodeId,
    p: &CbamParams,
) -> Result<NodeId> {
    let n = p.nodes(g, ps);
    channel_attention_nodes(g, f, &n)
}

pub fn spatial_attention<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    f: NodeId,
    p: &CbamParams,
) -> Result<NodeId> {
    let n = p.nodes(g, ps);
    spatial_attention_nodes(g, f, &n)
}

pub fn cbam<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    f: NodeId,
    p: &CbamParams,
) -> Result<NodeId> {
    let n = p.nodes(g, ps);
    cbam_nodes(g, f, &n)
}
