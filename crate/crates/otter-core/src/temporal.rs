//! ConvLSTM cell and sequence roll-out: the temporal fusion layer.
//!
//! Standard peephole-free formulation. All four gate transforms are
//! convolutions with padding (k-1)/2, so hidden and cell states keep the
//! spatial layout of the input features:
//!
//!   i = sig(Wxi*x + Whi*h + bi)      f = sig(Wxf*x + Whf*h + bf)
//!   o = sig(Wxo*x + Who*h + bo)      g = tanh(Wxg*x + Whg*h + bg)
//!   c' = f (.) c + i (.) g           h' = o (.) tanh(c')

use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::init::{conv_fan_in, he_tensor};
use crate::numkit::ops::Activation;
use crate::numkit::tensor::{ParamId, ParamSet, Scalar, Tensor};
use crate::rng::Rng;

const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Handles to one cell's twelve parameter tensors (four gates, each with an
/// input kernel, a hidden kernel and a bias).
#[derive(Clone, Debug)]
pub struct ConvLstmParams {
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub bias: [ParamId; 4],
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl ConvLstmParams {
    /// Register freshly initialized weights under `prefix`.
    ///
    /// Initialization keeps the untrained cell close to a pass-through of
    /// the current frame: the input and output gates start mostly open
    /// (bias +1), the forget gate mostly shut (bias -1), the candidate
    /// kernel starts at an identity center tap, and all recurrent kernels
    /// are scaled down. A cell dropped into a pretrained network then
    /// hands the head familiar features instead of noise.
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        hidden_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "convlstm kernel must be odd, got {kernel}"
            )));
        }
        let mut wx = [ParamId(0); 4];
        let mut wh = [ParamId(0); 4];
        let mut bias = [ParamId(0); 4];
        let gate_bias = [1.0, -1.0, 1.0, 0.0];
        for (gi, gate) in GATE_NAMES.iter().enumerate() {
            let wx_shape = [hidden_channels, in_channels, kernel, kernel];
            let wh_shape = [hidden_channels, hidden_channels, kernel, kernel];
            let mut wx_init = he_tensor::<T>(&wx_shape, conv_fan_in(&wx_shape), rng)
                .map(|v| v * T::from_f64(0.1));
            if gi == 3 {
                // identity center tap on the candidate path
                let center = kernel / 2;
                for c in 0..hidden_channels.min(in_channels) {
                    let idx = ((c * in_channels + c) * kernel + center) * kernel + center;
                    wx_init.data_mut()[idx] = T::ONE;
                }
            }
            wx[gi] = ps.add(format!("{prefix}.wx_{gate}"), wx_init);
            wh[gi] = ps.add(
                format!("{prefix}.wh_{gate}"),
                he_tensor::<T>(&wh_shape, conv_fan_in(&wh_shape), rng)
                    .map(|v| v * T::from_f64(0.1)),
            );
            bias[gi] = ps.add(
                format!("{prefix}.b_{gate}"),
                Tensor::full(&[hidden_channels], T::from_f64(gate_bias[gi])),
            );
        }
        Ok(ConvLstmParams {
            wx,
            wh,
            bias,
            in_channels,
            hidden_channels,
            kernel,
        })
    }

    pub fn nodes<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> ConvLstmNodes {
        ConvLstmNodes {
            wx: self.wx.map(|id| g.param(ps, id)),
            wh: self.wh.map(|id| g.param(ps, id)),
            bias: self.bias.map(|id| g.param(ps, id)),
            kernel: self.kernel,
        }
    }
}

/// Tape-level weight handles (gate order i, f, o, g).
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmNodes {
    pub wx: [NodeId; 4],
    pub wh: [NodeId; 4],
    pub bias: [NodeId; 4],
    pub kernel: usize,
}

/// Hidden and cell state as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl ConvLstmState {
    pub fn zeros<T: Scalar>(
        g: &mut Graph<T>,
        batch: usize,
        hidden_channels: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let h = g.constant(Tensor::zeros(&[batch, hidden_channels, height, width]));
        let c = g.constant(Tensor::zeros(&[batch, hidden_channels, height, width]));
        ConvLstmState { h, c }
    }
}

/// One time step.
pub fn convlstm_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    state: ConvLstmState,
    n: &ConvLstmNodes,
) -> Result<ConvLstmState> {
    let (_, _, xh, xw) = g.value(x).dims4("convlstm_cell")?;
    let (_, _, sh, sw) = g.value(state.h).dims4("convlstm_cell")?;
    if (xh, xw) != (sh, sw) {
        return Err(Error::shape(
            "convlstm_cell",
            format!("input {xh}x{xw} vs state {sh}x{sw}"),
        ));
    }
    let pad = (n.kernel - 1) / 2;
    let mut gates = [None; 4];
    for gi in 0..4 {
        let from_x = g.conv2d(x, n.wx[gi], Some(n.bias[gi]), 1, pad)?;
        let from_h = g.conv2d(state.h, n.wh[gi], None, 1, pad)?;
        let pre = g.add(from_x, from_h)?;
        let kind = if gi == 3 {
            Activation::Tanh
        } else {
            Activation::Sigmoid
        };
        gates[gi] = Some(g.activation(pre, kind));
    }
    let [i, f, o, cand] = gates.map(|v| v.unwrap());
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.activation(c_next, Activation::Tanh);
    let h_next = g.mul(o, c_act)?;
    Ok(ConvLstmState {
        h: h_next,
        c: c_next,
    })
}

/// Fold a step function over `len` time steps, returning every state.
/// Factored out so tests can count cell invocations.
pub fn rollout_with<S: Copy, E>(
    len: usize,
    init: S,
    mut step: impl FnMut(usize, S) -> std::result::Result<S, E>,
) -> std::result::Result<Vec<S>, E> {
    let mut states = Vec::with_capacity(len);
    let mut state = init;
    for t in 0..len {
        state = step(t, state)?;
        states.push(state);
    }
    Ok(states)
}

/// Left-to-right roll-out over a frame-feature sequence. `init` defaults to
/// zeros; every sequence starts fresh (no carry-over between windows).
pub fn convlstm_rollout<T: Scalar>(
    g: &mut Graph<T>,
    seq: &[NodeId],
    n: &ConvLstmNodes,
    init: Option<ConvLstmState>,
) -> Result<Vec<ConvLstmState>> {
    let first = *seq
        .first()
        .ok_or_else(|| Error::shape("convlstm_rollout", "empty sequence"))?;
    let init = match init {
        Some(s) => s,
        None => {
            let (b, _, h, w) = g.value(first).dims4("convlstm_rollout")?;
            let hidden = g.value(n.wx[0]).shape()[0];
            ConvLstmState::zeros(g, b, hidden, h, w)
        }
    };
    rollout_with(seq.len(), init, |t, state| {
        convlstm_cell(g, seq[t], state, n)
    })
}
