//! Hybrid spatial-channel attention (HSCA) and the progressive attention
//! fusion block (PAFB).

use crate::autodiff::{Graph, TensorId};

use super::layers::{BatchNorm, Conv1x1, GraphBinding, Init, ParamStore};

/// HSCA: a spatial gate from width/height-pooled descriptors followed by a
/// channel gate from a global descriptor.
///
/// Spatial branch: pool over W (C x H) and over H (C x W), concatenate
/// along the pooled axis, one shared 1x1 convolution, sigmoid, split back
/// into per-axis gates, broadcast-multiply both onto the input. Channel
/// branch: global average pool, 1x1 convolution, sigmoid, channel-wise
/// multiply.
#[derive(Debug, Clone)]
pub struct Hsca {
    pub name: String,
    pub channels: usize,
    spatial: Conv1x1,
    channel: Conv1x1,
}

/// Intermediate tensors of one HSCA application, exposed for tests.
pub struct HscaTrace {
    pub gate_h: TensorId,
    pub gate_w: TensorId,
    pub channel_gate: TensorId,
    pub output: TensorId,
}

impl Hsca {
    pub fn new(name: &str, channels: usize) -> Self {
        Hsca {
            name: name.to_string(),
            channels,
            spatial: Conv1x1 {
                name: format!("{name}.spatial"),
                in_c: channels,
                out_c: channels,
                stride: 1,
                bias: true,
            },
            channel: Conv1x1 {
                name: format!("{name}.channel"),
                in_c: channels,
                out_c: channels,
                stride: 1,
                bias: true,
            },
        }
    }

    pub fn register(&self, params: &mut ParamStore, init: &mut Init) {
        self.spatial.register(params, init);
        self.channel.register(params, init);
    }

    pub fn forward(&self, g: &mut Graph, b: &GraphBinding, x: TensorId) -> HscaTrace {
        let shape = g.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(c, self.channels);

        // spatial branch
        let pool_w = g.mean_axis(x, 2); // C x H (pooled along width)
        let pool_h = g.mean_axis(x, 1); // C x W (pooled along height)
        let cat = g.concat(1, &[pool_w, pool_h]); // C x (H + W)
        let cat3 = g.reshape(cat, &[c, h + w, 1]);
        let conv = self.spatial.forward(g, b, cat3);
        let gates = g.sigmoid(conv); // C x (H + W) x 1
        let gate_h = g.slice_axis(gates, 1, 0, h); // C x H x 1
        let gate_w_flat = g.slice_axis(gates, 1, h, w); // C x W x 1
        let gate_w = g.reshape(gate_w_flat, &[c, 1, w]);
        let gated_h = g.mul_bcast(x, gate_h);
        let spatial = g.mul_bcast(gated_h, gate_w);

        // channel branch on the spatially reweighted map
        let gap = g.global_avg_pool(spatial); // C
        let gap3 = g.reshape(gap, &[c, 1, 1]);
        let chan_conv = self.channel.forward(g, b, gap3);
        let channel_gate = g.sigmoid(chan_conv); // C x 1 x 1
        let output = g.mul_bcast(spatial, channel_gate);

        HscaTrace {
            gate_h,
            gate_w,
            channel_gate,
            output,
        }
    }
}

/// PAFB: fuses a high-resolution map (C x H x W) with the next stage's map
/// (2C x H/2 x W/2).
///
/// The high-res map is downsampled by a strided 1x1 convolution that
/// doubles channels; the concatenation of both maps feeds a global branch
/// (GAP, 1x1 convolutions with batch-norm and ReLU) and a local branch
/// (1x1 convolutions at full resolution). Their sum, through a sigmoid,
/// yields fusion weights with `w1 + w2 = 1`.
#[derive(Debug, Clone)]
pub struct Pafb {
    pub name: String,
    pub channels_high: usize,
    down: Conv1x1,
    glob_conv1: Conv1x1,
    glob_bn1: BatchNorm,
    glob_conv2: Conv1x1,
    loc_conv1: Conv1x1,
    loc_conv2: Conv1x1,
}

/// Intermediate tensors of one PAFB application, exposed for tests.
pub struct PafbTrace {
    pub down: TensorId,
    pub refined: TensorId,
    pub omega1: TensorId,
    pub omega2: TensorId,
    pub output: TensorId,
}

impl Pafb {
    pub fn new(name: &str, channels_high: usize, reduction: usize) -> Self {
        let c2 = 2 * channels_high;
        let mid = (c2 / reduction).max(1);
        Pafb {
            name: name.to_string(),
            channels_high,
            down: Conv1x1 {
                name: format!("{name}.down"),
                in_c: channels_high,
                out_c: c2,
                stride: 2,
                bias: true,
            },
            glob_conv1: Conv1x1 {
                name: format!("{name}.glob.conv1"),
                in_c: 2 * c2,
                out_c: mid,
                stride: 1,
                bias: false,
            },
            glob_bn1: BatchNorm {
                name: format!("{name}.glob.bn1"),
                channels: mid,
            },
            glob_conv2: Conv1x1 {
                name: format!("{name}.glob.conv2"),
                in_c: mid,
                out_c: c2,
                stride: 1,
                bias: true,
            },
            loc_conv1: Conv1x1 {
                name: format!("{name}.loc.conv1"),
                in_c: 2 * c2,
                out_c: mid,
                stride: 1,
                bias: true,
            },
            loc_conv2: Conv1x1 {
                name: format!("{name}.loc.conv2"),
                in_c: mid,
                out_c: c2,
                stride: 1,
                bias: true,
            },
        }
    }

    pub fn register(&self, params: &mut ParamStore, state: &mut ParamStore, init: &mut Init) {
        self.down.register(params, init);
        self.glob_conv1.register(params, init);
        self.glob_bn1.register(params, state);
        self.glob_conv2.register(params, init);
        self.loc_conv1.register(params, init);
        self.loc_conv2.register(params, init);
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        vec![&self.glob_bn1]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &GraphBinding,
        state: &GraphBinding,
        f_high: TensorId,
        f_low: TensorId,
        bn_inputs: &mut Vec<(String, TensorId)>,
    ) -> PafbTrace {
        let c2 = 2 * self.channels_high;
        let low_shape = g.shape(f_low).to_vec();
        debug_assert_eq!(low_shape[0], c2, "low map must have doubled channels");

        let down = self.down.forward(g, params, f_high); // 2C x H/2 x W/2
        let combined = g.concat(0, &[f_low, down]); // 4C x H/2 x W/2

        // global branch
        let gap = g.global_avg_pool(combined);
        let gap3 = g.reshape(gap, &[2 * c2, 1, 1]);
        let g1 = self.glob_conv1.forward(g, params, gap3);
        let g1 = self.glob_bn1.forward(g, params, state, g1, bn_inputs);
        let g1 = g.relu(g1);
        let glob = self.glob_conv2.forward(g, params, g1); // c2 x 1 x 1

        // local branch
        let l1 = self.loc_conv1.forward(g, params, combined);
        let l1 = g.relu(l1);
        let loc = self.loc_conv2.forward(g, params, l1); // c2 x H/2 x W/2

        let refined = g.add_bcast(loc, glob);
        let omega1 = g.sigmoid(refined);
        let one = g.constant(ndarray::ArrayD::ones(ndarray::IxDyn(g.shape(omega1))));
        let omega2 = g.sub(one, omega1);

        let high_part = g.mul(omega1, down);
        let low_part = g.mul(omega2, f_low);
        let output = g.add(high_part, low_part);

        PafbTrace {
            down,
            refined,
            omega1,
            omega2,
            output,
        }
    }
}
