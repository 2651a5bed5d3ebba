//! Hierarchical residual backbone with HSCA attention in the bottlenecks
//! and a PAFB fusion chain across the four stage outputs, regressing the
//! 257-dimensional coefficient vector.

mod attention;
mod layers;

pub use attention::{Hsca, HscaTrace, Pafb, PafbTrace};
pub use layers::{check_same_layout, BatchNorm, Conv1x1, Conv2d, GraphBinding, Init, Linear, ParamStore};

use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::coeffs::N_TOTAL;
use crate::container::Container;
use crate::error::{Error, Result};

/// Architecture configuration. The default is a 50-layer bottleneck
/// network at 224 x 224; `tiny()` is the desk-scale variant used by tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub expansion: usize,
    /// Master switch for HSCA modules.
    pub hsca: bool,
    /// Per-stage enable flags (applied on top of the master switch).
    pub hsca_stages: [bool; 4],
    /// Master switch for the PAFB fusion chain.
    pub pafb: bool,
    /// Channel reduction ratio inside PAFB branches.
    pub reduction: usize,
}

impl ArchConfig {
    pub fn full() -> Self {
        ArchConfig {
            input_size: 224,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            expansion: 4,
            hsca: true,
            hsca_stages: [true; 4],
            pafb: true,
            reduction: 4,
        }
    }

    pub fn tiny() -> Self {
        ArchConfig {
            input_size: 32,
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            expansion: 1,
            hsca: true,
            hsca_stages: [true; 4],
            pafb: true,
            reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.stem_channels == 0 || self.expansion == 0 || self.reduction == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % self.expansion != 0 {
                return Err(Error::Config(format!(
                    "stage {i} channels {c} not divisible by expansion {}",
                    self.expansion
                )));
            }
            if i > 0 && c != 2 * self.stage_channels[i - 1] {
                return Err(Error::Config(
                    "stage channels must double per stage".into(),
                ));
            }
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("each stage needs at least one block".into()));
        }
        Ok(())
    }
}

/// A feature tensor (C x H x W).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("feature map", "positive C,H,W", format!("{c}x{h}x{w}")));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// The four stage outputs at scales 1/4, 1/8, 1/16, 1/32 of the input.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 4],
}

impl FeaturePyramid {
    pub fn new(levels: [FeatureMap; 4]) -> Result<Self> {
        for i in 1..4 {
            let (ph, pw) = levels[i - 1].spatial();
            let (h, w) = levels[i].spatial();
            if ph != 2 * h || pw != 2 * w {
                return Err(Error::Data(format!(
                    "pyramid level {i} spatial {h}x{w} is not half of {ph}x{pw}"
                )));
            }
            if levels[i].channels() != 2 * levels[i - 1].channels() {
                return Err(Error::Data(format!(
                    "pyramid level {i} channels {} do not double {}",
                    levels[i].channels(),
                    levels[i - 1].channels()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }
}

struct Bottleneck {
    conv1: Conv1x1,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    hsca: Option<Hsca>,
    conv3: Conv1x1,
    bn3: BatchNorm,
    down: Option<(Conv1x1, BatchNorm)>,
}

impl Bottleneck {
    fn new(name: &str, in_c: usize, mid_c: usize, out_c: usize, stride: usize, hsca: bool) -> Self {
        Bottleneck {
            conv1: Conv1x1 {
                name: format!("{name}.conv1"),
                in_c,
                out_c: mid_c,
                stride: 1,
                bias: false,
            },
            bn1: BatchNorm { name: format!("{name}.bn1"), channels: mid_c },
            conv2: Conv2d {
                name: format!("{name}.conv2"),
                in_c: mid_c,
                out_c: mid_c,
                kernel: 3,
                stride,
                pad: 1,
                bias: false,
            },
            bn2: BatchNorm { name: format!("{name}.bn2"), channels: mid_c },
            hsca: hsca.then(|| Hsca::new(&format!("{name}.hsca"), mid_c)),
            conv3: Conv1x1 {
                name: format!("{name}.conv3"),
                in_c: mid_c,
                out_c,
                stride: 1,
                bias: false,
            },
            bn3: BatchNorm { name: format!("{name}.bn3"), channels: out_c },
            down: (stride != 1 || in_c != out_c).then(|| {
                (
                    Conv1x1 {
                        name: format!("{name}.down"),
                        in_c,
                        out_c,
                        stride,
                        bias: false,
                    },
                    BatchNorm { name: format!("{name}.down_bn"), channels: out_c },
                )
            }),
        }
    }

    fn register(&self, params: &mut ParamStore, state: &mut ParamStore, init: &mut Init) {
        self.conv1.register(params, init);
        self.bn1.register(params, state);
        self.conv2.register(params, init);
        self.bn2.register(params, state);
        if let Some(h) = &self.hsca {
            h.register(params, init);
        }
        self.conv3.register(params, init);
        self.bn3.register(params, state);
        if let Some((conv, bn)) = &self.down {
            conv.register(params, init);
            bn.register(params, state);
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &GraphBinding,
        s: &GraphBinding,
        x: TensorId,
        bn_inputs: &mut Vec<(String, TensorId)>,
    ) -> TensorId {
        let mut h = self.conv1.forward(g, p, x);
        h = self.bn1.forward(g, p, s, h, bn_inputs);
        h = g.relu(h);
        h = self.conv2.forward(g, p, h);
        h = self.bn2.forward(g, p, s, h, bn_inputs);
        h = g.relu(h);
        if let Some(att) = &self.hsca {
            h = att.forward(g, p, h).output;
        }
        h = self.conv3.forward(g, p, h);
        h = self.bn3.forward(g, p, s, h, bn_inputs);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let d = conv.forward(g, p, x);
                bn.forward(g, p, s, d, bn_inputs)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.bn1, &self.bn2, &self.bn3];
        if let Some((_, bn)) = &self.down {
            v.push(bn);
        }
        v
    }
}

/// One full forward pass: output ids plus everything the trainer and the
/// visualizer need to look inside.
#[derive(Debug)]
pub struct ForwardTrace {
    /// The 257-vector.
    pub output: TensorId,
    /// Raw stage outputs (scales 1/4 .. 1/32).
    pub stage_features: [TensorId; 4],
    /// PAFB chain outputs (empty when fusion is disabled).
    pub fused_features: Vec<TensorId>,
    /// Feature map feeding the global pool + head.
    pub head_feature: TensorId,
    /// Batch-norm layer name and pre-normalization activation id.
    pub bn_inputs: Vec<(String, TensorId)>,
}

pub struct Backbone {
    pub config: ArchConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    pafbs: Vec<Pafb>,
    fc: Linear,
    bn_registry: HashMap<String, BatchNorm>,
}

impl Backbone {
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let stem_conv = Conv2d {
            name: "stem.conv".into(),
            in_c: 3,
            out_c: config.stem_channels,
            kernel: 7,
            stride: 2,
            pad: 3,
            bias: false,
        };
        let stem_bn = BatchNorm { name: "stem.bn".into(), channels: config.stem_channels };

        let mut stages = Vec::new();
        let mut in_c = config.stem_channels;
        for (si, &out_c) in config.stage_channels.iter().enumerate() {
            let mid_c = out_c / config.expansion;
            let hsca_on = config.hsca && config.hsca_stages[si];
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage[si] {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    &format!("s{si}.b{bi}"),
                    in_c,
                    mid_c,
                    out_c,
                    stride,
                    hsca_on,
                ));
                in_c = out_c;
            }
            stages.push(blocks);
        }

        let pafbs = if config.pafb {
            (0..3)
                .map(|k| Pafb::new(&format!("pafb{k}"), config.stage_channels[k], config.reduction))
                .collect()
        } else {
            Vec::new()
        };

        let fc = Linear {
            name: "head.fc".into(),
            in_dim: config.stage_channels[3],
            out_dim: N_TOTAL,
            weight_std: 1e-3,
        };

        let mut backbone = Backbone {
            config,
            stem_conv,
            stem_bn,
            stages,
            pafbs,
            fc,
            bn_registry: HashMap::new(),
        };
        backbone.build_bn_registry();
        Ok(backbone)
    }

    fn build_bn_registry(&mut self) {
        let mut reg = HashMap::new();
        reg.insert(self.stem_bn.name.clone(), self.stem_bn.clone());
        for blocks in &self.stages {
            for b in blocks {
                for bn in b.batch_norms() {
                    reg.insert(bn.name.clone(), bn.clone());
                }
            }
        }
        for p in &self.pafbs {
            for bn in p.batch_norms() {
                reg.insert(bn.name.clone(), bn.clone());
            }
        }
        self.bn_registry = reg;
    }

    /// Freshly initialized parameter and state stores.
    pub fn init(&self, seed: u64) -> (ParamStore, ParamStore) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let mut state = ParamStore::new();
        self.stem_conv.register(&mut params, &mut init);
        self.stem_bn.register(&mut params, &mut state);
        for blocks in &self.stages {
            for b in blocks {
                b.register(&mut params, &mut state, &mut init);
            }
        }
        for p in &self.pafbs {
            p.register(&mut params, &mut state, &mut init);
        }
        self.fc.register(&mut params, &mut init);
        (params, state)
    }

    /// Forward pass on a `[3, S, S]` input in [0, 1].
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &GraphBinding,
        state: &GraphBinding,
        input: TensorId,
    ) -> Result<ForwardTrace> {
        let s = self.config.input_size;
        let shape = g.shape(input).to_vec();
        if shape != [3, s, s] {
            return Err(Error::shape(
                "backbone input",
                format!("3 x {s} x {s}"),
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" x "),
            ));
        }

        let mut bn_inputs = Vec::new();
        let mut x = self.stem_conv.forward(g, params, input);
        x = self.stem_bn.forward(g, params, state, x, &mut bn_inputs);
        x = g.relu(x);
        x = g.maxpool2d(x, 3, 2, 1);

        let mut stage_features = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(g, params, state, x, &mut bn_inputs);
            }
            stage_features.push(x);
        }
        let stage_features: [TensorId; 4] = stage_features.try_into().unwrap();

        let mut fused_features = Vec::new();
        let head_feature = if self.config.pafb {
            let mut f = stage_features[0];
            for (k, pafb) in self.pafbs.iter().enumerate() {
                let trace = pafb.forward(g, params, state, f, stage_features[k + 1], &mut bn_inputs);
                f = trace.output;
                fused_features.push(f);
            }
            f
        } else {
            stage_features[3]
        };

        let pooled = g.global_avg_pool(head_feature);
        let output = self.fc.forward(g, params, pooled);

        Ok(ForwardTrace {
            output,
            stage_features,
            fused_features,
            head_feature,
            bn_inputs,
        })
    }

    /// Refresh batch-norm running statistics from a completed forward pass.
    pub fn update_running_stats(&self, state: &mut ParamStore, g: &Graph, trace: &ForwardTrace) {
        for (name, id) in &trace.bn_inputs {
            let bn = &self.bn_registry[name];
            bn.update_stats(state, g.value(*id));
        }
    }

    /// Stage outputs as a validated feature pyramid.
    pub fn pyramid(&self, g: &Graph, trace: &ForwardTrace) -> Result<FeaturePyramid> {
        let as_map = |id: TensorId| -> Result<FeatureMap> {
            let v = g
                .value(id)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| Error::Data("stage feature is not 3-d".into()))?
                .to_owned();
            FeatureMap::new(v)
        };
        FeaturePyramid::new([
            as_map(trace.stage_features[0])?,
            as_map(trace.stage_features[1])?,
            as_map(trace.stage_features[2])?,
            as_map(trace.stage_features[3])?,
        ])
    }
}

/// Channel-weighted activation heatmap of a feature map, upsampled to
/// `out_size` (nearest neighbour) and min-max normalized to [0, 1].
/// Channel weights are the per-channel mean activations.
pub fn feature_activation_map(features: &Array3<f64>, out_size: usize) -> Array2<f64> {
    let (c, h, w) = features.dim();
    let mut heat = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let weight = features.index_axis(ndarray::Axis(0), ch).mean().unwrap();
        for y in 0..h {
            for x in 0..w {
                heat[[y, x]] += weight * features[[ch, y, x]];
            }
        }
    }
    // nearest-neighbour upsample
    let mut up = Array2::<f64>::zeros((out_size, out_size));
    for y in 0..out_size {
        for x in 0..out_size {
            let sy = (y * h) / out_size;
            let sx = (x * w) / out_size;
            up[[y, x]] = heat[[sy.min(h - 1), sx.min(w - 1)]];
        }
    }
    let min = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        up.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        up.fill(0.0);
    }
    up
}

// ---- checkpoint format ----

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    format_version: u32,
    arch: ArchConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<u64>,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    config: &ArchConfig,
    params: &ParamStore,
    state: &ParamStore,
    epoch: Option<u64>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        format_version: 1,
        arch: config.clone(),
        epoch,
    };
    let mut c = Container::new();
    c.metadata = serde_json::to_string(&meta).expect("checkpoint metadata serializes");
    for (name, v) in params.iter() {
        c.insert_f64(&format!("param.{name}"), v.clone())?;
    }
    for (name, v) in state.iter() {
        c.insert_f64(&format!("state.{name}"), v.clone())?;
    }
    c.write_to(path)
}

/// Load a checkpoint; the embedded architecture config is validated and
/// the parameter layout checked against a fresh instantiation.
pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(ArchConfig, ParamStore, ParamStore, Option<u64>)> {
    let c = Container::read_from(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&c.metadata)
        .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    if meta.format_version != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            meta.format_version
        )));
    }
    let mut params = ParamStore::new();
    let mut state = ParamStore::new();
    for name in c.names() {
        if let Some(stripped) = name.strip_prefix("param.") {
            params.insert(stripped, c.get_f64(name)?.clone());
        } else if let Some(stripped) = name.strip_prefix("state.") {
            state.insert(stripped, c.get_f64(name)?.clone());
        }
    }
    let backbone = Backbone::new(meta.arch.clone())?;
    let (fresh_params, fresh_state) = backbone.init(0);
    check_same_layout(&fresh_params, &params)?;
    check_same_layout(&fresh_state, &state)?;
    Ok((meta.arch, params, state, meta.epoch))
}
