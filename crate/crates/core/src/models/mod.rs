//! Layer-descriptor graphs, the small model zoo, and conv -> refconv surgery.

mod network;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refconv::{compute_groups, refocus_dims, RefocusInit};
use crate::tensor::ConvSpec;

pub use network::{ForwardCache, Gradients, Layer, Network, ParamInfo, ParamKind};

/// Zoo model identifiers.
pub const ZOO: [&str; 3] = ["tiny_dw", "tiny_group", "tiny_dense"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        spec: ConvSpec,
        bias: bool,
    },
    #[serde(rename = "refconv")]
    RefConv {
        spec: ConvSpec,
        bias: bool,
        map_kernel: usize,
        map_groups: usize,
        shortcut: bool,
        basis_trainable: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
    },
    Relu,
    GlobalPool,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            LayerKind::Conv { spec, .. } | LayerKind::RefConv { spec, .. } => Some(spec),
            _ => None,
        }
    }

    /// Learnable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        match self {
            LayerKind::Conv { spec, bias } => spec.weight_len() + if *bias { spec.c_out } else { 0 },
            LayerKind::RefConv { spec, bias, map_kernel, map_groups, .. } => {
                let r: usize = refocus_dims(spec, *map_kernel, *map_groups).iter().product();
                spec.weight_len() + r + if *bias { spec.c_out } else { 0 }
            }
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::Linear { inputs, outputs } => inputs * outputs + outputs,
            LayerKind::Relu | LayerKind::GlobalPool => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerDescriptor {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerDescriptor { name: name.into(), kind, trainable: true }
    }
}

/// A feed-forward CNN as an ordered list of layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub model_id: String,
    /// `(channels, height, width)` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerDescriptor>,
}

impl ModelGraph {
    /// Checks unique names, shape compatibility, the refconv kernel rule and
    /// the single terminal classifier.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Shape(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let linears = self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Linear { .. })).count();
        match self.layers.last() {
            Some(LayerDescriptor { kind: LayerKind::Linear { outputs, .. }, .. }) if linears == 1 => {
                if *outputs != self.classes {
                    return Err(Error::Shape(format!("classifier has {outputs} outputs for {} classes", self.classes)));
                }
            }
            _ => return Err(Error::Shape("graph must end in exactly one linear classifier".into())),
        }
        self.shapes().map(|_| ())
    }

    /// Per-sample output shape after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match &l.kind {
                LayerKind::Conv { spec, .. } | LayerKind::RefConv { spec, .. } => {
                    spec.validate()?;
                    if let LayerKind::RefConv { map_kernel, map_groups, .. } = &l.kind {
                        if spec.kernel < 2 {
                            return Err(Error::Geometry(format!("`{}`: 1x1 convs are never refocused", l.name)));
                        }
                        if *map_kernel > spec.kernel || *map_groups != compute_groups(spec)? {
                            return Err(Error::Geometry(format!("`{}`: inconsistent refocusing geometry", l.name)));
                        }
                    }
                    if cur[0] != spec.c_in {
                        return Err(Error::Shape(format!("`{}` expects {} channels, gets {}", l.name, spec.c_in, cur[0])));
                    }
                    let (h, w) = spec.output_hw(cur[1], cur[2])?;
                    [spec.c_out, h, w]
                }
                LayerKind::BatchNorm { channels } => {
                    if *channels != cur[0] {
                        return Err(Error::Shape(format!("`{}` normalizes {channels} channels, gets {}", l.name, cur[0])));
                    }
                    cur
                }
                LayerKind::Relu => cur,
                LayerKind::GlobalPool => [cur[0], 1, 1],
                LayerKind::Linear { inputs, outputs } => {
                    if *inputs != cur.iter().product::<usize>() {
                        return Err(Error::Shape(format!("`{}` expects {inputs} features, gets {cur:?}", l.name)));
                    }
                    [*outputs, 1, 1]
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDescriptor> {
        self.layers.iter().find(|l| l.name == name)
    }
}

struct Builder {
    layers: Vec<LayerDescriptor>,
}

impl Builder {
    fn conv_bn_relu(&mut self, name: &str, spec: ConvSpec) {
        self.layers.push(LayerDescriptor::new(name, LayerKind::Conv { spec, bias: false }));
        self.layers.push(LayerDescriptor::new(format!("{name}_bn"), LayerKind::BatchNorm { channels: spec.c_out }));
        self.layers.push(LayerDescriptor::new(format!("{name}_relu"), LayerKind::Relu));
    }

    fn head(mut self, id: &str, channels: usize) -> Result<ModelGraph> {
        self.layers.push(LayerDescriptor::new("pool", LayerKind::GlobalPool));
        self.layers.push(LayerDescriptor::new("classifier", LayerKind::Linear { inputs: channels, outputs: 10 }));
        let g = ModelGraph { model_id: id.to_string(), input: [3, 32, 32], classes: 10, layers: self.layers };
        g.validate()?;
        Ok(g)
    }
}

/// `(c_in, c_out, stride)` of the six separable blocks.
const SEPARABLE_BLOCKS: [(usize, usize, usize); 6] =
    [(16, 32, 1), (32, 64, 2), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1)];

fn separable(id: &str, spatial_groups: Option<usize>) -> Result<ModelGraph> {
    let mut b = Builder { layers: Vec::new() };
    b.conv_bn_relu("stem", ConvSpec::dense(3, 16, 1)?);
    for (i, &(c_in, c_out, stride)) in SEPARABLE_BLOCKS.iter().enumerate() {
        let g = spatial_groups.unwrap_or(c_in);
        b.conv_bn_relu(&format!("block{}.dw", i + 1), ConvSpec::new(c_in, c_in, 3, stride, 1, g)?);
        b.conv_bn_relu(&format!("block{}.pw", i + 1), ConvSpec::dense(c_in, c_out, 1)?);
    }
    b.head(id, 256)
}

fn plain_dense(id: &str) -> Result<ModelGraph> {
    let mut b = Builder { layers: Vec::new() };
    b.conv_bn_relu("conv1", ConvSpec::dense(3, 32, 3)?);
    b.conv_bn_relu("conv2", ConvSpec::dense(32, 32, 3)?.with_stride(2)?);
    b.conv_bn_relu("conv3", ConvSpec::dense(32, 64, 3)?.with_stride(2)?);
    b.conv_bn_relu("conv4", ConvSpec::dense(64, 64, 3)?.with_stride(2)?);
    b.head(id, 64)
}

/// Builds one of [`ZOO`]: `tiny_dw` (depthwise-separable blocks), `tiny_group`
/// (the same with two groups in every 3x3 conv) or `tiny_dense` (four dense
/// 3x3 convs). All take `3 x 32 x 32` inputs and predict 10 classes.
pub fn build_zoo(model_id: &str) -> Result<ModelGraph> {
    match model_id {
        "tiny_dw" => separable(model_id, None),
        "tiny_group" => separable(model_id, Some(2)),
        "tiny_dense" => plain_dense(model_id),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// Where the basis weights of a refocused layer come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurgeryOptions {
    pub init: RefocusInit,
    pub shortcut: bool,
    pub basis: BasisSource,
    pub basis_trainable: bool,
    pub map_kernel: usize,
    /// Freeze every layer that is not refocused.
    pub freeze_others: bool,
}

impl Default for SurgeryOptions {
    fn default() -> Self {
        SurgeryOptions {
            init: RefocusInit::Xavier,
            shortcut: true,
            basis: BasisSource::Pretrained,
            basis_trainable: false,
            map_kernel: 3,
            freeze_others: false,
        }
    }
}

/// Descriptor-level surgery: every conv with `K >= 2` becomes a refconv.
pub fn surgery_graph(graph: &ModelGraph, options: &SurgeryOptions) -> Result<ModelGraph> {
    let mut out = graph.clone();
    for l in &mut out.layers {
        match l.kind {
            LayerKind::Conv { spec, bias } if spec.kernel >= 2 => {
                if options.map_kernel > spec.kernel {
                    return Err(Error::Geometry(format!(
                        "`{}`: map kernel {} exceeds kernel {}",
                        l.name, options.map_kernel, spec.kernel
                    )));
                }
                l.kind = LayerKind::RefConv {
                    spec,
                    bias,
                    map_kernel: options.map_kernel,
                    map_groups: compute_groups(&spec)?,
                    shortcut: options.shortcut,
                    basis_trainable: options.basis_trainable,
                };
                l.trainable = true;
            }
            LayerKind::RefConv { .. } => {
                return Err(Error::CheckpointMismatch(format!("`{}` is already a refconv layer", l.name)));
            }
            _ => l.trainable = !options.freeze_others,
        }
    }
    out.validate()?;
    Ok(out)
}

/// Descriptor-level merge: every refconv goes back to a plain conv.
pub fn merge_graph(graph: &ModelGraph) -> ModelGraph {
    let mut out = graph.clone();
    for l in &mut out.layers {
        if let LayerKind::RefConv { spec, bias, .. } = l.kind {
            l.kind = LayerKind::Conv { spec, bias };
        }
        l.trainable = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_regimes() {
        let dw = build_zoo("tiny_dw").unwrap();
        for l in &dw.layers {
            if let Some(s) = l.kind.conv_spec() {
                if s.kernel == 3 {
                    assert!(s.c_in == s.c_out && s.c_out == s.groups, "{}", l.name);
                }
            }
        }
        let group = build_zoo("tiny_group").unwrap();
        assert!(group.layers.iter().filter_map(|l| l.kind.conv_spec()).filter(|s| s.kernel == 3).all(|s| s.groups == 2));
        let dense = build_zoo("tiny_dense").unwrap();
        assert!(dense.layers.iter().filter_map(|l| l.kind.conv_spec()).all(|s| s.groups == 1));
        assert!(matches!(build_zoo("resnet50"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn parameter_counts_match_hand_enumeration() {
        // stem 1x1 3->16 + bn, then per block dw 3x3 (c*9) + bn(c) + pw (c*c') + bn(c'), head 256*10+10.
        let mut dw = 3 * 16 + 2 * 16;
        let mut grp = dw;
        for (c, c2, _) in SEPARABLE_BLOCKS {
            dw += c * 9 + 2 * c + c * c2 + 2 * c2;
            grp += c * (c / 2) * 9 + 2 * c + c * c2 + 2 * c2;
        }
        dw += 2570;
        grp += 2570;
        assert_eq!(build_zoo("tiny_dw").unwrap().param_count(), dw);
        assert_eq!(build_zoo("tiny_group").unwrap().param_count(), grp);
        let dense = 3 * 32 * 9 + 64 + 32 * 32 * 9 + 64 + 32 * 64 * 9 + 128 + 64 * 64 * 9 + 128 + 650;
        assert_eq!(build_zoo("tiny_dense").unwrap().param_count(), dense);
    }

    #[test]
    fn shapes_flow_to_classifier() {
        let g = build_zoo("tiny_dense").unwrap();
        let shapes = g.shapes().unwrap();
        assert_eq!(shapes[2], [32, 32, 32]);
        assert_eq!(*shapes.last().unwrap(), [10, 1, 1]);
    }

    #[test]
    fn validation_catches_broken_graphs() {
        let mut g = build_zoo("tiny_dense").unwrap();
        g.layers[1].name = g.layers[0].name.clone();
        assert!(g.validate().is_err());
        let mut g = build_zoo("tiny_dense").unwrap();
        g.layers.pop();
        assert!(g.validate().is_err());
        let mut g = build_zoo("tiny_dense").unwrap();
        g.layers[1].kind = LayerKind::BatchNorm { channels: 7 };
        assert!(g.validate().is_err());
    }

    #[test]
    fn surgery_replaces_only_spatial_convs() {
        for id in ZOO {
            let g = build_zoo(id).unwrap();
            let s = surgery_graph(&g, &SurgeryOptions::default()).unwrap();
            let spatial = g.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { spec, .. } if spec.kernel > 1)).count();
            let refs = s.layers.iter().filter(|l| matches!(l.kind, LayerKind::RefConv { .. })).count();
            assert_eq!(spatial, refs);
            assert!(s.layers.iter().all(|l| !matches!(l.kind, LayerKind::Conv { spec, .. } if spec.kernel > 1)));
            assert_eq!(merge_graph(&s), g);
            assert!(surgery_graph(&s, &SurgeryOptions::default()).is_err());
        }
    }

    #[test]
    fn refconv_descriptor_rejects_pointwise() {
        let mut g = build_zoo("tiny_dw").unwrap();
        let spec = *g.layers[0].kind.conv_spec().unwrap();
        g.layers[0].kind = LayerKind::RefConv {
            spec,
            bias: false,
            map_kernel: 1,
            map_groups: compute_groups(&spec).unwrap(),
            shortcut: true,
            basis_trainable: false,
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn descriptor_json_is_tagged() {
        let g = build_zoo("tiny_dense").unwrap();
        let s = serde_json::to_string(&g.layers[0]).unwrap();
        assert!(s.contains("\"type\":\"conv\""));
        let back: LayerDescriptor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g.layers[0]);
    }
}
