//! Architecture builders and the prune-flag topology.
//!
//! A flag `alpha_i` is one Boolean retain vector. Every parameter tensor
//! dimension that must stay locked to it (the producing conv's output
//! dimension, the consuming conv's input dimension, batchnorm vectors,
//! projection shortcuts, the flattened dense rows) references the flag in
//! its [`Dim`]. A pruned network is the same spec with smaller flag lengths.

use serde::{Deserialize, Serialize};

use crate::{Error, MaskSet, Result};

pub type FlagId = usize;

/// One extent of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dim {
    Fixed { size: usize },
    Flag { flag: FlagId },
    /// The flag replicated `times` times in row-major flatten order
    /// (spatial position major, channel minor).
    Tiled { flag: FlagId, times: usize },
}

impl Dim {
    pub fn flag(self) -> Option<FlagId> {
        match self {
            Dim::Fixed { .. } => None,
            Dim::Flag { flag } | Dim::Tiled { flag, .. } => Some(flag),
        }
    }

    pub fn resolve(self, lengths: &[usize]) -> usize {
        match self {
            Dim::Fixed { size } => size,
            Dim::Flag { flag } => lengths[flag],
            Dim::Tiled { flag, times } => lengths[flag] * times,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    DenseWeight,
    DenseBias,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::DenseWeight)
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(
            self,
            ParamRole::BnGamma | ParamRole::BnBeta | ParamRole::BnMean | ParamRole::BnVar
        )
    }
}

/// Which parameters enter `|w|` in the compression factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountPolicy {
    /// Conv kernels plus dense weights and biases.
    #[default]
    Weights,
    /// Every stored tensor, batchnorm included.
    All,
}

impl CountPolicy {
    fn counts(self, role: ParamRole) -> bool {
        match self {
            CountPolicy::Weights => !role.is_batchnorm(),
            CountPolicy::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub role: ParamRole,
    pub dims: Vec<Dim>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv { weight: usize, stride: usize, pad: usize },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Dense { weight: usize, bias: usize },
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of earlier layers feeding this one.
    pub inputs: Vec<usize>,
    pub block: Option<String>,
    /// Flag governing the channel axis of this layer's output, if any.
    pub channel_flag: Option<FlagId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagDecl {
    pub name: String,
    pub base_len: usize,
    /// The conv layer whose output channels this flag decides.
    pub owner: usize,
    /// Post-activation layers whose channels this flag removes; Taylor
    /// features for the flag read these.
    pub feature_layers: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Arch {
    Cnet { channels: usize, depth: usize },
    Resnet20 { width: usize },
}

impl Arch {
    pub fn name(self) -> String {
        match self {
            Arch::Cnet { channels, depth: CNET_DEPTH } => format!("cnet-{channels}"),
            Arch::Cnet { channels, depth } => format!("cnet{depth}-{channels}"),
            Arch::Resnet20 { width } => format!("resnet20-{width}"),
        }
    }
}

/// One (tensor, dimension) locked to a flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DimBinding {
    pub param: usize,
    pub dim: usize,
    pub replicate: usize,
}

pub const CNET_DEPTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    arch: Arch,
    input: InputShape,
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<ParamDecl>,
    flags: Vec<FlagDecl>,
    lengths: Vec<usize>,
}

impl NetworkSpec {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn arch_name(&self) -> String {
        self.arch.name()
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn flags(&self) -> &[FlagDecl] {
        &self.flags
    }

    pub fn flag_count(&self) -> usize {
        self.flags.len()
    }

    /// Current channel count per flag (smaller than the base for pruned nets).
    pub fn flag_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn base_lengths(&self) -> Vec<usize> {
        self.flags.iter().map(|f| f.base_len).collect()
    }

    pub fn max_flag_len(&self) -> usize {
        self.flags.iter().map(|f| f.base_len).max().unwrap_or(0)
    }

    pub fn param_shape(&self, param: usize) -> Vec<usize> {
        self.params[param]
            .dims
            .iter()
            .map(|d| d.resolve(&self.lengths))
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// The same topology with different flag lengths.
    pub fn with_lengths(&self, lengths: &[usize]) -> Result<Self> {
        if lengths.len() != self.flags.len() {
            return Err(Error::Config(format!(
                "{} flag lengths given for {} flags",
                lengths.len(),
                self.flags.len()
            )));
        }
        if let Some(f) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Config(format!("flag {f} would retain no channels")));
        }
        let mut spec = self.clone();
        spec.lengths = lengths.to_vec();
        Ok(spec)
    }

    /// The same network with a different number of output classes.
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("{num_classes} classes; need at least 2")));
        }
        let mut spec = self.clone();
        spec.num_classes = num_classes;
        for p in &mut spec.params {
            match p.role {
                ParamRole::DenseWeight => p.dims[1] = Dim::Fixed { size: num_classes },
                ParamRole::DenseBias => p.dims[0] = Dim::Fixed { size: num_classes },
                _ => {}
            }
        }
        Ok(spec)
    }

    /// Every tensor dimension governed by each flag.
    pub fn topology(&self) -> Vec<Vec<DimBinding>> {
        let mut out = vec![Vec::new(); self.flags.len()];
        for (p, decl) in self.params.iter().enumerate() {
            for (dim, d) in decl.dims.iter().enumerate() {
                match *d {
                    Dim::Fixed { .. } => {}
                    Dim::Flag { flag } => out[flag].push(DimBinding { param: p, dim, replicate: 1 }),
                    Dim::Tiled { flag, times } => out[flag].push(DimBinding {
                        param: p,
                        dim,
                        replicate: times,
                    }),
                }
            }
        }
        out
    }

    /// Flag on output dimension (dim 4) of a conv weight.
    pub fn conv_out_flag(&self, layer: usize) -> Option<FlagId> {
        match self.layers[layer].kind {
            LayerKind::Conv { weight, .. } => self.params[weight].dims[3].flag(),
            _ => None,
        }
    }

    pub fn conv_in_flag(&self, layer: usize) -> Option<FlagId> {
        match self.layers[layer].kind {
            LayerKind::Conv { weight, .. } => self.params[weight].dims[2].flag(),
            _ => None,
        }
    }

    /// Parameter count of the network, or of the network pruned by `masks`.
    pub fn param_count(&self, masks: Option<&MaskSet>) -> Result<u64> {
        self.param_count_with(masks, CountPolicy::default())
    }

    pub fn param_count_with(&self, masks: Option<&MaskSet>, policy: CountPolicy) -> Result<u64> {
        let lengths = match masks {
            None => self.lengths.clone(),
            Some(m) => {
                m.check_lengths(&self.lengths)?;
                m.retained_counts()
            }
        };
        Ok(self.count_for_lengths(&lengths, policy))
    }

    pub fn count_for_lengths(&self, lengths: &[usize], policy: CountPolicy) -> u64 {
        self.params
            .iter()
            .filter(|p| policy.counts(p.role))
            .map(|p| p.dims.iter().map(|d| d.resolve(lengths) as u64).product::<u64>())
            .sum()
    }

    /// Parameters (conv + dense) whose output dimension a flag owns,
    /// relative to the whole network.
    pub fn flag_param_share(&self, flag: FlagId) -> f64 {
        let total = self.count_for_lengths(&self.lengths, CountPolicy::Weights) as f64;
        let owned: u64 = self
            .params
            .iter()
            .filter(|p| p.role == ParamRole::ConvWeight && p.dims[3].flag() == Some(flag))
            .map(|p| p.dims.iter().map(|d| d.resolve(&self.lengths) as u64).product::<u64>())
            .sum();
        owned as f64 / total
    }

    /// Checks every residual add sees identical channel flags on both sides.
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            if layer.kind == LayerKind::Add {
                let flags: Vec<_> = layer
                    .inputs
                    .iter()
                    .map(|&i| self.layers[i].channel_flag)
                    .collect();
                if flags.windows(2).any(|w| w[0] != w[1]) || flags.contains(&None) {
                    return Err(Error::Topology {
                        block: layer.block.clone().unwrap_or_else(|| layer.name.clone()),
                        detail: format!("residual operands carry flags {flags:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Human-readable description: layers, resolved shapes, flags and the
    /// inheritance edges (tensor dimensions locked to another layer's flag).
    pub fn describe(&self) -> serde_json::Value {
        let topo = self.topology();
        let flags: Vec<_> = self
            .flags
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let owner_w = match self.layers[f.owner].kind {
                    LayerKind::Conv { weight, .. } => Some(weight),
                    _ => None,
                };
                let inherited: Vec<String> = topo[i]
                    .iter()
                    .filter(|b| !(Some(b.param) == owner_w && b.dim == 3))
                    .map(|b| format!("{}[{}]", self.params[b.param].name, b.dim + 1))
                    .collect();
                serde_json::json!({
                    "id": i,
                    "name": f.name,
                    "length": self.lengths[i],
                    "base_length": f.base_len,
                    "owner": self.layers[f.owner].name,
                    "inherited_by": inherited,
                })
            })
            .collect();
        let params: Vec<_> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                serde_json::json!({
                    "name": p.name,
                    "role": p.role,
                    "shape": self.param_shape(i),
                    "dims": p.dims,
                })
            })
            .collect();
        let layers: Vec<_> = self
            .layers
            .iter()
            .map(|l| {
                serde_json::json!({
                    "name": l.name,
                    "kind": l.kind,
                    "inputs": l.inputs.iter().map(|&i| self.layers[i].name.clone()).collect::<Vec<_>>(),
                    "block": l.block,
                    "channel_flag": l.channel_flag,
                })
            })
            .collect();
        serde_json::json!({
            "arch": self.arch_name(),
            "input": self.input,
            "num_classes": self.num_classes,
            "layers": layers,
            "params": params,
            "flags": flags,
        })
    }
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<ParamDecl>,
    flags: Vec<FlagDecl>,
    block: Option<String>,
}

impl Builder {
    fn new() -> Self {
        Self {
            layers: vec![Layer {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: vec![],
                block: None,
                channel_flag: None,
            }],
            params: Vec::new(),
            flags: Vec::new(),
            block: None,
        }
    }

    fn layer(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>, flag: Option<FlagId>) -> usize {
        self.layers.push(Layer {
            name,
            kind,
            inputs,
            block: self.block.clone(),
            channel_flag: flag,
        });
        self.layers.len() - 1
    }

    fn param(&mut self, name: String, role: ParamRole, dims: Vec<Dim>) -> usize {
        self.params.push(ParamDecl { name, role, dims });
        self.params.len() - 1
    }

    fn new_flag(&mut self, len: usize) -> FlagId {
        let id = self.flags.len();
        self.flags.push(FlagDecl {
            name: format!("alpha_{id}"),
            base_len: len,
            owner: usize::MAX,
            feature_layers: Vec::new(),
        });
        id
    }

    fn channel_dim(in_flag: Option<FlagId>, in_channels: usize) -> Dim {
        match in_flag {
            Some(flag) => Dim::Flag { flag },
            None => Dim::Fixed { size: in_channels },
        }
    }

    /// Conv whose input channels follow `in_flag` (or the image) and whose
    /// outputs follow `out_flag`.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        input: usize,
        in_dim: Dim,
        out_flag: FlagId,
        k: usize,
        stride: usize,
    ) -> usize {
        let weight = self.param(
            format!("{name}.weight"),
            ParamRole::ConvWeight,
            vec![
                Dim::Fixed { size: k },
                Dim::Fixed { size: k },
                in_dim,
                Dim::Flag { flag: out_flag },
            ],
        );
        self.layer(
            name.to_string(),
            LayerKind::Conv {
                weight,
                stride,
                pad: k / 2,
            },
            vec![input],
            Some(out_flag),
        )
    }

    fn batch_norm(&mut self, name: &str, input: usize, flag: FlagId) -> usize {
        let d = vec![Dim::Flag { flag }];
        let gamma = self.param(format!("{name}.gamma"), ParamRole::BnGamma, d.clone());
        let beta = self.param(format!("{name}.beta"), ParamRole::BnBeta, d.clone());
        let mean = self.param(format!("{name}.running_mean"), ParamRole::BnMean, d.clone());
        let var = self.param(format!("{name}.running_var"), ParamRole::BnVar, d);
        self.layer(
            name.to_string(),
            LayerKind::BatchNorm { gamma, beta, mean, var },
            vec![input],
            Some(flag),
        )
    }

    fn relu(&mut self, name: &str, input: usize) -> usize {
        let flag = self.layers[input].channel_flag;
        self.layer(name.to_string(), LayerKind::Relu, vec![input], flag)
    }

    fn dense_head(&mut self, input: usize, feature_dim: Dim, num_classes: usize) -> usize {
        let weight = self.param(
            "head.dense.weight".into(),
            ParamRole::DenseWeight,
            vec![feature_dim, Dim::Fixed { size: num_classes }],
        );
        let bias = self.param(
            "head.dense.bias".into(),
            ParamRole::DenseBias,
            vec![Dim::Fixed { size: num_classes }],
        );
        self.layer("head.dense".into(), LayerKind::Dense { weight, bias }, vec![input], None)
    }

    fn finish(self, arch: Arch, input: InputShape, num_classes: usize) -> Result<NetworkSpec> {
        let lengths = self.flags.iter().map(|f| f.base_len).collect();
        let spec = NetworkSpec {
            arch,
            input,
            num_classes,
            layers: self.layers,
            params: self.params,
            flags: self.flags,
            lengths,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_common(channels: usize, num_classes: usize, input: InputShape) -> Result<()> {
    if channels < 2 {
        return Err(Error::Config(format!("channel width {channels} < 2")));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("{num_classes} classes; need at least 2")));
    }
    if input.height == 0 || input.width == 0 || input.channels == 0 {
        return Err(Error::Config("empty input shape".into()));
    }
    Ok(())
}

/// C-NET: six 3x3 convs of equal width, each followed by relu, a 2x2
/// max-pool after the second and fourth, then flatten and a dense head.
pub fn build_cnet(channels: usize, num_classes: usize, input: InputShape) -> Result<NetworkSpec> {
    build_cnet_with_depth(channels, CNET_DEPTH, num_classes, input)
}

/// Cylinder network of arbitrary depth; pools follow every second conv
/// except the last.
pub fn build_cnet_with_depth(
    channels: usize,
    depth: usize,
    num_classes: usize,
    input: InputShape,
) -> Result<NetworkSpec> {
    check_common(channels, num_classes, input)?;
    if depth == 0 {
        return Err(Error::Config("C-NET needs at least one conv".into()));
    }
    let pools = (1..depth).filter(|i| i % 2 == 0).count();
    let (mut h, mut w) = (input.height, input.width);
    if h >> pools == 0 || w >> pools == 0 {
        return Err(Error::Config(format!(
            "{}x{} input too small for {pools} pooling stages",
            input.height, input.width
        )));
    }
    let mut b = Builder::new();
    let mut cur = 0;
    let mut prev: Option<FlagId> = None;
    for i in 0..depth {
        let flag = b.new_flag(channels);
        let in_dim = Builder::channel_dim(prev, input.channels);
        let conv = b.conv(&format!("conv{i}"), cur, in_dim, flag, 3, 1);
        let relu = b.relu(&format!("relu{i}"), conv);
        b.flags[flag].owner = conv;
        b.flags[flag].feature_layers.push(relu);
        cur = relu;
        if (i + 1) % 2 == 0 && i + 1 < depth {
            cur = b.layer(format!("pool{i}"), LayerKind::MaxPool { size: 2 }, vec![cur], Some(flag));
            h /= 2;
            w /= 2;
        }
        prev = Some(flag);
    }
    let last = prev.expect("depth >= 1");
    let flat = b.layer("flatten".into(), LayerKind::Flatten, vec![cur], None);
    b.dense_head(flat, Dim::Tiled { flag: last, times: h * w }, num_classes);
    b.finish(Arch::Cnet { channels, depth }, input, num_classes)
}

/// ResNet-20 with blocks of width (w, 2w, 8w): a stem conv, three blocks of
/// three basic units, global average pooling and a dense head. The first
/// unit of each block has a 1x1 projection shortcut; blocks two and three
/// downsample by stride 2 at their first unit.
pub fn build_resnet20(width: usize, num_classes: usize, input: InputShape) -> Result<NetworkSpec> {
    check_common(width, num_classes, input)?;
    if input.height < 4 || input.width < 4 {
        return Err(Error::Config("ResNet-20 input must be at least 4x4".into()));
    }
    let mut b = Builder::new();
    let stem = b.new_flag(width);
    let conv = b.conv("stem.conv", 0, Dim::Fixed { size: input.channels }, stem, 3, 1);
    let bn = b.batch_norm("stem.bn", conv, stem);
    let mut cur = b.relu("stem.relu", bn);
    b.flags[stem].owner = conv;
    b.flags[stem].feature_layers.push(cur);
    let mut stream = stem;

    for (blk, ch) in [width, 2 * width, 8 * width].into_iter().enumerate() {
        let stride = if blk == 0 { 1 } else { 2 };
        for unit in 0..3 {
            let prefix = format!("b{}.u{unit}", blk + 1);
            b.block = Some(prefix.clone());
            let block_in = cur;
            let mid = b.new_flag(ch);
            let s = if unit == 0 { stride } else { 1 };
            let out = if unit == 0 { b.new_flag(ch) } else { stream };

            let ca = b.conv(&format!("{prefix}.conv_a"), block_in, Dim::Flag { flag: stream }, mid, 3, s);
            let bna = b.batch_norm(&format!("{prefix}.bn_a"), ca, mid);
            let ra = b.relu(&format!("{prefix}.relu_a"), bna);
            b.flags[mid].owner = ca;
            b.flags[mid].feature_layers.push(ra);

            let cb = b.conv(&format!("{prefix}.conv_b"), ra, Dim::Flag { flag: mid }, out, 3, 1);
            let bnb = b.batch_norm(&format!("{prefix}.bn_b"), cb, out);

            let shortcut = if unit == 0 {
                let proj = b.conv(&format!("{prefix}.proj"), block_in, Dim::Flag { flag: stream }, out, 1, s);
                b.batch_norm(&format!("{prefix}.proj_bn"), proj, out)
            } else {
                block_in
            };
            let add = b.layer(format!("{prefix}.add"), LayerKind::Add, vec![bnb, shortcut], Some(out));
            cur = b.relu(&format!("{prefix}.relu"), add);
            if unit == 0 {
                b.flags[out].owner = cb;
            }
            b.flags[out].feature_layers.push(cur);
            stream = out;
        }
    }
    b.block = None;
    let gap = b.layer("head.gap".into(), LayerKind::GlobalAvgPool, vec![cur], Some(stream));
    b.dense_head(gap, Dim::Flag { flag: stream }, num_classes);
    b.finish(Arch::Resnet20 { width }, input, num_classes)
}

pub fn build(arch: Arch, num_classes: usize, input: InputShape) -> Result<NetworkSpec> {
    match arch {
        Arch::Cnet { channels, depth } => build_cnet_with_depth(channels, depth, num_classes, input),
        Arch::Resnet20 { width } => build_resnet20(width, num_classes, input),
    }
}
