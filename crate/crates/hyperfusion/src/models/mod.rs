//! The fusion model zoo: six variants over two tasks at toy 2D scale.
//!
//! Regression backbone: three conv blocks (conv-relu x2, batch norm, max
//! pool) followed by four linear layers; the hypernetwork variant generates
//! all four linear layers' parameters. Classification backbone: a conv stem
//! and four pre-activation residual blocks followed by two linear layers and
//! a softmax; the hypernetwork variant generates the last block's
//! down-sample convolution. Conditioning baselines (FiLM-like, DAFT-like)
//! modulate the last block's feature maps with per-channel affine
//! transforms; the concatenation baseline appends the tabular vector before
//! the second-to-last linear layer.

pub mod checkpoint;
pub mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypernet::{EmbedActivation, HyperConv2d, HyperError, HyperLinear};
use crate::params::{ParameterStore, Partition};
use crate::rng::{self, Prng};
use crate::tape::{BnStats, Mode, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

use layers::{BatchNormLayer, CondGenerator, Conv2dLayer, LinearLayer, PReluLayer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Hyper(#[from] HyperError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("hyperfusion models need training tabular data to initialize the heads")]
    MissingTrainTabular,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("model mode is unset; build the tape with Tape::train or Tape::eval")]
    ModeUnset,
    #[error("input shape {got:?} does not match the spec's {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ImageOnly,
    TabularOnly,
    Concatenation,
    Film,
    Daft,
    Hyperfusion,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ImageOnly,
        Variant::TabularOnly,
        Variant::Concatenation,
        Variant::Film,
        Variant::Daft,
        Variant::Hyperfusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ImageOnly => "image-only",
            Variant::TabularOnly => "tabular-only",
            Variant::Concatenation => "concatenation",
            Variant::Film => "film",
            Variant::Daft => "daft",
            Variant::Hyperfusion => "hyperfusion",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ModelError> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "classes")]
pub enum TaskKind {
    Regression,
    Classification(usize),
}

impl TaskKind {
    pub fn output_width(&self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification(c) => *c,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification(_))
    }
}

/// Declarative description of one model variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub variant: Variant,
    /// Image height/width (single channel).
    pub image_hw: (usize, usize),
    /// Encoded tabular width fed to the model.
    pub tabular_width: usize,
    /// Hyperlayer placement; non-empty only for the hyperfusion variant.
    pub hyper_layers: Vec<String>,
    /// Regression: the three block channel counts. Classification: the four
    /// residual block channel counts (the stem matches the first).
    pub conv_channels: Vec<usize>,
    /// Regression: hidden widths of the first three linear layers (the
    /// fourth maps to the output). Classification: [fc1 width].
    pub linear_widths: Vec<usize>,
    /// Embedding net widths for hyper layers (last entry is l).
    pub embed_widths: Vec<usize>,
    /// Hidden width of the FiLM/DAFT generator.
    pub cond_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelSpec {
    /// Toy-scale regression spec (32x32 images, channels 4/8/16, four
    /// linear layers 256-32-16-8-1).
    pub fn regression(variant: Variant, tabular_width: usize, seed: u64) -> ModelSpec {
        let hyper_layers = if variant == Variant::Hyperfusion {
            vec![
                "linear1".into(),
                "linear2".into(),
                "linear3".into(),
                "linear4".into(),
            ]
        } else {
            vec![]
        };
        ModelSpec {
            task: TaskKind::Regression,
            variant,
            image_hw: (32, 32),
            tabular_width,
            hyper_layers,
            conv_channels: vec![4, 8, 16],
            linear_widths: vec![32, 16, 8],
            embed_widths: vec![1],
            cond_hidden: 16,
            dropout: 0.2,
            seed,
        }
    }

    /// Toy-scale classification spec (32x32 images, residual channels
    /// 4/8/16/32, two linear layers).
    pub fn classification(
        variant: Variant,
        classes: usize,
        tabular_width: usize,
        seed: u64,
    ) -> ModelSpec {
        let hyper_layers = if variant == Variant::Hyperfusion {
            vec!["block4.downsample".into()]
        } else {
            vec![]
        };
        ModelSpec {
            task: TaskKind::Classification(classes),
            variant,
            image_hw: (32, 32),
            tabular_width,
            hyper_layers,
            conv_channels: vec![4, 8, 16, 32],
            linear_widths: vec![16],
            embed_widths: vec![16, 8],
            cond_hidden: 16,
            dropout: 0.2,
            seed,
        }
    }

    /// Reduced plan for finite-difference checks: same structure, small
    /// enough that perturbing every parameter stays cheap.
    pub fn tiny(&self) -> ModelSpec {
        let mut s = self.clone();
        s.image_hw = (12, 12);
        match self.task {
            TaskKind::Regression => {
                s.conv_channels = vec![2, 3, 4];
                s.linear_widths = vec![6, 5, 4];
            }
            TaskKind::Classification(_) => {
                s.conv_channels = vec![2, 3, 4, 5];
                s.linear_widths = vec![6];
            }
        }
        if !s.embed_widths.is_empty() && s.embed_widths.len() > 1 {
            s.embed_widths = vec![4, 3.min(s.tabular_width)];
        }
        s.cond_hidden = 5;
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let TaskKind::Classification(c) = self.task {
            if !(2..=3).contains(&c) {
                return Err(ModelError::InvalidSpec(format!(
                    "classification supports 2 or 3 classes, got {c}"
                )));
            }
        }
        let want_hyper = self.variant == Variant::Hyperfusion;
        if want_hyper == self.hyper_layers.is_empty() {
            return Err(ModelError::InvalidSpec(
                "hyperlayer placement must be non-empty exactly for the hyperfusion variant"
                    .into(),
            ));
        }
        let expected_blocks = match self.task {
            TaskKind::Regression => 3,
            TaskKind::Classification(_) => 4,
        };
        if self.conv_channels.len() != expected_blocks {
            return Err(ModelError::InvalidSpec(format!(
                "expected {expected_blocks} conv channel entries, got {}",
                self.conv_channels.len()
            )));
        }
        if self.task == TaskKind::Regression && self.linear_widths.len() != 3 {
            return Err(ModelError::InvalidSpec(
                "regression needs three linear hidden widths".into(),
            ));
        }
        if self.task.is_classification() && self.linear_widths.len() != 1 {
            return Err(ModelError::InvalidSpec(
                "classification needs one linear hidden width".into(),
            ));
        }
        if self.tabular_width == 0 {
            return Err(ModelError::InvalidSpec("tabular width must be >= 1".into()));
        }
        let (h, w) = self.image_hw;
        let min = match self.task {
            TaskKind::Regression => 8,
            TaskKind::Classification(_) => 12,
        };
        if h < min || w < min {
            return Err(ModelError::InvalidSpec(format!(
                "image {h}x{w} too small for the backbone (min {min})"
            )));
        }
        Ok(())
    }
}

// ---- concrete architectures --------------------------------------------

struct VggBlock {
    conv_a: Conv2dLayer,
    conv_b: Conv2dLayer,
    bn: BatchNormLayer,
}

enum LinearKind {
    Plain(LinearLayer),
    Hyper(HyperLinear),
}

struct RegressionArch {
    blocks: Vec<VggBlock>,
    linears: Vec<LinearKind>,
    /// Linear index before which the tabular vector is concatenated.
    concat_before: Option<usize>,
    cond: Option<CondGenerator>,
    /// Feature width after flattening the conv stack.
    flat_width: usize,
}

enum Downsample {
    Plain(Conv2dLayer),
    Hyper(HyperConv2d),
}

struct ResBlock {
    name: String,
    bn1: BatchNormLayer,
    conv1: Conv2dLayer,
    bn2: BatchNormLayer,
    conv2: Conv2dLayer,
    downsample: Option<Downsample>,
}

struct ClassificationArch {
    stem_conv: Conv2dLayer,
    stem_bn: BatchNormLayer,
    blocks: Vec<ResBlock>,
    fc1: LinearLayer,
    fc2: LinearLayer,
    concat_before_fc1: bool,
    cond: Option<CondGenerator>,
}

struct MlpArch {
    layers: Vec<LinearLayer>,
    prelus: Vec<PReluLayer>,
}

enum Arch {
    Regression(RegressionArch),
    Classification(ClassificationArch),
    TabularOnly(MlpArch),
}

/// How to populate parameters at build time.
pub enum BuildInit<'a> {
    /// Seeded random initialization; hyperfusion variants additionally need
    /// the encoded training tabular matrix to estimate Var(e(T)).
    Random { train_tabular: Option<&'a Tensor> },
    /// Structure only; values come from a checkpoint.
    Zeros,
}

/// One instantiated fusion model: spec, parameters, and layer graph.
pub struct FusionModel {
    pub spec: ModelSpec,
    pub store: ParameterStore,
    arch: Arch,
}

impl FusionModel {
    pub fn build(spec: &ModelSpec, init: BuildInit) -> Result<FusionModel, ModelError> {
        spec.validate()?;
        let mut rng = rng::seeded(spec.seed);
        let mut store = ParameterStore::new();
        let arch = match (spec.task, spec.variant) {
            (_, Variant::TabularOnly) => Arch::TabularOnly(Self::build_mlp(spec, &mut store, &mut rng)),
            (TaskKind::Regression, _) => {
                Arch::Regression(Self::build_regression(spec, &mut store, &mut rng)?)
            }
            (TaskKind::Classification(_), _) => {
                Arch::Classification(Self::build_classification(spec, &mut store, &mut rng)?)
            }
        };
        let mut model = FusionModel {
            spec: spec.clone(),
            store,
            arch,
        };
        match init {
            BuildInit::Random { train_tabular } => {
                if spec.variant == Variant::Hyperfusion {
                    let tab = train_tabular.ok_or(ModelError::MissingTrainTabular)?;
                    if tab.shape()[1] != spec.tabular_width {
                        return Err(ModelError::InputShape {
                            expected: vec![0, spec.tabular_width],
                            got: tab.shape().to_vec(),
                        });
                    }
                    model.init_hyper_heads(tab, &mut rng)?;
                }
            }
            BuildInit::Zeros => {
                for p in model.store.iter_mut() {
                    p.value = Tensor::zeros(p.value.shape());
                }
            }
        }
        Ok(model)
    }

    fn build_mlp(spec: &ModelSpec, store: &mut ParameterStore, rng: &mut Prng) -> MlpArch {
        let hidden: Vec<usize> = match spec.task {
            TaskKind::Regression => vec![16, 8],
            TaskKind::Classification(_) => vec![32, 16],
        };
        let mut layers = Vec::new();
        let mut prelus = Vec::new();
        let mut w_in = spec.tabular_width;
        for (i, &w) in hidden.iter().enumerate() {
            let l = LinearLayer::new(&format!("mlp.l{i}"), w_in, w);
            l.register(store, rng);
            let p = PReluLayer::new(&format!("mlp.prelu{i}"));
            p.register(store, rng);
            layers.push(l);
            prelus.push(p);
            w_in = w;
        }
        let out = LinearLayer::new(&format!("mlp.l{}", hidden.len()), w_in, spec.task.output_width());
        out.register(store, rng);
        layers.push(out);
        MlpArch { layers, prelus }
    }

    fn build_regression(
        spec: &ModelSpec,
        store: &mut ParameterStore,
        rng: &mut Prng,
    ) -> Result<RegressionArch, ModelError> {
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &ch) in spec.conv_channels.iter().enumerate() {
            let conv_a = Conv2dLayer::new(&format!("conv{}a", i + 1), in_ch, ch, 3, 1, 1);
            let conv_b = Conv2dLayer::new(&format!("conv{}b", i + 1), ch, ch, 3, 1, 1);
            let bn = BatchNormLayer::new(&format!("bn{}", i + 1), ch);
            conv_a.register(store, rng);
            conv_b.register(store, rng);
            bn.register(store, rng);
            blocks.push(VggBlock { conv_a, conv_b, bn });
            in_ch = ch;
        }
        let (h, w) = spec.image_hw;
        let (fh, fw) = (h >> spec.conv_channels.len(), w >> spec.conv_channels.len());
        if fh == 0 || fw == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "image {h}x{w} collapses after {} max pools",
                spec.conv_channels.len()
            )));
        }
        let flat_width = in_ch * fh * fw;

        let cond = match spec.variant {
            Variant::Film => Some(CondGenerator::new(
                "cond",
                spec.tabular_width,
                spec.cond_hidden,
                in_ch,
            )),
            Variant::Daft => Some(CondGenerator::new(
                "cond",
                spec.tabular_width + in_ch,
                spec.cond_hidden,
                in_ch,
            )),
            _ => None,
        };
        if let Some(c) = &cond {
            c.register(store, rng);
        }

        // Four linear layers; the concatenation variant widens the
        // second-to-last one by the tabular width.
        let mut widths = vec![flat_width];
        widths.extend_from_slice(&spec.linear_widths);
        widths.push(spec.task.output_width());
        let n_linears = widths.len() - 1; // 4
        let concat_before = match spec.variant {
            Variant::Concatenation => Some(n_linears - 2),
            _ => None,
        };
        let mut linears = Vec::new();
        for i in 0..n_linears {
            let name = format!("linear{}", i + 1);
            let mut in_f = widths[i];
            if concat_before == Some(i) {
                in_f += spec.tabular_width;
            }
            let out_f = widths[i + 1];
            if spec.hyper_layers.contains(&name) {
                let hl = HyperLinear::new(
                    &format!("hyper.{name}"),
                    in_f,
                    out_f,
                    spec.tabular_width,
                    spec.embed_widths.clone(),
                    if spec.embed_widths.len() > 1 {
                        EmbedActivation::PRelu
                    } else {
                        EmbedActivation::Identity
                    },
                )?;
                hl.register(store, rng);
                linears.push(LinearKind::Hyper(hl));
            } else {
                let l = LinearLayer::new(&name, in_f, out_f);
                l.register(store, rng);
                linears.push(LinearKind::Plain(l));
            }
        }
        Ok(RegressionArch {
            blocks,
            linears,
            concat_before,
            cond,
            flat_width,
        })
    }

    fn build_classification(
        spec: &ModelSpec,
        store: &mut ParameterStore,
        rng: &mut Prng,
    ) -> Result<ClassificationArch, ModelError> {
        let stem_ch = spec.conv_channels[0];
        let stem_conv = Conv2dLayer::new("stem.conv", 1, stem_ch, 3, 1, 1);
        let stem_bn = BatchNormLayer::new("stem.bn", stem_ch);
        stem_conv.register(store, rng);
        stem_bn.register(store, rng);

        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (i, &ch) in spec.conv_channels.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let stride = if i == 0 { 1 } else { 2 };
            let bn1 = BatchNormLayer::new(&format!("{name}.bn1"), in_ch);
            let conv1 = Conv2dLayer::new(&format!("{name}.conv1"), in_ch, ch, 3, stride, 1);
            let bn2 = BatchNormLayer::new(&format!("{name}.bn2"), ch);
            let conv2 = Conv2dLayer::new(&format!("{name}.conv2"), ch, ch, 3, 1, 1);
            bn1.register(store, rng);
            conv1.register(store, rng);
            bn2.register(store, rng);
            conv2.register(store, rng);
            let ds_name = format!("{name}.downsample");
            let downsample = if stride != 1 || in_ch != ch {
                if spec.hyper_layers.contains(&ds_name) {
                    let hc = HyperConv2d::new(
                        &format!("hyper.{ds_name}"),
                        in_ch,
                        ch,
                        1,
                        stride,
                        0,
                        spec.tabular_width,
                        spec.embed_widths.clone(),
                        if spec.embed_widths.len() > 1 {
                            EmbedActivation::PRelu
                        } else {
                            EmbedActivation::Identity
                        },
                    )?;
                    hc.register(store, rng);
                    Some(Downsample::Hyper(hc))
                } else {
                    let c = Conv2dLayer::new(&ds_name, in_ch, ch, 1, stride, 0);
                    c.register(store, rng);
                    Some(Downsample::Plain(c))
                }
            } else {
                if spec.hyper_layers.contains(&ds_name) {
                    return Err(ModelError::InvalidSpec(format!(
                        "{ds_name} has no down-sample convolution to generate"
                    )));
                }
                None
            };
            blocks.push(ResBlock {
                name,
                bn1,
                conv1,
                bn2,
                conv2,
                downsample,
            });
            in_ch = ch;
        }

        // Reject hyper placements that matched nothing.
        for hl in &spec.hyper_layers {
            let known = blocks.iter().any(|b| format!("{}.downsample", b.name) == *hl);
            if !known {
                return Err(ModelError::InvalidSpec(format!(
                    "hyperlayer `{hl}` does not name a generatable layer"
                )));
            }
        }

        let cond = match spec.variant {
            Variant::Film => Some(CondGenerator::new(
                "cond",
                spec.tabular_width,
                spec.cond_hidden,
                in_ch,
            )),
            Variant::Daft => Some(CondGenerator::new(
                "cond",
                spec.tabular_width + in_ch,
                spec.cond_hidden,
                in_ch,
            )),
            _ => None,
        };
        if let Some(c) = &cond {
            c.register(store, rng);
        }

        let concat_before_fc1 = spec.variant == Variant::Concatenation;
        let fc1_in = in_ch + if concat_before_fc1 { spec.tabular_width } else { 0 };
        let fc1 = LinearLayer::new("fc1", fc1_in, spec.linear_widths[0]);
        let fc2 = LinearLayer::new("fc2", spec.linear_widths[0], spec.task.output_width());
        fc1.register(store, rng);
        fc2.register(store, rng);

        Ok(ClassificationArch {
            stem_conv,
            stem_bn,
            blocks,
            fc1,
            fc2,
            concat_before_fc1,
            cond,
        })
    }

    fn init_hyper_heads(&mut self, train_tabular: &Tensor, rng: &mut Prng) -> Result<(), ModelError> {
        match &self.arch {
            Arch::Regression(arch) => {
                for l in &arch.linears {
                    if let LinearKind::Hyper(hl) = l {
                        hl.init_heads(&mut self.store, train_tabular, rng)?;
                    }
                }
            }
            Arch::Classification(arch) => {
                for b in &arch.blocks {
                    if let Some(Downsample::Hyper(hc)) = &b.downsample {
                        hc.init_heads(&mut self.store, train_tabular, rng)?;
                    }
                }
            }
            Arch::TabularOnly(_) => {}
        }
        Ok(())
    }

    /// Number of hyper-conditioned layers in this model.
    pub fn hyper_layer_count(&self) -> usize {
        match &self.arch {
            Arch::Regression(a) => a
                .linears
                .iter()
                .filter(|l| matches!(l, LinearKind::Hyper(_)))
                .count(),
            Arch::Classification(a) => a
                .blocks
                .iter()
                .filter(|b| matches!(b.downsample, Some(Downsample::Hyper(_))))
                .count(),
            Arch::TabularOnly(_) => 0,
        }
    }

    /// Record one forward pass on `tape`. Train-mode batch-norm statistic
    /// updates land in `bn_sink`; commit them with [`FusionModel::commit_bn`].
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        tabular: &Tensor,
        bn_sink: &mut Vec<(String, BnStats)>,
    ) -> Result<NodeId, ModelError> {
        if tape.mode().is_none() {
            return Err(ModelError::ModeUnset);
        }
        let (h, w) = self.spec.image_hw;
        if images.rank() != 4 || images.shape()[1] != 1 || images.shape()[2] != h || images.shape()[3] != w
        {
            return Err(ModelError::InputShape {
                expected: vec![0, 1, h, w],
                got: images.shape().to_vec(),
            });
        }
        if tabular.rank() != 2 || tabular.shape()[1] != self.spec.tabular_width {
            return Err(ModelError::InputShape {
                expected: vec![0, self.spec.tabular_width],
                got: tabular.shape().to_vec(),
            });
        }
        if images.shape()[0] != tabular.shape()[0] {
            return Err(ModelError::InputShape {
                expected: vec![images.shape()[0]],
                got: vec![tabular.shape()[0]],
            });
        }
        let x = tape.leaf(images.clone());
        let t = tape.leaf(tabular.clone());
        self.forward_nodes(tape, x, t, bn_sink)
    }

    fn forward_nodes(
        &self,
        tape: &mut Tape,
        x: NodeId,
        t: NodeId,
        bn_sink: &mut Vec<(String, BnStats)>,
    ) -> Result<NodeId, ModelError> {
        let store = &self.store;
        match &self.arch {
            Arch::TabularOnly(mlp) => {
                let mut h = t;
                for (i, layer) in mlp.layers.iter().enumerate() {
                    h = layer.forward(tape, store, h)?;
                    if i < mlp.prelus.len() {
                        h = mlp.prelus[i].forward(tape, store, h)?;
                    }
                }
                if self.spec.task.is_classification() {
                    h = tape.softmax(h)?;
                }
                Ok(h)
            }
            Arch::Regression(arch) => {
                let mut feat = x;
                for block in &arch.blocks {
                    feat = block.conv_a.forward(tape, store, feat)?;
                    feat = tape.relu(feat);
                    feat = block.conv_b.forward(tape, store, feat)?;
                    feat = tape.relu(feat);
                    feat = block.bn.forward(tape, store, feat, bn_sink)?;
                    feat = tape.max_pool2d(feat, 2, 2)?;
                }
                if let Some(cond) = &arch.cond {
                    feat = self.modulate(tape, cond, feat, t)?;
                }
                feat = tape.dropout(feat, self.spec.dropout)?;
                let n = tape.value(feat).shape()[0];
                let mut h = tape.reshape(feat, &[n, arch.flat_width])?;
                let last = arch.linears.len() - 1;
                for (i, layer) in arch.linears.iter().enumerate() {
                    if arch.concat_before == Some(i) {
                        h = tape.concat_cols(h, t)?;
                    }
                    h = match layer {
                        LinearKind::Plain(l) => l.forward(tape, store, h)?,
                        LinearKind::Hyper(hl) => hl.forward(tape, store, h, t)?,
                    };
                    if i < last {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            Arch::Classification(arch) => {
                let mut feat = arch.stem_conv.forward(tape, store, x)?;
                feat = arch.stem_bn.forward(tape, store, feat, bn_sink)?;
                feat = tape.relu(feat);
                feat = tape.max_pool2d(feat, 2, 2)?;
                for block in &arch.blocks {
                    let pre = block.bn1.forward(tape, store, feat, bn_sink)?;
                    let act = tape.relu(pre);
                    let mut path = block.conv1.forward(tape, store, act)?;
                    path = block.bn2.forward(tape, store, path, bn_sink)?;
                    path = tape.relu(path);
                    path = block.conv2.forward(tape, store, path)?;
                    let shortcut = match &block.downsample {
                        None => feat,
                        Some(Downsample::Plain(conv)) => conv.forward(tape, store, act)?,
                        Some(Downsample::Hyper(hc)) => hc.forward(tape, store, act, t)?,
                    };
                    feat = tape.add(path, shortcut)?;
                }
                if let Some(cond) = &arch.cond {
                    feat = self.modulate(tape, cond, feat, t)?;
                }
                let mut h = tape.global_avg_pool(feat)?;
                if arch.concat_before_fc1 {
                    h = tape.concat_cols(h, t)?;
                }
                h = tape.dropout(h, self.spec.dropout)?;
                h = arch.fc1.forward(tape, store, h)?;
                h = tape.relu(h);
                h = tape.dropout(h, self.spec.dropout)?;
                h = arch.fc2.forward(tape, store, h)?;
                Ok(tape.softmax(h)?)
            }
        }
    }

    /// Apply the FiLM/DAFT per-channel modulation to feature maps.
    fn modulate(
        &self,
        tape: &mut Tape,
        cond: &CondGenerator,
        feat: NodeId,
        t: NodeId,
    ) -> Result<NodeId, ModelError> {
        let cond_input = match self.spec.variant {
            Variant::Film => t,
            Variant::Daft => {
                let pooled = tape.global_avg_pool(feat)?;
                tape.concat_cols(t, pooled)?
            }
            _ => unreachable!("modulation only exists for film/daft"),
        };
        let (gamma, beta) = cond.forward(tape, &self.store, cond_input)?;
        Ok(tape.channel_affine(feat, gamma, beta)?)
    }

    /// Commit train-mode batch-norm running statistics back into the store.
    pub fn commit_bn(&mut self, updates: &[(String, BnStats)]) -> Result<(), ModelError> {
        BatchNormLayer::commit(&mut self.store, updates)?;
        Ok(())
    }

    /// Eval-mode prediction; safe for concurrent use (`&self`, no mutation).
    pub fn predict(&self, images: &Tensor, tabular: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::eval();
        let mut sink = Vec::new();
        let out = self.forward_on(&mut tape, images, tabular, &mut sink)?;
        debug_assert!(sink.is_empty());
        Ok(tape.value(out).clone())
    }

    /// Train-mode forward returning (tape, output node); the caller builds
    /// the loss on the same tape. Batch-norm updates are committed here.
    pub fn forward_train(
        &mut self,
        seed: u64,
        images: &Tensor,
        tabular: &Tensor,
    ) -> Result<(Tape, NodeId), ModelError> {
        let mut tape = Tape::train(seed);
        let mut sink = Vec::new();
        let out = self.forward_on(&mut tape, images, tabular, &mut sink)?;
        self.commit_bn(&sink)?;
        Ok((tape, out))
    }

    /// Layers eligible for entropy-based hyperlayer-position ranking:
    /// every convolution and linear layer of the image backbone.
    pub fn candidate_layers(&self) -> Vec<String> {
        match &self.arch {
            Arch::Regression(arch) => {
                let mut out = Vec::new();
                for b in &arch.blocks {
                    out.push(b.conv_a.name.clone());
                    out.push(b.conv_b.name.clone());
                }
                for l in &arch.linears {
                    if let LinearKind::Plain(l) = l {
                        out.push(l.name.clone());
                    }
                }
                out
            }
            Arch::Classification(arch) => {
                let mut out = vec![arch.stem_conv.name.clone()];
                for b in &arch.blocks {
                    out.push(b.conv1.name.clone());
                    out.push(b.conv2.name.clone());
                    if let Some(Downsample::Plain(c)) = &b.downsample {
                        out.push(c.name.clone());
                    }
                }
                out.push(arch.fc1.name.clone());
                out.push(arch.fc2.name.clone());
                out
            }
            Arch::TabularOnly(mlp) => mlp.layers.iter().map(|l| l.name.clone()).collect(),
        }
    }

    /// Re-initialize one candidate layer in place (fan-in uniform).
    pub fn reinit_layer(&mut self, layer: &str, rng: &mut Prng) -> Result<(), ModelError> {
        match &self.arch {
            Arch::Regression(arch) => {
                for b in &arch.blocks {
                    if b.conv_a.name == layer {
                        return Ok(b.conv_a.reinit(&mut self.store, rng)?);
                    }
                    if b.conv_b.name == layer {
                        return Ok(b.conv_b.reinit(&mut self.store, rng)?);
                    }
                }
                for l in &arch.linears {
                    if let LinearKind::Plain(l) = l {
                        if l.name == layer {
                            return Ok(l.reinit(&mut self.store, rng)?);
                        }
                    }
                }
            }
            Arch::Classification(arch) => {
                if arch.stem_conv.name == layer {
                    return Ok(arch.stem_conv.reinit(&mut self.store, rng)?);
                }
                for b in &arch.blocks {
                    for conv in [&b.conv1, &b.conv2] {
                        if conv.name == layer {
                            return Ok(conv.reinit(&mut self.store, rng)?);
                        }
                    }
                    if let Some(Downsample::Plain(c)) = &b.downsample {
                        if c.name == layer {
                            return Ok(c.reinit(&mut self.store, rng)?);
                        }
                    }
                }
                for fc in [&arch.fc1, &arch.fc2] {
                    if fc.name == layer {
                        return Ok(fc.reinit(&mut self.store, rng)?);
                    }
                }
            }
            Arch::TabularOnly(mlp) => {
                for l in &mlp.layers {
                    if l.name == layer {
                        return Ok(l.reinit(&mut self.store, rng)?);
                    }
                }
            }
        }
        Err(ModelError::UnknownLayer(layer.to_string()))
    }

    /// Partition hygiene: hypernetwork parameters (and only those) sit in
    /// phi; generated parameters never appear trainable or regularized; no
    /// trainable parameter outside `hyper.` prefixes claims phi.
    pub fn partition_audit(&self) -> Result<(), ModelError> {
        for p in self.store.iter() {
            let is_hyper_owned = p.name.starts_with("hyper.");
            match p.partition {
                Partition::ThetaH => {
                    if p.trainable || p.regularized {
                        return Err(ModelError::InvalidSpec(format!(
                            "generated parameter `{}` is trainable/regularized",
                            p.name
                        )));
                    }
                }
                Partition::Phi => {
                    if !is_hyper_owned {
                        return Err(ModelError::InvalidSpec(format!(
                            "phi parameter `{}` outside a hyper layer",
                            p.name
                        )));
                    }
                }
                Partition::ThetaP => {
                    if is_hyper_owned {
                        return Err(ModelError::InvalidSpec(format!(
                            "hyper layer parameter `{}` not in phi",
                            p.name
                        )));
                    }
                }
            }
        }
        if self.spec.variant != Variant::Hyperfusion {
            if self.store.iter().any(|p| p.partition == Partition::Phi) {
                return Err(ModelError::InvalidSpec(
                    "non-hyperfusion variant owns phi parameters".into(),
                ));
            }
        } else if self.hyper_layer_count() != self.spec.hyper_layers.len() {
            return Err(ModelError::InvalidSpec(format!(
                "spec places {} hyperlayers but the model built {}",
                self.spec.hyper_layers.len(),
                self.hyper_layer_count()
            )));
        }
        Ok(())
    }

    /// Test hook: zero the conditioning generator so gamma = 1, beta = 0.
    pub fn force_identity_modulation(&mut self) -> Result<(), ModelError> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|p| p.name.starts_with("cond."))
            .map(|p| p.name.clone())
            .collect();
        if names.is_empty() {
            return Err(ModelError::InvalidSpec(
                "model has no conditioning generator".into(),
            ));
        }
        for name in names {
            let p = self.store.get_mut(&name)?;
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(())
    }
}

impl std::fmt::Debug for FusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FusionModel")
            .field("task", &self.spec.task)
            .field("variant", &self.spec.variant)
            .field("params", &self.store.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_images(seed: u64, n: usize, hw: (usize, usize)) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(
            &[n, 1, hw.0, hw.1],
            (0..n * hw.0 * hw.1).map(|_| rng::normal(&mut r)).collect(),
        )
        .unwrap()
    }

    fn random_tabular(seed: u64, n: usize, d: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(
            &[n, d],
            (0..n * d).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn train_tab(seed: u64, d: usize) -> Tensor {
        random_tabular(seed, 64, d)
    }

    #[test]
    fn image_only_output_ignores_tabular_input() {
        let spec = ModelSpec::regression(Variant::ImageOnly, 2, 7).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let imgs = gaussian_images(0, 3, spec.image_hw);
        let a = model.predict(&imgs, &random_tabular(1, 3, 2)).unwrap();
        let b = model.predict(&imgs, &random_tabular(2, 3, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tabular_only_output_ignores_image_input() {
        let spec = ModelSpec::classification(Variant::TabularOnly, 3, 5, 7).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let tab = random_tabular(3, 4, 5);
        let a = model.predict(&gaussian_images(0, 4, spec.image_hw), &tab).unwrap();
        let b = model.predict(&gaussian_images(9, 4, spec.image_hw), &tab).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hyperfusion_regression_has_exactly_four_hyperlayers() {
        let spec = ModelSpec::regression(Variant::Hyperfusion, 2, 3).tiny();
        let tab = train_tab(0, 2);
        let model = FusionModel::build(
            &spec,
            BuildInit::Random {
                train_tabular: Some(&tab),
            },
        )
        .unwrap();
        assert_eq!(model.hyper_layer_count(), 4);
        model.partition_audit().unwrap();
    }

    #[test]
    fn classification_outputs_sum_to_one() {
        for variant in Variant::ALL {
            let spec = ModelSpec::classification(variant, 3, 5, 11).tiny();
            let tab = train_tab(1, 5);
            let model = FusionModel::build(
                &spec,
                BuildInit::Random {
                    train_tabular: Some(&tab),
                },
            )
            .unwrap();
            let probs = model
                .predict(&gaussian_images(4, 4, spec.image_hw), &random_tabular(5, 4, 5))
                .unwrap();
            assert_eq!(probs.shape(), &[4, 3]);
            for i in 0..4 {
                let s: f64 = probs.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{variant:?} row sum {s}");
            }
            model.partition_audit().unwrap();
        }
    }

    #[test]
    fn forward_requires_mode() {
        let spec = ModelSpec::regression(Variant::ImageOnly, 2, 7).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let mut tape = Tape::new();
        let mut sink = Vec::new();
        let err = model
            .forward_on(
                &mut tape,
                &gaussian_images(0, 1, spec.image_hw),
                &random_tabular(0, 1, 2),
                &mut sink,
            )
            .unwrap_err();
        assert!(matches!(err, ModelError::ModeUnset));
    }

    #[test]
    fn hyperfusion_without_tabular_data_fails_to_build() {
        let spec = ModelSpec::regression(Variant::Hyperfusion, 2, 3).tiny();
        assert!(matches!(
            FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap_err(),
            ModelError::MissingTrainTabular
        ));
    }

    #[test]
    fn equal_seeds_build_bit_identical_models() {
        let spec = ModelSpec::classification(Variant::Hyperfusion, 3, 5, 42).tiny();
        let tab = train_tab(2, 5);
        let a = FusionModel::build(
            &spec,
            BuildInit::Random {
                train_tabular: Some(&tab),
            },
        )
        .unwrap();
        let b = FusionModel::build(
            &spec,
            BuildInit::Random {
                train_tabular: Some(&tab),
            },
        )
        .unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value, "param {} differs", pa.name);
        }
    }

    #[test]
    fn forced_identity_film_equals_image_only_backbone() {
        // Same seed: the film model's backbone parameters are drawn in the
        // same order as image-only's, so zeroing the generator must give
        // exactly the image-only output.
        let film_spec = ModelSpec::classification(Variant::Film, 3, 5, 77).tiny();
        let image_spec = ModelSpec::classification(Variant::ImageOnly, 3, 5, 77).tiny();
        let mut film = FusionModel::build(&film_spec, BuildInit::Random { train_tabular: None })
            .unwrap();
        let image = FusionModel::build(&image_spec, BuildInit::Random { train_tabular: None })
            .unwrap();
        film.force_identity_modulation().unwrap();
        let imgs = gaussian_images(8, 3, film_spec.image_hw);
        let tab = random_tabular(9, 3, 5);
        let a = film.predict(&imgs, &tab).unwrap();
        let b = image.predict(&imgs, &tab).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn film_modulation_differs_across_tabular_inputs() {
        let spec = ModelSpec::classification(Variant::Film, 3, 5, 13).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let imgs = gaussian_images(1, 2, spec.image_hw);
        let t1 = random_tabular(10, 2, 5);
        let t2 = random_tabular(11, 2, 5);
        let a = model.predict(&imgs, &t1).unwrap();
        let b = model.predict(&imgs, &t2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn daft_generator_input_width_is_tabular_plus_channels() {
        let spec = ModelSpec::classification(Variant::Daft, 3, 5, 13).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let w = model.store.get("cond.l0.weight").unwrap();
        let last_ch = *spec.conv_channels.last().unwrap();
        assert_eq!(w.value.shape(), &[spec.cond_hidden, 5 + last_ch]);
    }

    #[test]
    fn concat_widens_second_to_last_linear() {
        let spec = ModelSpec::regression(Variant::Concatenation, 3, 5).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        // second-to-last of four linear layers is linear3
        let w = model.store.get("linear3.weight").unwrap();
        assert_eq!(w.value.shape()[1], spec.linear_widths[1] + 3);
    }

    #[test]
    fn classification_head_width_matches_class_count() {
        let spec = ModelSpec::classification(Variant::ImageOnly, 2, 5, 1).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        assert_eq!(model.store.get("fc2.weight").unwrap().value.shape()[0], 2);
    }

    #[test]
    fn spec_validation_rejects_bad_placements_and_classes() {
        let mut spec = ModelSpec::regression(Variant::ImageOnly, 2, 0);
        spec.hyper_layers = vec!["linear1".into()];
        assert!(spec.validate().is_err());
        let spec = ModelSpec::classification(Variant::ImageOnly, 5, 4, 0);
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::classification(Variant::Hyperfusion, 3, 4, 0);
        spec.hyper_layers = vec!["block1.downsample".into()];
        let tab = train_tab(3, 4);
        assert!(FusionModel::build(
            &spec,
            BuildInit::Random {
                train_tabular: Some(&tab)
            }
        )
        .is_err());
    }

    #[test]
    fn candidate_layers_cover_backbone_convs_and_linears() {
        let spec = ModelSpec::classification(Variant::ImageOnly, 3, 5, 0).tiny();
        let model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let cands = model.candidate_layers();
        for b in 1..=4 {
            assert!(cands.contains(&format!("block{b}.conv1")));
            assert!(cands.contains(&format!("block{b}.conv2")));
        }
        assert!(cands.contains(&"fc1".to_string()));
        assert!(cands.contains(&"fc2".to_string()));
    }

    #[test]
    fn reinit_layer_changes_only_that_layer() {
        let spec = ModelSpec::classification(Variant::ImageOnly, 3, 5, 3).tiny();
        let mut model = FusionModel::build(&spec, BuildInit::Random { train_tabular: None }).unwrap();
        let before: Vec<(String, Tensor)> = model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut r = rng::seeded(99);
        model.reinit_layer("block2.conv1", &mut r).unwrap();
        for (name, old) in before {
            let now = &model.store.get(&name).unwrap().value;
            if name.starts_with("block2.conv1") {
                assert_ne!(&old, now);
            } else {
                assert_eq!(&old, now, "{name} changed unexpectedly");
            }
        }
        assert!(matches!(
            model.reinit_layer("nope", &mut rng::seeded(0)),
            Err(ModelError::UnknownLayer(_))
        ));
    }
}
