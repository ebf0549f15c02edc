use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::efficiency::Cost;
use crate::error::{FlexError, Result};
use crate::fusion::FeatureLayout;
use crate::nn::{BatchNorm, Conv2d, Embedding, LayerNorm, Linear};
use crate::params::ParamStore;

/// Number of image channels every branch consumes; single-channel Depth and
/// IR are replicated.
pub const INPUT_CHANNELS: usize = 3;

/// ViT patch grid side; the patch size is derived from the image size.
pub const VIT_GRID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Three conv3×3(stride 2)-BN-ReLU blocks.
    ToyCnn,
    /// Stem plus two residual blocks, each halving resolution.
    ToyResnet,
    /// Patch embedding plus two pre-norm transformer encoder layers.
    ToyVit,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{prefix}.conv"), cin, cout, 3, stride, 1, false),
            bn: BatchNorm::new(format!("{prefix}.bn"), cout),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, relu: bool) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.bn.forward(g, store, y);
        if relu {
            g.relu(y)
        } else {
            y
        }
    }

    fn cost(&self, input: [usize; 3], relu: bool) -> Result<(Cost, [usize; 3])> {
        let (mut c, out) = self.conv.cost(input)?;
        let elems: usize = out.iter().product();
        c += self.bn.cost(elems);
        if relu {
            c += Cost::new(0, elems as u64);
        }
        Ok((c, out))
    }

    fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
    shortcut_conv: Conv2d,
    shortcut_bn: BatchNorm,
}

impl ResidualBlock {
    fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: ConvBnRelu::new(&format!("{prefix}.a"), cin, cout, 2),
            b: ConvBnRelu::new(&format!("{prefix}.b"), cout, cout, 1),
            shortcut_conv: Conv2d::new(format!("{prefix}.shortcut.conv"), cin, cout, 1, 2, 0, false),
            shortcut_bn: BatchNorm::new(format!("{prefix}.shortcut.bn"), cout),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.a.init(store, rng);
        self.b.init(store, rng);
        self.shortcut_conv.init(store, rng);
        self.shortcut_bn.init(store);
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.a.forward(g, store, x, true);
        let y = self.b.forward(g, store, y, false);
        let s = self.shortcut_conv.forward(g, store, x);
        let s = self.shortcut_bn.forward(g, store, s);
        let sum = g.add(y, s);
        g.relu(sum)
    }

    fn cost(&self, input: [usize; 3]) -> Result<(Cost, [usize; 3])> {
        let (ca, mid) = self.a.cost(input, true)?;
        let (cb, out) = self.b.cost(mid, false)?;
        let (cs, sout) = self.shortcut_conv.cost(input)?;
        if sout != out {
            return Err(FlexError::ShapeInvalid(format!(
                "residual branch {out:?} and shortcut {sout:?} disagree"
            )));
        }
        let elems: usize = out.iter().product();
        let cost = ca + cb + cs + self.shortcut_bn.cost(elems) + Cost::new(0, 2 * elems as u64);
        Ok((cost, out))
    }

    fn num_params(&self) -> usize {
        self.a.num_params()
            + self.b.num_params()
            + self.shortcut_conv.num_params()
            + self.shortcut_bn.num_params()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct VitLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl VitLayer {
    fn new(prefix: &str, dim: usize) -> Self {
        Self {
            ln1: LayerNorm::new(format!("{prefix}.ln1"), dim),
            q: Linear::new(format!("{prefix}.attn.q"), dim, dim, true),
            k: Linear::new(format!("{prefix}.attn.k"), dim, dim, true),
            v: Linear::new(format!("{prefix}.attn.v"), dim, dim, true),
            proj: Linear::new(format!("{prefix}.attn.proj"), dim, dim, true),
            ln2: LayerNorm::new(format!("{prefix}.ln2"), dim),
            fc1: Linear::new(format!("{prefix}.mlp.fc1"), dim, 2 * dim, true),
            fc2: Linear::new(format!("{prefix}.mlp.fc2"), 2 * dim, dim, true),
        }
    }

    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.proj, &self.fc1, &self.fc2]
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.ln1.init(store);
        self.ln2.init(store);
        for l in self.linears() {
            l.init(store, rng);
        }
    }

    /// `x`: [B, N, D]
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let dim = self.q.in_features as f64;
        let h = self.ln1.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / dim.sqrt());
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v);
        let out = self.proj.forward(g, store, ctx);
        let x = g.add(x, out);
        let h = self.ln2.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }

    fn cost(&self, tokens: usize) -> Cost {
        let d = self.q.in_features as u64;
        let n = tokens as u64;
        let elems = (tokens * self.q.in_features) as usize;
        let mut c = self.ln1.cost(elems) + self.ln2.cost(elems);
        for l in self.linears() {
            c += l.cost(tokens);
        }
        // scores, scaling, softmax, weighted sum
        c += Cost::new(0, 2 * n * n * d + n * n + n * n + 2 * n * n * d);
        // MLP ReLU and two residual adds
        c += Cost::new(0, 2 * n * d + 2 * n * d);
        c
    }

    fn num_params(&self) -> usize {
        self.ln1.num_params()
            + self.ln2.num_params()
            + self.linears().iter().map(|l| l.num_params()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Cnn(Vec<ConvBnRelu>),
    Resnet { stem: ConvBnRelu, blocks: Vec<ResidualBlock> },
    Vit { patch: Conv2d, pos: Embedding, layers: Vec<VitLayer>, norm: LayerNorm },
}

/// One modality branch mapping `[B, 3, H, W]` images to `[B, C', H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    prefix: String,
    arch: Arch,
    channels: usize,
    image_size: (usize, usize),
    body: Body,
}

impl Encoder {
    pub fn new(prefix: &str, arch: Arch, channels: usize, image_size: (usize, usize)) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(FlexError::config(
                "model.feature_channels",
                format!("must be an even number >= 2, got {channels}"),
            ));
        }
        let (h, w) = image_size;
        let half = channels / 2;
        let body = match arch {
            Arch::ToyCnn => {
                if h < 8 || w < 8 {
                    return Err(FlexError::config("model.image_size", "toy_cnn needs at least 8x8"));
                }
                Body::Cnn(vec![
                    ConvBnRelu::new(&format!("{prefix}.block1"), INPUT_CHANNELS, half, 2),
                    ConvBnRelu::new(&format!("{prefix}.block2"), half, channels, 2),
                    ConvBnRelu::new(&format!("{prefix}.block3"), channels, channels, 2),
                ])
            }
            Arch::ToyResnet => {
                if h < 8 || w < 8 {
                    return Err(FlexError::config("model.image_size", "toy_resnet needs at least 8x8"));
                }
                Body::Resnet {
                    stem: ConvBnRelu::new(&format!("{prefix}.stem"), INPUT_CHANNELS, half, 2),
                    blocks: vec![
                        ResidualBlock::new(&format!("{prefix}.layer1"), half, channels),
                        ResidualBlock::new(&format!("{prefix}.layer2"), channels, channels),
                    ],
                }
            }
            Arch::ToyVit => {
                if h % VIT_GRID != 0 || w % VIT_GRID != 0 || h != w {
                    return Err(FlexError::config(
                        "model.image_size",
                        format!("toy_vit needs a square size divisible by {VIT_GRID}"),
                    ));
                }
                let patch = h / VIT_GRID;
                let tokens = VIT_GRID * VIT_GRID;
                Body::Vit {
                    patch: Conv2d::new(
                        format!("{prefix}.patch"),
                        INPUT_CHANNELS,
                        channels,
                        patch,
                        patch,
                        0,
                        true,
                    ),
                    pos: Embedding::new(format!("{prefix}.pos"), &[tokens, channels]),
                    layers: (0..2)
                        .map(|i| VitLayer::new(&format!("{prefix}.layer{}", i + 1), channels))
                        .collect(),
                    norm: LayerNorm::new(format!("{prefix}.norm"), channels),
                }
            }
        };
        Ok(Self { prefix: prefix.to_string(), arch, channels, image_size, body })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn layout(&self) -> FeatureLayout {
        match self.arch {
            Arch::ToyVit => FeatureLayout::Tokens,
            _ => FeatureLayout::Grid,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match &self.body {
            Body::Cnn(blocks) => blocks.iter().for_each(|b| b.init(store, rng)),
            Body::Resnet { stem, blocks } => {
                stem.init(store, rng);
                blocks.iter().for_each(|b| b.init(store, rng));
            }
            Body::Vit { patch, pos, layers, norm } => {
                patch.init(store, rng);
                pos.init(store, rng, 0.02);
                layers.iter().for_each(|l| l.init(store, rng));
                norm.init(store);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.body {
            Body::Cnn(blocks) => blocks.iter().map(ConvBnRelu::num_params).sum(),
            Body::Resnet { stem, blocks } => {
                stem.num_params() + blocks.iter().map(ResidualBlock::num_params).sum::<usize>()
            }
            Body::Vit { patch, pos, layers, norm } => {
                patch.num_params()
                    + pos.num_params()
                    + layers.iter().map(VitLayer::num_params).sum::<usize>()
                    + norm.num_params()
            }
        }
    }

    /// `x`: [B, 3, H, W] -> [B, C', H', W']
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match &self.body {
            Body::Cnn(blocks) => {
                blocks.iter().fold(x, |acc, b| b.forward(g, store, acc, true))
            }
            Body::Resnet { stem, blocks } => {
                let y = stem.forward(g, store, x, true);
                blocks.iter().fold(y, |acc, b| b.forward(g, store, acc))
            }
            Body::Vit { patch, pos, layers, norm } => {
                let p = patch.forward(g, store, x);
                let (gh, gw) = (g.shape(p)[2], g.shape(p)[3]);
                let tokens = g.to_tokens(p);
                let pe = pos.forward(g, store);
                let mut t = g.add_positional(tokens, pe);
                for l in layers {
                    t = l.forward(g, store, t);
                }
                let t = norm.forward(g, store, t);
                g.from_tokens(t, gh, gw)
            }
        }
    }

    /// Cost of encoding one image of spatial size `input`.
    pub fn cost(&self, input: (usize, usize)) -> Result<(Cost, [usize; 3])> {
        let shape = [INPUT_CHANNELS, input.0, input.1];
        match &self.body {
            Body::Cnn(blocks) => {
                let mut total = Cost::default();
                let mut s = shape;
                for b in blocks {
                    let (c, out) = b.cost(s, true)?;
                    total += c;
                    s = out;
                }
                Ok((total, s))
            }
            Body::Resnet { stem, blocks } => {
                let (mut total, mut s) = stem.cost(shape, true)?;
                for b in blocks {
                    let (c, out) = b.cost(s)?;
                    total += c;
                    s = out;
                }
                Ok((total, s))
            }
            Body::Vit { patch, pos, layers, norm } => {
                if input != self.image_size {
                    return Err(FlexError::ShapeInvalid(format!(
                        "toy_vit positional table is fixed to {:?}, got {:?}",
                        self.image_size, input
                    )));
                }
                let (mut total, out) = patch.cost(shape)?;
                let n = out[1] * out[2];
                let elems = n * self.channels;
                total += Cost::new(pos.num_params() as u64, elems as u64);
                for l in layers {
                    total += l.cost(n);
                }
                total += norm.cost(elems);
                Ok((total, out))
            }
        }
    }

    /// Output shape `[C', H', W']` for the configured image size.
    pub fn output_shape(&self) -> [usize; 3] {
        self.cost(self.image_size).expect("encoder accepts its own input size").1
    }
}
