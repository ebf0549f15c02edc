//! Feature-level fusion of per-modality feature maps.
//!
//! Three operators map a [`FeatureBundle`] of equally shaped maps
//! `[C', H', W']` to one fused map `[out_channels, H', W']`:
//!
//! * **Concat**: channel concatenation, 1×1 conv, batch norm, ReLU.
//! * **SE**: each modality is first recalibrated by its own
//!   squeeze-and-excitation gate `sigmoid(FC2(ReLU(FC1(avgpool(F)))))`,
//!   then aggregated as in Concat.
//! * **Cross-attention**: Depth and IR features query the RGB features.
//!   With `F̄` the `[N, C']` vectorization of a map,
//!   `F̄_CA = softmax_rows(F̄_m · F̄_RGBᵀ) · F̄_RGB` (no temperature), and the
//!   fused map is `ReLU(BN(Conv(F_RGB + Σ F_CA)))`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::efficiency::Cost;
use crate::error::{FlexError, Result};
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::params::ParamStore;
use crate::sample::{ModalityId, ModalitySet};
use crate::tensor::Tensor;

pub const DEFAULT_SE_REDUCTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    Se,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub se_reduction: usize,
}

impl FusionConfig {
    pub fn new(kind: FusionKind, in_channels: usize) -> Self {
        Self { kind, in_channels, out_channels: in_channels, se_reduction: DEFAULT_SE_REDUCTION }
    }

    pub fn with_out_channels(mut self, out_channels: usize) -> Self {
        self.out_channels = out_channels;
        self
    }

    /// Hidden width of the SE bottleneck: `max(1, floor(C' / reduction))`.
    pub fn se_width(&self) -> usize {
        (self.in_channels / self.se_reduction.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(FlexError::config("fusion.in_channels", "must be at least 1"));
        }
        if self.out_channels == 0 {
            return Err(FlexError::config("fusion.out_channels", "must be at least 1"));
        }
        if self.se_reduction == 0 {
            return Err(FlexError::config("fusion.se_reduction", "must be at least 1"));
        }
        Ok(())
    }
}

/// How a feature map was produced; cross-attention reads both the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// Convolutional grid `[C', H', W']`.
    Grid,
    /// Token sequence laid out row-major on an `H' × W'` patch grid.
    Tokens,
}

/// Per-modality features `F_RGB`, `F_Depth`, `F_IR`, all of one shape.
///
/// Entries are `[C', H', W']` for a single sample or `[B, C', H', W']` for a
/// batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    features: BTreeMap<ModalityId, Tensor>,
    layout: FeatureLayout,
}

impl FeatureBundle {
    pub fn new(features: BTreeMap<ModalityId, Tensor>, layout: FeatureLayout) -> Result<Self> {
        let mut shape: Option<&[usize]> = None;
        for (m, t) in &features {
            if !(t.rank() == 3 || t.rank() == 4) {
                return Err(FlexError::ShapeMismatch(format!(
                    "{m} feature must be [C, H, W] or [B, C, H, W], got {:?}",
                    t.shape()
                )));
            }
            match shape {
                None => shape = Some(t.shape()),
                Some(s) if s != t.shape() => {
                    return Err(FlexError::ShapeMismatch(format!(
                        "{m} feature is {:?} but bundle entries are {:?}",
                        t.shape(),
                        s
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { features, layout })
    }

    pub fn from_grid(entries: Vec<(ModalityId, Tensor)>) -> Result<Self> {
        Self::new(entries.into_iter().collect(), FeatureLayout::Grid)
    }

    pub fn get(&self, m: ModalityId) -> Option<&Tensor> {
        self.features.get(&m)
    }

    pub fn features(&self) -> &BTreeMap<ModalityId, Tensor> {
        &self.features
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::from_slice(&self.features.keys().copied().collect::<Vec<_>>())
    }

    /// Shape shared by every entry.
    pub fn shape(&self) -> Option<&[usize]> {
        self.features.values().next().map(Tensor::shape)
    }
}

/// Fused map `F_fuse`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature(pub Tensor);

impl FusedFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SeGate {
    fc1: Linear,
    fc2: Linear,
}

/// A fusion operator bound to a parameter-name prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    cfg: FusionConfig,
    modalities: ModalitySet,
    conv: Conv2d,
    bn: BatchNorm,
    se: BTreeMap<ModalityId, SeGate>,
}

/// Intermediate values of one fusion forward pass.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// Input of the aggregation convolution.
    pub pre_conv: Tensor,
    /// Row-softmax attention maps `[B, N, N]`, cross-attention only.
    pub attention: BTreeMap<ModalityId, Tensor>,
    /// SE channel gates `[B, C']`, SE only.
    pub gates: BTreeMap<ModalityId, Tensor>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<ModalityId, Tensor>,
}

struct ForwardVars {
    pre_conv: Var,
    attention: BTreeMap<ModalityId, Var>,
    gates: BTreeMap<ModalityId, Var>,
    output: Var,
}

impl Fusion {
    pub fn new(cfg: FusionConfig, modalities: ModalitySet, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        modalities.require_rgb()?;
        let c = cfg.in_channels;
        let conv_in = match cfg.kind {
            FusionKind::Concat | FusionKind::Se => c * modalities.len(),
            FusionKind::CrossAttention => c,
        };
        let conv = Conv2d::new(format!("{prefix}.conv"), conv_in, cfg.out_channels, 1, 1, 0, true);
        let bn = BatchNorm::new(format!("{prefix}.bn"), cfg.out_channels);
        let se = if cfg.kind == FusionKind::Se {
            let hidden = cfg.se_width();
            modalities
                .iter()
                .map(|m| {
                    let base = format!("{prefix}.se.{}", m.as_str());
                    let gate = SeGate {
                        fc1: Linear::new(format!("{base}.fc1"), c, hidden, true),
                        fc2: Linear::new(format!("{base}.fc2"), hidden, c, true),
                    };
                    (m, gate)
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self { cfg, modalities, conv, bn, se })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn modalities(&self) -> ModalitySet {
        self.modalities
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn batch_norm(&self) -> &BatchNorm {
        &self.bn
    }

    /// Names of the SE fully-connected layers for `m`, as (fc1, fc2) prefixes.
    pub fn se_layer_names(&self, m: ModalityId) -> Option<(String, String)> {
        self.se.get(&m).map(|g| (g.fc1.name.clone(), g.fc2.name.clone()))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
        for gate in self.se.values() {
            gate.fc1.init(store, rng);
            gate.fc2.init(store, rng);
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params()
            + self.bn.num_params()
            + self.se.values().map(|g| g.fc1.num_params() + g.fc2.num_params()).sum::<usize>()
    }

    /// Differentiable forward on batched features `[B, C', H', W']`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &BTreeMap<ModalityId, Var>,
    ) -> Result<Var> {
        Ok(self.forward_vars(g, store, features)?.output)
    }

    fn check_inputs(&self, g: &Graph, features: &BTreeMap<ModalityId, Var>) -> Result<()> {
        let present = ModalitySet::from_slice(&features.keys().copied().collect::<Vec<_>>());
        present.require_rgb()?;
        if present != self.modalities {
            return Err(FlexError::ShapeMismatch(format!(
                "fusion declared for {} but received {}",
                self.modalities, present
            )));
        }
        let rgb_shape = g.shape(features[&ModalityId::Rgb]).to_vec();
        if rgb_shape.len() != 4 || rgb_shape[1] != self.cfg.in_channels {
            return Err(FlexError::ShapeMismatch(format!(
                "fusion expects [B, {}, H, W] features, got {:?}",
                self.cfg.in_channels, rgb_shape
            )));
        }
        for (m, &v) in features {
            if g.shape(v) != rgb_shape.as_slice() {
                return Err(FlexError::ShapeMismatch(format!(
                    "{m} feature is {:?} but RGB is {:?}",
                    g.shape(v),
                    rgb_shape
                )));
            }
        }
        Ok(())
    }

    fn forward_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &BTreeMap<ModalityId, Var>,
    ) -> Result<ForwardVars> {
        self.check_inputs(g, features)?;
        let mut attention = BTreeMap::new();
        let mut gates = BTreeMap::new();
        let pre_conv = match self.cfg.kind {
            FusionKind::Concat => {
                let parts: Vec<Var> = self.modalities.iter().map(|m| features[&m]).collect();
                g.concat_channels(&parts)
            }
            FusionKind::Se => {
                let mut parts = Vec::with_capacity(self.modalities.len());
                for m in self.modalities.iter() {
                    let f = features[&m];
                    let gate = &self.se[&m];
                    let pooled = g.global_avg_pool(f);
                    let h = gate.fc1.forward(g, store, pooled);
                    let h = g.relu(h);
                    let h = gate.fc2.forward(g, store, h);
                    let s = g.sigmoid(h);
                    gates.insert(m, s);
                    parts.push(g.channel_scale(f, s));
                }
                g.concat_channels(&parts)
            }
            FusionKind::CrossAttention => {
                let rgb = features[&ModalityId::Rgb];
                let (h, w) = (g.shape(rgb)[2], g.shape(rgb)[3]);
                let rgb_tokens = g.to_tokens(rgb);
                let mut sum = rgb;
                for m in self.modalities.iter().filter(|m| *m != ModalityId::Rgb) {
                    let query = g.to_tokens(features[&m]);
                    let gram = g.matmul_nt(query, rgb_tokens);
                    let attn = g.softmax_rows(gram);
                    attention.insert(m, attn);
                    let attended = g.matmul(attn, rgb_tokens);
                    let spatial = g.from_tokens(attended, h, w);
                    sum = g.add(sum, spatial);
                }
                sum
            }
        };
        let y = self.conv.forward(g, store, pre_conv);
        let y = self.bn.forward(g, store, y);
        let output = g.relu(y);
        Ok(ForwardVars { pre_conv, attention, gates, output })
    }

    /// Cost of fusing one sample whose per-modality features are `[C', H', W']`.
    pub fn cost(&self, feature: [usize; 3]) -> Result<Cost> {
        let [c, h, w] = feature;
        if c != self.cfg.in_channels {
            return Err(FlexError::ShapeInvalid(format!(
                "fusion expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let k = self.modalities.len() as u64;
        let elems = (c * h * w) as u64;
        let n = (h * w) as u64;
        let mut cost = Cost::default();
        let conv_in = match self.cfg.kind {
            FusionKind::Concat => [c * self.modalities.len(), h, w],
            FusionKind::Se => {
                for gate in self.se.values() {
                    // avg pool + FC1 + ReLU + FC2 + sigmoid + channel scaling
                    cost += Cost::new(0, elems);
                    cost += gate.fc1.cost(1);
                    cost += Cost::new(0, gate.fc1.out_features as u64);
                    cost += gate.fc2.cost(1);
                    cost += Cost::new(0, c as u64);
                    cost += Cost::new(0, elems);
                }
                [c * self.modalities.len(), h, w]
            }
            FusionKind::CrossAttention => {
                let queries = k - 1;
                // Gram N×N×C', softmax over N×N, attention-weighted sum N×N×C',
                // residual additions.
                let per_query = 2 * n * n * c as u64 + n * n + 2 * n * n * c as u64 + elems;
                cost += Cost::new(0, queries * per_query);
                [c, h, w]
            }
        };
        let (conv_cost, out) = self.conv.cost(conv_in)?;
        cost += conv_cost;
        let out_elems = out.iter().product::<usize>();
        cost += self.bn.cost(out_elems);
        cost += Cost::new(0, out_elems as u64);
        Ok(cost)
    }
}

fn bundle_vars(
    g: &mut Graph,
    bundle: &FeatureBundle,
    differentiable: bool,
) -> Result<(BTreeMap<ModalityId, Var>, bool)> {
    let single = bundle.shape().map(|s| s.len() == 3).unwrap_or(false);
    let mut vars = BTreeMap::new();
    for (m, t) in bundle.features() {
        let t = if single {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)?
        } else {
            t.clone()
        };
        let v = if differentiable { g.leaf(t) } else { g.input(t) };
        vars.insert(*m, v);
    }
    Ok((vars, single))
}

fn unbatch(t: &Tensor, single: bool) -> Tensor {
    if single {
        t.clone().reshape(&t.shape()[1..]).expect("leading batch of one")
    } else {
        t.clone()
    }
}

/// Inference-mode forward with intermediate values exposed.
pub fn trace(fusion: &Fusion, store: &ParamStore, bundle: &FeatureBundle) -> Result<FusionTrace> {
    let mut g = Graph::new(false);
    let (vars, single) = bundle_vars(&mut g, bundle, false)?;
    let fv = fusion.forward_vars(&mut g, store, &vars)?;
    Ok(FusionTrace {
        pre_conv: unbatch(g.value(fv.pre_conv), single),
        attention: fv.attention.iter().map(|(m, v)| (*m, unbatch(g.value(*v), single))).collect(),
        gates: fv.gates.iter().map(|(m, v)| (*m, unbatch(g.value(*v), single))).collect(),
        output: unbatch(g.value(fv.output), single),
    })
}

/// Inference-mode fusion of any kind.
pub fn fuse(fusion: &Fusion, store: &ParamStore, bundle: &FeatureBundle) -> Result<FusedFeature> {
    Ok(FusedFeature(trace(fusion, store, bundle)?.output))
}

fn fuse_kind(
    kind: FusionKind,
    fusion: &Fusion,
    store: &ParamStore,
    bundle: &FeatureBundle,
) -> Result<FusedFeature> {
    if fusion.cfg.kind != kind {
        return Err(FlexError::InvalidArgument(format!(
            "fusion operator is {:?}, not {:?}",
            fusion.cfg.kind, kind
        )));
    }
    fuse(fusion, store, bundle)
}

pub fn fuse_concat(fusion: &Fusion, store: &ParamStore, b: &FeatureBundle) -> Result<FusedFeature> {
    fuse_kind(FusionKind::Concat, fusion, store, b)
}

pub fn fuse_se(fusion: &Fusion, store: &ParamStore, b: &FeatureBundle) -> Result<FusedFeature> {
    fuse_kind(FusionKind::Se, fusion, store, b)
}

pub fn fuse_cross_attention(
    fusion: &Fusion,
    store: &ParamStore,
    b: &FeatureBundle,
) -> Result<FusedFeature> {
    fuse_kind(FusionKind::CrossAttention, fusion, store, b)
}

/// Gradients of `⟨upstream, F_fuse⟩` with respect to every fusion parameter
/// and every modality input. `training` selects batch statistics in BN.
pub fn fusion_backward(
    fusion: &Fusion,
    store: &ParamStore,
    bundle: &FeatureBundle,
    upstream: &Tensor,
    training: bool,
) -> Result<FusionGradients> {
    let mut g = Graph::new(training);
    let (vars, single) = bundle_vars(&mut g, bundle, true)?;
    let out = fusion.forward(&mut g, store, &vars)?;
    let upstream = if single {
        let mut s = vec![1];
        s.extend_from_slice(upstream.shape());
        upstream.clone().reshape(&s)?
    } else {
        upstream.clone()
    };
    if upstream.shape() != g.shape(out) {
        return Err(FlexError::ShapeMismatch(format!(
            "upstream gradient {:?} does not match fused output {:?}",
            upstream.shape(),
            g.shape(out)
        )));
    }
    let grads = g.backward_with(out, upstream);
    let inputs = vars
        .iter()
        .map(|(m, v)| {
            let t = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
            (*m, unbatch(&t, single))
        })
        .collect();
    Ok(FusionGradients { params: g.param_grads(&grads), inputs })
}
