//! Modality branches, prediction heads and the assembled flexible-modal
//! network: encode each modality, fuse, then score.

mod encoders;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoders::{Arch, Encoder, INPUT_CHANNELS, VIT_GRID};

use crate::autograd::{sigmoid, BnUpdate, Graph, Var};
use crate::efficiency::Cost;
use crate::error::{FlexError, Result};
use crate::fusion::{FeatureBundle, Fusion, FusionConfig, FusionKind, DEFAULT_SE_REDUCTION};
use crate::nn::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::sample::{Label, ModalityId, ModalitySample, ModalitySet};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear layer on globally pooled fused features; one logit.
    BinaryLogit,
    /// 1×1 conv to a one-channel logit map.
    BinaryMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchConfig {
    pub arch: Arch,
    pub shared: bool,
    pub feature_channels: usize,
    pub feature_grid: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Map size for [`HeadKind::BinaryMap`].
    pub map_grid: Option<(usize, usize)>,
}

fn default_true() -> bool {
    true
}
fn default_channels() -> usize {
    32
}
fn default_image_size() -> (usize, usize) {
    (32, 32)
}
fn default_fusion() -> FusionKind {
    FusionKind::Concat
}
fn default_reduction() -> usize {
    DEFAULT_SE_REDUCTION
}
fn default_head() -> HeadKind {
    HeadKind::BinaryLogit
}
fn default_modalities() -> ModalitySet {
    ModalitySet::ALL
}

/// Declarative model description; also the `[model]` table of run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_true")]
    pub shared: bool,
    #[serde(default = "default_channels")]
    pub feature_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "default_reduction")]
    pub se_reduction: usize,
    #[serde(default)]
    pub fusion_out_channels: Option<usize>,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    /// Modalities with a branch. The unified model always has all three.
    #[serde(default = "default_modalities")]
    pub modalities: ModalitySet,
    /// Parameter initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            shared: true,
            feature_channels: default_channels(),
            image_size: default_image_size(),
            fusion: default_fusion(),
            se_reduction: DEFAULT_SE_REDUCTION,
            fusion_out_channels: None,
            head: default_head(),
            modalities: ModalitySet::ALL,
            seed: 0,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            kind: self.fusion,
            in_channels: self.feature_channels,
            out_channels: self.fusion_out_channels.unwrap_or(self.feature_channels),
            se_reduction: self.se_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modalities
            .require_rgb()
            .map_err(|_| FlexError::config("model.modalities", "must include rgb"))?;
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(FlexError::config("model.image_size", "must be positive"));
        }
        if self.se_reduction == 0 {
            return Err(FlexError::config("model.se_reduction", "must be at least 1"));
        }
        if self.fusion_out_channels == Some(0) {
            return Err(FlexError::config("model.fusion_out_channels", "must be at least 1"));
        }
        Encoder::new("encoder", self.arch, self.feature_channels, self.image_size)?;
        Ok(())
    }
}

/// Prediction head on the fused map.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Logit(Linear),
    Map(Conv2d),
}

impl Head {
    pub fn new(kind: HeadKind, channels: usize) -> Self {
        match kind {
            HeadKind::BinaryLogit => Head::Logit(Linear::new("head.fc", channels, 1, true)),
            HeadKind::BinaryMap => Head::Map(Conv2d::new("head.conv", channels, 1, 1, 1, 0, true)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        match self {
            Head::Logit(l) => l.init(store, rng),
            Head::Map(c) => c.init(store, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Head::Logit(l) => l.num_params(),
            Head::Map(c) => c.num_params(),
        }
    }

    /// `[B, C, H, W]` -> logits `[B, 1]` or a logit map `[B, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Var {
        match self {
            Head::Logit(l) => {
                let pooled = g.global_avg_pool(fused);
                l.forward(g, store, pooled)
            }
            Head::Map(c) => c.forward(g, store, fused),
        }
    }

    fn cost(&self, fused: [usize; 3]) -> Result<Cost> {
        let elems: usize = fused.iter().product();
        match self {
            Head::Logit(l) => Ok(Cost::new(0, elems as u64) + l.cost(1) + Cost::new(0, 1)),
            Head::Map(c) => {
                let (cost, out) = c.cost(fused)?;
                let n = (out[1] * out[2]) as u64;
                // sigmoid per map cell, then the mean
                Ok(cost + Cost::new(0, 2 * n))
            }
        }
    }
}

/// Result of one differentiable pass over a batch.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Variables of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub features: BTreeMap<ModalityId, Var>,
    pub fused: Var,
    pub logits: Var,
}

/// Branch encoders + fusion + head, with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexModel {
    config: ModelConfig,
    branches: BTreeMap<ModalityId, Encoder>,
    fusion: Fusion,
    head: Head,
    params: ParamStore,
}

impl FlexModel {
    /// Builds the network and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut seen = std::collections::BTreeSet::new();
        for enc in model.branches.values() {
            if seen.insert(enc.prefix().to_string()) {
                enc.init(&mut store, &mut rng);
            }
        }
        model.fusion.init(&mut store, &mut rng);
        model.head.init(&mut store, &mut rng);
        model.params = store;
        Ok(model)
    }

    /// Rebuilds a model around an existing parameter snapshot.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config)?;
        if !reference.params.same_layout(&params) {
            return Err(FlexError::CheckpointIncompatible(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Self { params, ..reference })
    }

    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let mut branches = BTreeMap::new();
        for m in config.modalities.iter() {
            let prefix =
                if config.shared { "encoder.shared".to_string() } else { format!("encoder.{}", m.as_str()) };
            branches.insert(m, Encoder::new(&prefix, config.arch, c, config.image_size)?);
        }
        let fusion = Fusion::new(config.fusion_config(), config.modalities, "fusion")?;
        let head = Head::new(config.head, fusion.config().out_channels);
        Ok(Self { config, branches, fusion, head, params: ParamStore::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> ModalitySet {
        self.config.modalities
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn encoder(&self, m: ModalityId) -> Option<&Encoder> {
        self.branches.get(&m)
    }

    /// Parameters of one encoder copy.
    pub fn encoder_num_params(&self) -> usize {
        self.branches.values().next().map(Encoder::num_params).unwrap_or(0)
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.branches[&ModalityId::Rgb].output_shape()
    }

    pub fn branch_config(&self) -> BranchConfig {
        let [c, h, w] = self.feature_shape();
        BranchConfig {
            arch: self.config.arch,
            shared: self.config.shared,
            feature_channels: c,
            feature_grid: (h, w),
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        let [_, h, w] = self.feature_shape();
        HeadConfig {
            kind: self.config.head,
            map_grid: (self.config.head == HeadKind::BinaryMap).then_some((h, w)),
        }
    }

    /// Stacks encoder inputs `[B, 3, H, W]` per branch. A modality outside a
    /// sample's active set, or absent from the sample, becomes all zeros.
    pub fn prepare_inputs(
        &self,
        batch: &[(&ModalitySample, ModalitySet)],
    ) -> Result<BTreeMap<ModalityId, Tensor>> {
        if batch.is_empty() {
            return Err(FlexError::EmptyBatch);
        }
        let (h, w) = self.config.image_size;
        let plane = h * w;
        let mut out = BTreeMap::new();
        for m in self.config.modalities.iter() {
            let mut data = Vec::with_capacity(batch.len() * INPUT_CHANNELS * plane);
            for (sample, active) in batch {
                active.require_rgb()?;
                let img = sample.image(ModalityId::Rgb).ok_or_else(|| {
                    FlexError::MissingRgb(format!("sample `{}` has no RGB image", sample.sample_id))
                })?;
                if img.rank() != 3 || img.shape()[1] != h || img.shape()[2] != w {
                    return Err(FlexError::ShapeMismatch(format!(
                        "sample `{}` RGB is {:?}, model expects [3, {h}, {w}]",
                        sample.sample_id,
                        img.shape()
                    )));
                }
                match sample.image(m).filter(|_| active.contains(m)) {
                    Some(img) => {
                        let s = img.shape();
                        if s.len() != 3 || s[1] != h || s[2] != w {
                            return Err(FlexError::ShapeMismatch(format!(
                                "sample `{}` {m} is {:?}, model expects [C, {h}, {w}]",
                                sample.sample_id, s
                            )));
                        }
                        match s[0] {
                            1 => (0..INPUT_CHANNELS).for_each(|_| data.extend_from_slice(img.data())),
                            INPUT_CHANNELS => data.extend_from_slice(img.data()),
                            other => {
                                return Err(FlexError::ShapeMismatch(format!(
                                    "sample `{}` {m} has {other} channels",
                                    sample.sample_id
                                )))
                            }
                        }
                    }
                    None => data.extend(std::iter::repeat_n(0.0, INPUT_CHANNELS * plane)),
                }
            }
            out.insert(m, Tensor::new(&[batch.len(), INPUT_CHANNELS, h, w], data)?);
        }
        Ok(out)
    }

    /// Records encode → fuse → head on `g`. Input tensors enter as constants.
    pub fn forward(&self, g: &mut Graph, inputs: &BTreeMap<ModalityId, Tensor>) -> Result<ForwardVars> {
        let vars: BTreeMap<ModalityId, Var> =
            inputs.iter().map(|(m, t)| (*m, g.input(t.clone()))).collect();
        self.forward_vars(g, &vars)
    }

    /// Like [`FlexModel::forward`] but with caller-supplied input nodes.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        inputs: &BTreeMap<ModalityId, Var>,
    ) -> Result<ForwardVars> {
        let mut features = BTreeMap::new();
        for (m, enc) in &self.branches {
            let x = *inputs.get(m).ok_or_else(|| {
                FlexError::ShapeMismatch(format!("no encoder input supplied for {m}"))
            })?;
            features.insert(*m, enc.forward(g, &self.params, x));
        }
        let fused = self.fusion.forward(g, &self.params, &features)?;
        let logits = self.head.forward(g, &self.params, fused);
        Ok(ForwardVars { features, fused, logits })
    }

    /// Per-modality features for one sample in inference mode.
    pub fn encode(&self, s: &ModalitySample, active: ModalitySet) -> Result<FeatureBundle> {
        active.require_rgb()?;
        let inputs = self.prepare_inputs(&[(s, active)])?;
        let mut g = Graph::new(false);
        let vars: BTreeMap<ModalityId, Var> =
            inputs.into_iter().map(|(m, t)| (m, g.input(t))).collect();
        let mut features = BTreeMap::new();
        for (m, enc) in &self.branches {
            let f = enc.forward(&mut g, &self.params, vars[m]);
            let t = g.value(f);
            features.insert(*m, t.clone().reshape(&t.shape()[1..])?);
        }
        FeatureBundle::new(features, self.branches[&ModalityId::Rgb].layout())
    }

    /// Liveness score in [0, 1] for one sample.
    pub fn predict(&self, s: &ModalitySample, active: ModalitySet) -> Result<f64> {
        Ok(self.predict_batch(&[s], active)?[0])
    }

    /// Inference-mode scores; each sample is computed independently of the
    /// rest of its batch.
    pub fn predict_batch(&self, samples: &[&ModalitySample], active: ModalitySet) -> Result<Vec<f64>> {
        active.require_rgb()?;
        let mut scores = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let batch: Vec<_> = chunk.iter().map(|s| (*s, active)).collect();
            let inputs = self.prepare_inputs(&batch)?;
            let mut g = Graph::new(false);
            let fv = self.forward(&mut g, &inputs)?;
            scores.extend(scores_from_logits(g.value(fv.logits)));
        }
        Ok(scores)
    }

    /// Mean binary cross-entropy of a batch without gradients.
    pub fn loss(&self, batch: &[(&ModalitySample, ModalitySet)], training: bool) -> Result<f64> {
        let inputs = self.prepare_inputs(batch)?;
        let mut g = Graph::new(training);
        let fv = self.forward(&mut g, &inputs)?;
        let target = self.targets(batch, g.shape(fv.logits));
        let l = g.bce_with_logits(fv.logits, &target);
        Ok(g.value(l).data()[0])
    }

    /// Loss, parameter gradients and observed batch-norm statistics.
    pub fn loss_and_grads(
        &self,
        batch: &[(&ModalitySample, ModalitySet)],
        training: bool,
    ) -> Result<LossGrads> {
        let inputs = self.prepare_inputs(batch)?;
        let mut g = Graph::new(training);
        let fv = self.forward(&mut g, &inputs)?;
        let target = self.targets(batch, g.shape(fv.logits));
        let l = g.bce_with_logits(fv.logits, &target);
        let grads = g.backward(l);
        Ok(LossGrads {
            loss: g.value(l).data()[0],
            grads: g.param_grads(&grads),
            bn_updates: g.bn_updates().to_vec(),
        })
    }

    fn targets(&self, batch: &[(&ModalitySample, ModalitySet)], logit_shape: &[usize]) -> Tensor {
        let per = logit_shape.iter().skip(1).product::<usize>();
        Tensor::from_fn(logit_shape, |i| batch[i / per].0.label.target())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let mean_name = format!("{}.running_mean", u.name);
            let var_name = format!("{}.running_var", u.name);
            if let Some(rm) = self.params.buffer_mut(&mean_name) {
                for (r, b) in rm.data_mut().iter_mut().zip(&u.mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
            if let Some(rv) = self.params.buffer_mut(&var_name) {
                for (r, b) in rv.data_mut().iter_mut().zip(&u.var) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }

    /// Per-submodule cost of one forward pass at spatial size `input`.
    /// A shared encoder appears once, with the FLOPs of all its applications.
    pub fn cost_breakdown(&self, input: (usize, usize)) -> Result<BTreeMap<String, Cost>> {
        if input.0 == 0 || input.1 == 0 {
            return Err(FlexError::ShapeInvalid(format!("input size {input:?}")));
        }
        let mut out: BTreeMap<String, Cost> = BTreeMap::new();
        let mut feature = None;
        for enc in self.branches.values() {
            let (c, shape) = enc.cost(input)?;
            let entry = out.entry(enc.prefix().to_string()).or_default();
            if entry.params == 0 {
                entry.params = c.params;
            }
            entry.flops += c.flops;
            feature = Some(shape);
        }
        let feature = feature.expect("at least the RGB branch");
        if self.config.head == HeadKind::BinaryMap {
            let expected = self.feature_shape();
            if feature != expected {
                return Err(FlexError::ShapeInvalid(format!(
                    "map head is fixed to a {}x{} grid, input yields {}x{}",
                    expected[1], expected[2], feature[1], feature[2]
                )));
            }
        }
        out.insert("fusion".into(), self.fusion.cost(feature)?);
        let fused = [self.fusion.config().out_channels, feature[1], feature[2]];
        let mut head = self.head.cost(fused)?;
        head.params = self.head.num_params() as u64;
        out.insert("head".into(), head);
        Ok(out)
    }
}

/// Scores from head logits: `sigmoid(z)` for a logit head, the mean of the
/// sigmoid map for a map head.
pub fn scores_from_logits(logits: &Tensor) -> Vec<f64> {
    let b = logits.shape()[0];
    let per = logits.numel() / b;
    logits
        .data()
        .chunks(per)
        .map(|row| row.iter().map(|z| sigmoid(*z)).sum::<f64>() / per as f64)
        .collect()
}

pub fn encode(m: &FlexModel, s: &ModalitySample, active: ModalitySet) -> Result<FeatureBundle> {
    m.encode(s, active)
}

pub fn predict(m: &FlexModel, s: &ModalitySample, active: ModalitySet) -> Result<f64> {
    m.predict(s, active)
}

/// Inference-mode loss over samples with per-sample active modalities.
pub fn loss(m: &FlexModel, batch: &[(&ModalitySample, ModalitySet)]) -> Result<f64> {
    m.loss(batch, false)
}

/// Mean binary cross-entropy of already-computed scores, each clamped to
/// `[eps, 1 - eps]`.
pub fn bce_from_scores(scores: &[f64], labels: &[Label], eps: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(FlexError::EmptyBatch);
    }
    if scores.len() != labels.len() {
        return Err(FlexError::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let p = s.clamp(eps, 1.0 - eps);
            let t = l.target();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}
