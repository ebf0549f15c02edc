#![allow(dead_code)]

use std::collections::BTreeMap;

use flexfas::autograd::{Graph, Var};
use flexfas::backbones::{FlexModel, HeadKind, Head, ModelConfig};
use flexfas::fusion::{Fusion, FusionConfig, FusionKind};
use flexfas::params::ParamStore;
use flexfas::sample::{Label, ModalityId, ModalitySample, ModalitySet, ScoreRecord};
use flexfas::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Gradient norms below this are finite-difference rounding noise
/// (structurally zero gradients such as a bias feeding batch norm).
pub const GRAD_FLOOR: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(GRAD_FLOOR)
}

/// Central difference of `f` at offset 0. When the two one-sided slopes
/// disagree a ReLU kink lies inside the step, and the step shrinks (up to
/// twice) until they agree.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let f0 = f(0.0);
    let mut h = FD_STEP;
    let mut estimate = 0.0;
    for _ in 0..3 {
        let (up, down) = (f(h), f(-h));
        estimate = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
            break;
        }
        h /= 10.0;
    }
    estimate
}

/// Worst per-tensor relative error between backprop and central differences
/// of the scalar recorded by `build`, over every parameter in `store` and
/// every input tensor.
pub fn check_graph(
    store: &ParamStore,
    inputs: &[Tensor],
    training: bool,
    build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
) -> f64 {
    let eval = |store: &ParamStore, inputs: &[Tensor]| {
        let mut g = Graph::new(training);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, store, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars);
    assert_eq!(g.value(out).numel(), 1, "gradient check needs a scalar");
    let grads = g.backward(out);
    let param_grads = g.param_grads(&grads);

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for (name, value) in store.params() {
        let analytic = param_grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut numeric = vec![0.0; value.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = value.data()[i];
            *slot = central_difference(|d| {
                work.param_mut(name).unwrap().data_mut()[i] = x + d;
                eval(&work, inputs)
            });
            work.param_mut(name).unwrap().data_mut()[i] = x;
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    let mut work_in = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[k].data()[i];
            *slot = central_difference(|d| {
                work_in[k].data_mut()[i] = x + d;
                eval(store, &work_in)
            });
            work_in[k].data_mut()[i] = x;
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Randomly re-draws every parameter (including BN affine terms) so checks
/// do not sit at the identity initialization.
pub fn perturb_params(store: &mut ParamStore, rng: &mut impl Rng) {
    for (_, t) in store.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// Scalar `mean(u ⊙ fusion(F))` over a batch of random features.
pub fn fusion_instance(kind: FusionKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2 * rng.random_range(1..=3);
    let (b, h, w) = (rng.random_range(1..=2), rng.random_range(2..=3), rng.random_range(2..=3));
    let fusion = Fusion::new(FusionConfig::new(kind, c), ModalitySet::ALL, "fusion").unwrap();
    let mut store = ParamStore::new();
    fusion.init(&mut store, &mut rng);
    perturb_params(&mut store, &mut rng);
    let inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[b, c, h, w], 1.0)).collect();
    let upstream = random_tensor(&mut rng, &[b, c, h, w], 1.0);
    check_graph(&store, &inputs, true, |g, store, vars| {
        let feats: BTreeMap<ModalityId, Var> = ModalityId::ALL.into_iter().zip(vars.iter().copied()).collect();
        let out = fusion.forward(g, store, &feats).unwrap();
        let u = g.input(upstream.clone());
        let prod = g.mul(out, u);
        g.mean_all(prod)
    })
}

/// Binary cross-entropy of a head on random fused features.
pub fn head_instance(kind: HeadKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=4);
    let (b, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let head = Head::new(kind, c);
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng);
    perturb_params(&mut store, &mut rng);
    let fused = random_tensor(&mut rng, &[b, c, h, w], 1.0);
    let labels: Vec<f64> = (0..b).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    check_graph(&store, &[fused], false, |g, store, vars| {
        let logits = head.forward(g, store, vars[0]);
        let shape = g.shape(logits).to_vec();
        let per = shape[1..].iter().product::<usize>();
        let target = Tensor::from_fn(&shape, |i| labels[i / per]);
        g.bce_with_logits(logits, &target)
    })
}

pub fn random_sample(rng: &mut impl Rng, id: &str, label: Label, h: usize, w: usize) -> ModalitySample {
    let mut images = BTreeMap::new();
    images.insert(ModalityId::Rgb, Tensor::from_fn(&[3, h, w], |_| rng.random()));
    images.insert(ModalityId::Depth, Tensor::from_fn(&[1, h, w], |_| rng.random()));
    images.insert(ModalityId::Ir, Tensor::from_fn(&[1, h, w], |_| rng.random()));
    ModalitySample {
        sample_id: id.into(),
        images,
        label,
        pai: (label == Label::Attack).then(|| "print".to_string()),
        subject_id: id.into(),
        dataset_id: "test".into(),
    }
}

/// Training-mode loss of a whole model against central differences over
/// every parameter; per-sample active sets are drawn at random.
pub fn model_instance(base: ModelConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlexModel::new(ModelConfig { seed, ..base }).unwrap();
    perturb_params(model.params_mut(), &mut rng);
    let (h, w) = base.image_size;
    let samples: Vec<ModalitySample> = (0..3)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Bonafide } else { Label::Attack };
            random_sample(&mut rng, &format!("s{i}"), label, h, w)
        })
        .collect();
    let sets = [ModalitySet::RGB, ModalitySet::RGB_DEPTH, ModalitySet::RGB_IR, ModalitySet::ALL];
    let batch: Vec<(&ModalitySample, ModalitySet)> =
        samples.iter().map(|s| (s, sets[rng.random_range(0..sets.len())])).collect();
    let analytic = model.loss_and_grads(&batch, true).unwrap().grads;
    let names: Vec<String> = model.params().params().keys().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = model.params().param(&name).unwrap().numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = model.params().param(&name).unwrap().data()[i];
            *slot = central_difference(|d| {
                model.params_mut().param_mut(&name).unwrap().data_mut()[i] = x + d;
                model.loss(&batch, true).unwrap()
            });
            model.params_mut().param_mut(&name).unwrap().data_mut()[i] = x;
        }
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        worst = worst.max(rel_error(a.data(), &numeric));
    }
    worst
}

// Exhaustive-sweep metric oracles: every candidate threshold is evaluated
// by direct counting.

pub fn oracle_rates(records: &[ScoreRecord], t: f64) -> (f64, f64) {
    let na = records.iter().filter(|r| r.label == Label::Attack).count();
    let nb = records.len() - na;
    let acc = records.iter().filter(|r| r.label == Label::Attack && r.score >= t).count();
    let rej = records.iter().filter(|r| r.label == Label::Bonafide && r.score < t).count();
    (acc as f64 / na as f64, rej as f64 / nb as f64)
}

/// (threshold, eer, apcer, bpcer)
pub fn oracle_eer(records: &[ScoreRecord]) -> (f64, f64, f64, f64) {
    let mut distinct: Vec<f64> = records.iter().map(|r| r.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in distinct.windows(2) {
        let m = pair[0] + (pair[1] - pair[0]) / 2.0;
        candidates.push(if m > pair[0] { m } else { pair[1] });
    }
    candidates.push(f64::INFINITY);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for t in candidates {
        let (a, b) = oracle_rates(records, t);
        if best.is_none_or(|(_, _, ba, bb)| (a - b).abs() < (ba - bb).abs()) {
            best = Some((t, (a + b) / 2.0, a, b));
        }
    }
    best.unwrap()
}

pub fn oracle_tpr(records: &[ScoreRecord], target: f64) -> f64 {
    let nb = records.iter().filter(|r| r.label == Label::Bonafide).count();
    let mut candidates: Vec<f64> = records.iter().map(|r| r.score).collect();
    candidates.push(f64::INFINITY);
    candidates
        .into_iter()
        .filter_map(|t| {
            let (apcer, _) = oracle_rates(records, t);
            let accepted = records.iter().filter(|r| r.label == Label::Bonafide && r.score >= t).count();
            (apcer <= target).then_some(accepted as f64 / nb as f64)
        })
        .fold(0.0, f64::max)
}

/// Random scores in [0, 1], half snapped to a coarse grid to force ties;
/// both classes always present.
pub fn random_records(rng: &mut impl Rng, n: usize) -> Vec<ScoreRecord> {
    let grid = rng.random_range(2..=20) as f64;
    (0..n)
        .map(|i| {
            let label = match i {
                0 => Label::Bonafide,
                1 => Label::Attack,
                _ if rng.random_bool(0.5) => Label::Bonafide,
                _ => Label::Attack,
            };
            let raw: f64 = rng.random();
            let score = if rng.random_bool(0.5) { (raw * grid).round() / grid } else { raw };
            ScoreRecord::new(format!("r{i}"), score, label, None).unwrap()
        })
        .collect()
}

/// Mann–Whitney AUC of `pos` over `neg`, ties counted one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// AUC of thresholding each sample's mean intensity in modality `m`,
/// bonafide as the positive class.
pub fn mean_intensity_auc(samples: &[ModalitySample], m: ModalityId) -> f64 {
    let mean = |s: &ModalitySample| s.image(m).unwrap().mean();
    let pos: Vec<f64> = samples.iter().filter(|s| s.label == Label::Bonafide).map(mean).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| s.label == Label::Attack).map(mean).collect();
    auc(&pos, &neg)
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}
