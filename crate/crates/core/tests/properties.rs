mod common;

use std::collections::BTreeMap;

use common::random_sample;
use flexfas::augment::{draw_drops, drop_modal, mask_modalities, DropModalConfig};
use flexfas::backbones::{Arch, FlexModel, ModelConfig};
use flexfas::fusion::{trace, FeatureBundle, Fusion, FusionConfig, FusionKind};
use flexfas::params::ParamStore;
use flexfas::sample::{validate_sample, Label, ModalityId, ModalitySample, ModalitySet};
use flexfas::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
enum Violation {
    NoRgb,
    RgbOneChannel,
    TwoChannels(ModalityId),
    WrongRank(ModalityId),
    SizeMismatch(ModalityId),
    Negative(ModalityId),
    AboveOne(ModalityId),
    NotFinite(ModalityId),
}

fn modality() -> impl Strategy<Value = ModalityId> {
    prop_oneof![Just(ModalityId::Rgb), Just(ModalityId::Depth), Just(ModalityId::Ir)]
}

fn violation() -> impl Strategy<Value = Option<Violation>> {
    prop_oneof![
        3 => Just(None),
        1 => Just(Some(Violation::NoRgb)),
        1 => Just(Some(Violation::RgbOneChannel)),
        1 => modality().prop_map(|m| Some(Violation::TwoChannels(m))),
        1 => modality().prop_map(|m| Some(Violation::WrongRank(m))),
        1 => prop_oneof![Just(ModalityId::Depth), Just(ModalityId::Ir)].prop_map(|m| Some(Violation::SizeMismatch(m))),
        1 => modality().prop_map(|m| Some(Violation::Negative(m))),
        1 => modality().prop_map(|m| Some(Violation::AboveOne(m))),
        1 => modality().prop_map(|m| Some(Violation::NotFinite(m))),
    ]
}

fn corrupt_pixel(s: &mut ModalitySample, m: ModalityId, v: f64, at: usize) {
    let img = s.images.get_mut(&m).unwrap();
    let n = img.numel();
    img.data_mut()[at % n] = v;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// A sample is accepted iff no invariant was broken.
    #[test]
    fn validate_sample_accepts_iff_valid(
        seed in any::<u64>(),
        h in 1usize..6,
        w in 1usize..6,
        present in prop_oneof![Just(ModalitySet::RGB), Just(ModalitySet::RGB_DEPTH), Just(ModalitySet::RGB_IR), Just(ModalitySet::ALL)],
        ir_rgb_like in any::<bool>(),
        v in violation(),
        at in any::<usize>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = random_sample(&mut rng, "x", Label::Bonafide, h, w);
        s.images.retain(|m, _| present.contains(*m));
        if ir_rgb_like && present.contains(ModalityId::Ir) {
            s.images.insert(ModalityId::Ir, Tensor::full(&[3, h, w], 0.5));
        }
        prop_assert!(validate_sample(&s).is_ok());

        let applies = |m: ModalityId| present.contains(m);
        let broken = match v {
            None => false,
            Some(Violation::NoRgb) => { s.images.remove(&ModalityId::Rgb); true }
            Some(Violation::RgbOneChannel) => { s.images.insert(ModalityId::Rgb, Tensor::full(&[1, h, w], 0.5)); true }
            Some(Violation::TwoChannels(m)) if applies(m) => { s.images.insert(m, Tensor::full(&[2, h, w], 0.5)); true }
            Some(Violation::WrongRank(m)) if applies(m) => { s.images.insert(m, Tensor::full(&[h * w], 0.5)); true }
            Some(Violation::SizeMismatch(m)) if applies(m) => { s.images.insert(m, Tensor::full(&[1, h + 1, w], 0.5)); true }
            Some(Violation::Negative(m)) if applies(m) => { corrupt_pixel(&mut s, m, -1e-9, at); true }
            Some(Violation::AboveOne(m)) if applies(m) => { corrupt_pixel(&mut s, m, 1.0 + 1e-9, at); true }
            Some(Violation::NotFinite(m)) if applies(m) => { corrupt_pixel(&mut s, m, f64::NAN, at); true }
            Some(_) => false,
        };
        prop_assert_eq!(validate_sample(&s).is_ok(), !broken, "{:?}", v);
    }

    #[test]
    fn drop_modal_keeps_rgb_and_shapes(seed in any::<u64>(), p_depth in 0.0f64..=1.0, p_ir in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, "x", Label::Attack, 3, 4);
        let cfg = DropModalConfig { p_depth, p_ir, seed };
        let out = drop_modal(&s, &cfg, &mut rng);
        prop_assert_eq!(out.image(ModalityId::Rgb), s.image(ModalityId::Rgb));
        for m in ModalityId::ALL {
            prop_assert_eq!(out.image(m).unwrap().shape(), s.image(m).unwrap().shape());
            let t = out.image(m).unwrap();
            prop_assert!(t == s.image(m).unwrap() || t.is_zero());
        }
    }

    #[test]
    fn equal_seeds_give_equal_drop_patterns(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let cfg = DropModalConfig { p_depth: p, p_ir: p, seed };
        let (mut a, mut b) = (cfg.worker_rng(0), cfg.worker_rng(0));
        let pa: Vec<ModalitySet> = (0..64).map(|_| draw_drops(&cfg, &mut a)).collect();
        let pb: Vec<ModalitySet> = (0..64).map(|_| draw_drops(&cfg, &mut b)).collect();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn masks_compose_by_intersection(seed in any::<u64>(), a in 0u8..4, b in 0u8..4) {
        let sets = [ModalitySet::RGB, ModalitySet::RGB_DEPTH, ModalitySet::RGB_IR, ModalitySet::ALL];
        let (a, b) = (sets[a as usize], sets[b as usize]);
        let s = random_sample(&mut ChaCha8Rng::seed_from_u64(seed), "x", Label::Bonafide, 2, 2);
        let twice = mask_modalities(&mask_modalities(&s, a).unwrap(), b).unwrap();
        let once = mask_modalities(&s, a.intersection(b).union(ModalitySet::RGB)).unwrap();
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn fusion_shape_range_and_softmax(
        kind in prop_oneof![Just(FusionKind::Concat), Just(FusionKind::Se), Just(FusionKind::CrossAttention)],
        half in 1usize..4,
        out_c in 1usize..6,
        h in 1usize..4,
        w in 1usize..4,
        seed in any::<u64>(),
    ) {
        let c = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fusion::new(FusionConfig::new(kind, c).with_out_channels(out_c), ModalitySet::ALL, "fusion").unwrap();
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        let bundle = FeatureBundle::from_grid(
            ModalityId::ALL.iter().map(|m| (*m, common::random_tensor(&mut rng, &[c, h, w], 1.0))).collect(),
        ).unwrap();
        let tr = trace(&f, &store, &bundle).unwrap();
        prop_assert_eq!(tr.output.shape(), &[out_c, h, w]);
        prop_assert!(tr.output.data().iter().all(|v| *v >= 0.0));
        for att in tr.attention.values() {
            let n = h * w;
            prop_assert_eq!(att.shape(), &[n, n]);
            for row in att.data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0) || n == 1);
            }
        }
    }

    #[test]
    fn cross_attention_is_permutation_equivariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (c, h, w) = (2, 2, 3);
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fusion::new(FusionConfig::new(FusionKind::CrossAttention, c), ModalitySet::ALL, "fusion").unwrap();
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        let feats: BTreeMap<ModalityId, Tensor> =
            ModalityId::ALL.iter().map(|m| (*m, common::random_tensor(&mut rng, &[c, h, w], 2.0))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |t: &Tensor| Tensor::from_fn(t.shape(), |i| {
            let (ch, p) = (i / n, i % n);
            t.data()[ch * n + perm[p]]
        });
        let base = trace(&f, &store, &FeatureBundle::from_grid(feats.iter().map(|(m, t)| (*m, t.clone())).collect()).unwrap()).unwrap();
        let moved = trace(&f, &store, &FeatureBundle::from_grid(feats.iter().map(|(m, t)| (*m, permute(t))).collect()).unwrap()).unwrap();
        prop_assert!(permute(&base.pre_conv).max_abs_diff(&moved.pre_conv) < 1e-12);
        prop_assert!(permute(&base.output).max_abs_diff(&moved.output) < 1e-12);
    }
}

#[test]
fn rgb_only_prediction_ignores_depth_and_ir() {
    let model = FlexModel::new(ModelConfig { feature_channels: 4, image_size: (8, 8), ..ModelConfig::new(Arch::ToyCnn) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_sample(&mut rng, "x", Label::Bonafide, 8, 8);
    let base = model.predict(&s, ModalitySet::RGB).unwrap();
    for _ in 0..10 {
        let mut t = random_sample(&mut rng, "x", Label::Bonafide, 8, 8);
        t.images.insert(ModalityId::Rgb, s.image(ModalityId::Rgb).unwrap().clone());
        assert_eq!(model.predict(&t, ModalitySet::RGB).unwrap().to_bits(), base.to_bits());
    }
    let mut no_aux = s.clone();
    no_aux.images.retain(|m, _| *m == ModalityId::Rgb);
    assert_eq!(model.predict(&no_aux, ModalitySet::RGB).unwrap().to_bits(), base.to_bits());
}
