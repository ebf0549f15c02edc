use flexfas::backbones::{Arch, FlexModel, ModelConfig};
use flexfas::protocols::manifest::Split;
use flexfas::protocols::score_samples;
use flexfas::sample::{Label, ModalitySample, ModalitySet};
use flexfas::synthgen::{generate, SynthConfig};
use flexfas::trainer::{train, TrainConfig};

fn split(seed: u64) -> (Vec<ModalitySample>, Vec<ModalitySample>) {
    let ds = generate(&SynthConfig { seed, ..Default::default() }).unwrap();
    let mut train_s = Vec::new();
    let mut test_s = Vec::new();
    for (s, row) in ds.samples.into_iter().zip(ds.manifest.rows()) {
        match row.split {
            Split::Train => train_s.push(s),
            Split::Test => test_s.push(s),
            Split::Val => {}
        }
    }
    (train_s, test_s)
}

fn model(seed: u64) -> FlexModel {
    FlexModel::new(ModelConfig { feature_channels: 8, seed, ..ModelConfig::new(Arch::ToyCnn) }).unwrap()
}

#[test]
fn loss_falls_and_classes_separate() {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let (train_s, test_s) = split(seed);
        let mut m = model(seed);
        let cfg = TrainConfig { epochs: 3, lr_halving_epoch: 3, seed, ..Default::default() };
        let log = train(&mut m, &train_s, ModalitySet::ALL, &cfg).unwrap();
        assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
        ratios.push(log.epoch_loss.last().unwrap() / log.epoch_loss[0]);

        let scores = score_samples(&m, &test_s, ModalitySet::ALL).unwrap();
        let mean = |l: Label| {
            let v: Vec<f64> = scores.iter().filter(|r| r.label == l).map(|r| r.score).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Label::Bonafide) > mean(Label::Attack), "seed {seed}");
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 1.0, "median final/first loss ratio {}", ratios[2]);
}

#[test]
fn nonfinite_loss_aborts_the_run() {
    let (train_s, _) = split(1);
    let mut m = model(1);
    m.params_mut().param_mut("head.fc.bias").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig { epochs: 2, lr_halving_epoch: 2, batch_size: 16, ..Default::default() };
    let err = train(&mut m, &train_s[..64], ModalitySet::ALL, &cfg).unwrap_err();
    assert_eq!(err.code(), "NONFINITE_LOSS", "{err}");
    assert!(err.to_string().contains("batch 0"), "{err}");
}
