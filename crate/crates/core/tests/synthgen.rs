mod common;

use common::{mean_intensity_auc, phi};
use flexfas::sample::ModalityId;
use flexfas::synthgen::{generate, Separability, SynthConfig};

#[test]
fn strong_depth_cue_is_nearly_separable() {
    let cfg = SynthConfig {
        n_subjects: 250,
        image_size: (16, 16),
        separability: Separability { depth: 4.0, ..Default::default() },
        seed: 11,
        ..Default::default()
    };
    let ds = generate(&cfg).unwrap();
    assert_eq!(ds.samples.len(), 1000);
    let auc = mean_intensity_auc(&ds.samples, ModalityId::Depth);
    assert!(auc > 0.95, "AUC {auc}, closed form {}", phi(4.0 / 2f64.sqrt()));
}

#[test]
fn default_profile_orders_modalities() {
    let cfg = SynthConfig { n_subjects: 250, seed: 5, ..Default::default() };
    let ds = generate(&cfg).unwrap();
    let sep = cfg.separability;
    let mut aucs = Vec::new();
    for m in ModalityId::ALL {
        let auc = mean_intensity_auc(&ds.samples, m);
        let expected = phi(sep.get(m) / 2f64.sqrt());
        assert!((auc - expected).abs() < 0.04, "{m}: AUC {auc} vs {expected}");
        aucs.push(auc);
    }
    let (rgb, depth, ir) = (aucs[0], aucs[1], aucs[2]);
    assert!(depth > rgb && rgb > ir, "rgb {rgb} depth {depth} ir {ir}");
}
