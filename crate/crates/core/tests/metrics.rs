mod common;

use common::{oracle_eer, oracle_rates, oracle_tpr, random_records};
use flexfas::metrics::{
    build_report, classify_rates, eer_threshold, read_scores, tpr_at_fpr, write_scores, ThresholdRule,
};
use flexfas::sample::{Label, ScoreRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn records_strategy() -> impl Strategy<Value = Vec<ScoreRecord>> {
    (4usize..=200, any::<u64>()).prop_map(|(n, seed)| random_records(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

fn recs(bona: &[f64], attack: &[f64]) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    for (i, s) in bona.iter().enumerate() {
        out.push(ScoreRecord::new(format!("b{i}"), *s, Label::Bonafide, None).unwrap());
    }
    for (i, s) in attack.iter().enumerate() {
        out.push(ScoreRecord::new(format!("a{i}"), *s, Label::Attack, Some("print".into())).unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn operations_match_exhaustive_sweep(records in records_strategy(), t in 0.0f64..=1.0, target in 0.0005f64..0.9995) {
        let r = classify_rates(&records, t).unwrap();
        prop_assert_eq!((r.apcer, r.bpcer), oracle_rates(&records, t));
        prop_assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);

        let e = eer_threshold(&records).unwrap();
        prop_assert_eq!((e.threshold, e.eer, e.apcer, e.bpcer), oracle_eer(&records));

        for target in [0.001, 0.01, target] {
            prop_assert_eq!(tpr_at_fpr(&records, target).unwrap(), oracle_tpr(&records, target));
        }
    }

    #[test]
    fn rates_are_monotone_in_threshold(records in records_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (classify_rates(&records, lo).unwrap(), classify_rates(&records, hi).unwrap());
        prop_assert!(rh.apcer <= rl.apcer);
        prop_assert!(rh.bpcer >= rl.bpcer);
    }

    #[test]
    fn tpr_is_nondecreasing_in_target(records in records_strategy(), a in 0.0005f64..0.9995, b in 0.0005f64..0.9995) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&records, lo).unwrap() <= tpr_at_fpr(&records, hi).unwrap());
    }

    #[test]
    fn rank_statistics_survive_monotone_transforms(records in records_strategy(), t in 0.0f64..=1.0) {
        // x ↦ x³ is strictly increasing on [0, 1] and keeps scores in range.
        let f = |x: f64| x * x * x;
        let moved: Vec<ScoreRecord> = records
            .iter()
            .map(|r| ScoreRecord { score: f(r.score), ..r.clone() })
            .collect();
        // Distinct scores must stay distinct for ranks to be preserved.
        let mut before: Vec<f64> = records.iter().map(|r| r.score).collect();
        let mut after: Vec<f64> = moved.iter().map(|r| r.score).collect();
        before.sort_by(f64::total_cmp);
        before.dedup();
        after.sort_by(f64::total_cmp);
        after.dedup();
        prop_assume!(before.len() == after.len());

        prop_assert_eq!(classify_rates(&records, t).unwrap(), classify_rates(&moved, f(t)).unwrap());
        let (e0, e1) = (eer_threshold(&records).unwrap(), eer_threshold(&moved).unwrap());
        prop_assert_eq!((e0.eer, e0.apcer, e0.bpcer), (e1.eer, e1.apcer, e1.bpcer));
        prop_assert_eq!(tpr_at_fpr(&records, 0.01).unwrap(), tpr_at_fpr(&moved, 0.01).unwrap());
    }
}

#[test]
fn small_counting_examples() {
    let r = recs(&[0.9, 0.4], &[0.6, 0.1]);
    let rates = classify_rates(&r, 0.5).unwrap();
    assert_eq!((rates.apcer, rates.bpcer, rates.acer), (0.5, 0.5, 0.5));
    let e = eer_threshold(&r).unwrap();
    assert_eq!(e.eer, 0.5);
    assert!(e.threshold > 0.4 && e.threshold <= 0.6, "{}", e.threshold);
    assert_eq!((e.threshold, e.eer, e.apcer, e.bpcer), oracle_eer(&r));

    let r = recs(&[0.9, 0.8, 0.7], &[0.6, 0.2, 0.1]);
    assert_eq!(tpr_at_fpr(&r, 0.01).unwrap(), 1.0);
}

#[test]
fn identical_class_scores_follow_the_sweep() {
    let s = [0.2, 0.5, 0.5, 0.8];
    let r = recs(&s, &s);
    for target in [0.001, 0.2, 0.25, 0.5, 0.75, 0.99] {
        assert_eq!(tpr_at_fpr(&r, target).unwrap(), oracle_tpr(&r, target), "target {target}");
    }
    assert_eq!(tpr_at_fpr(&r, 0.25).unwrap(), 0.25);
}

#[test]
fn randomized_report_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let val = random_records(&mut rng, 50);
    let test = random_records(&mut rng, 50);
    let rep = build_report(&val, &test, ThresholdRule::EerOnValidation).unwrap();
    let (t, ..) = oracle_eer(&val);
    let (apcer, bpcer) = oracle_rates(&test, t);
    assert_eq!(rep.threshold, t);
    assert_eq!((rep.apcer, rep.bpcer), (apcer, bpcer));
    assert_eq!(rep.acer, (apcer + bpcer) / 2.0);
    assert_eq!(rep.eer, oracle_eer(&test).1);
    assert_eq!(rep.tpr_at_fpr_0_01, oracle_tpr(&test, 0.01));
    assert_eq!(rep.tpr_at_fpr_0_001, oracle_tpr(&test, 0.001));

    let mut buf = Vec::new();
    write_scores(&mut buf, &test).unwrap();
    let back = read_scores(&buf[..]).unwrap();
    assert_eq!(build_report(&val, &back, ThresholdRule::EerOnValidation).unwrap(), rep);
}
