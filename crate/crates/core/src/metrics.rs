//! Presentation-attack-detection metrics.
//!
//! Bonafide is the positive class and a presentation is accepted as
//! bonafide iff `score >= threshold`. APCER is the fraction of attacks
//! accepted, BPCER the fraction of bonafide rejected, ACER their mean.
//! APCER pools every attack instrument; per-instrument rates are reported
//! alongside for information.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::sample::{Label, ScoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Threshold at the validation-set equal error rate (intra-dataset).
    EerOnValidation,
    /// Fixed threshold of 0.5 (cross-dataset).
    #[serde(rename = "fixed_0_5")]
    Fixed05,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl Rates {
    fn from_counts(attacks_accepted: usize, n_attack: usize, bonafide_rejected: usize, n_bonafide: usize) -> Self {
        let apcer = attacks_accepted as f64 / n_attack as f64;
        let bpcer = bonafide_rejected as f64 / n_bonafide as f64;
        Self { apcer, bpcer, acer: (apcer + bpcer) / 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Scores of each class, validated.
fn split_classes(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut attack = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(FlexError::ValueRange(format!(
                "score for `{}` is not finite",
                r.sample_id
            )));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Attack => attack.push(r.score),
        }
    }
    if bona.is_empty() || attack.is_empty() {
        return Err(FlexError::OneClassOnly(format!(
            "{} bonafide and {} attack records",
            bona.len(),
            attack.len()
        )));
    }
    Ok((bona, attack))
}

pub fn classify_rates(records: &[ScoreRecord], threshold: f64) -> Result<Rates> {
    let (bona, attack) = split_classes(records)?;
    let accepted_attacks = attack.iter().filter(|s| **s >= threshold).count();
    let rejected_bona = bona.iter().filter(|s| **s < threshold).count();
    Ok(Rates::from_counts(accepted_attacks, attack.len(), rejected_bona, bona.len()))
}

/// Threshold strictly above `lo` and at most `hi`, halfway when representable.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m <= lo {
        hi
    } else {
        m
    }
}

/// Equal-error-rate operating point.
///
/// Candidates are `-∞`, the midpoints of adjacent distinct scores, and `+∞`.
/// The candidate minimizing `|APCER − BPCER|` wins; ties go to the lower
/// threshold. The reported EER is `(APCER + BPCER) / 2` there.
pub fn eer_threshold(records: &[ScoreRecord]) -> Result<EerPoint> {
    let (bona, attack) = split_classes(records)?;
    let mut all: Vec<(f64, Label)> = bona
        .iter()
        .map(|s| (*s, Label::Bonafide))
        .chain(attack.iter().map(|s| (*s, Label::Attack)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nb, na) = (bona.len(), attack.len());

    // Ascending sweep: at threshold -∞ everything is accepted.
    let mut attacks_accepted = na;
    let mut bona_rejected = 0;
    let rates = Rates::from_counts(attacks_accepted, na, bona_rejected, nb);
    let mut best = EerPoint {
        threshold: f64::NEG_INFINITY,
        eer: rates.acer,
        apcer: rates.apcer,
        bpcer: rates.bpcer,
    };
    let mut best_gap = (rates.apcer - rates.bpcer).abs();
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        // Raising the threshold past `v` rejects every record scoring `v`.
        while i < all.len() && all[i].0 == v {
            match all[i].1 {
                Label::Attack => attacks_accepted -= 1,
                Label::Bonafide => bona_rejected += 1,
            }
            i += 1;
        }
        let threshold = if i < all.len() { midpoint(v, all[i].0) } else { f64::INFINITY };
        let r = Rates::from_counts(attacks_accepted, na, bona_rejected, nb);
        let gap = (r.apcer - r.bpcer).abs();
        if gap < best_gap {
            best_gap = gap;
            best = EerPoint { threshold, eer: r.acer, apcer: r.apcer, bpcer: r.bpcer };
        }
    }
    Ok(best)
}

/// Largest bonafide acceptance rate whose attack acceptance rate does not
/// exceed `fpr_target`; step-wise, without interpolation.
pub fn tpr_at_fpr(records: &[ScoreRecord], fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(FlexError::InvalidArgument(format!(
            "fpr_target must lie in (0, 1), got {fpr_target}"
        )));
    }
    let (mut bona, mut attack) = split_classes(records)?;
    bona.sort_by(|a, b| b.total_cmp(a));
    attack.sort_by(|a, b| b.total_cmp(a));
    let (nb, na) = (bona.len(), attack.len());
    // Descending distinct thresholds; TPR and FPR only grow as t falls.
    let mut thresholds: Vec<f64> = bona.iter().chain(&attack).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ib, mut ia) = (0, 0);
    let mut best = 0.0;
    for t in thresholds {
        while ib < nb && bona[ib] >= t {
            ib += 1;
        }
        while ia < na && attack[ia] >= t {
            ia += 1;
        }
        if ia as f64 / na as f64 > fpr_target {
            break;
        }
        best = ib as f64 / nb as f64;
    }
    Ok(best)
}

mod threshold_serde {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Number(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("bad threshold `{t}`"))),
        }
    }
}

/// Metrics of one protocol evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    /// Decision threshold applied to the test records.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    /// Equal error rate of the test records.
    pub eer: f64,
    #[serde(rename = "tpr_at_fpr_0.001")]
    pub tpr_at_fpr_0_001: f64,
    #[serde(rename = "tpr_at_fpr_0.01")]
    pub tpr_at_fpr_0_01: f64,
    pub n_bonafide: usize,
    pub n_attack: usize,
    pub threshold_rule: ThresholdRule,
    /// APCER restricted to each attack instrument (informational).
    pub apcer_per_pai: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn tpr_at_fpr(&self, target: f64) -> Option<f64> {
        if target == 0.001 {
            Some(self.tpr_at_fpr_0_001)
        } else if target == 0.01 {
            Some(self.tpr_at_fpr_0_01)
        } else {
            None
        }
    }
}

pub fn build_report(val: &[ScoreRecord], test: &[ScoreRecord], rule: ThresholdRule) -> Result<EvalReport> {
    let threshold = match rule {
        ThresholdRule::EerOnValidation => eer_threshold(val)?.threshold,
        ThresholdRule::Fixed05 => 0.5,
    };
    let rates = classify_rates(test, threshold)?;
    let eer = eer_threshold(test)?.eer;
    let mut per_pai: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in test.iter().filter(|r| r.label == Label::Attack) {
        let key = r.pai.clone().unwrap_or_else(|| "unknown".into());
        let entry = per_pai.entry(key).or_default();
        entry.1 += 1;
        if r.score >= threshold {
            entry.0 += 1;
        }
    }
    Ok(EvalReport {
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        threshold,
        eer,
        tpr_at_fpr_0_001: tpr_at_fpr(test, 0.001)?,
        tpr_at_fpr_0_01: tpr_at_fpr(test, 0.01)?,
        n_bonafide: test.iter().filter(|r| r.label == Label::Bonafide).count(),
        n_attack: test.iter().filter(|r| r.label == Label::Attack).count(),
        threshold_rule: rule,
        apcer_per_pai: per_pai
            .into_iter()
            .map(|(k, (acc, n))| (k, acc as f64 / n as f64))
            .collect(),
    })
}

const SCORE_HEADER: &str = "sample_id\tscore\tlabel\tpai";

/// One record per line: `sample_id`, `score`, `label`, `pai` (tab separated,
/// empty `pai` for none). Scores are written in shortest round-trip form.
pub fn write_scores(mut w: impl Write, records: &[ScoreRecord]) -> Result<()> {
    writeln!(w, "{SCORE_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.sample_id,
            r.score,
            r.label,
            r.pai.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

pub fn read_scores(r: impl BufRead) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        if i == 0 {
            if line.trim_end() != SCORE_HEADER {
                return Err(FlexError::Parse { line: 1, message: "unexpected score header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(FlexError::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let score: f64 = fields[1].parse().map_err(|_| FlexError::Parse {
            line: lineno,
            message: format!("bad score `{}`", fields[1]),
        })?;
        let label: Label = fields[2]
            .parse()
            .map_err(|e: FlexError| FlexError::Parse { line: lineno, message: e.to_string() })?;
        let pai = (!fields[3].is_empty()).then(|| fields[3].to_string());
        out.push(ScoreRecord::new(fields[0], score, label, pai)?);
    }
    Ok(out)
}

pub fn read_scores_file(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = std::fs::File::open(path).map_err(|_| FlexError::FileNotFound(path.to_path_buf()))?;
    read_scores(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(bona: &[f64], attack: &[f64]) -> Vec<ScoreRecord> {
        let mut v = Vec::new();
        for (i, s) in bona.iter().enumerate() {
            v.push(ScoreRecord::new(format!("b{i}"), *s, Label::Bonafide, None).unwrap());
        }
        for (i, s) in attack.iter().enumerate() {
            v.push(ScoreRecord::new(format!("a{i}"), *s, Label::Attack, Some("print".into())).unwrap());
        }
        v
    }

    #[test]
    fn separable_rates_are_zero() {
        let r = classify_rates(&recs(&[0.9, 0.8], &[0.3, 0.1]), 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));
    }

    #[test]
    fn overlapping_rates() {
        let r = classify_rates(&recs(&[0.9, 0.4], &[0.6, 0.1]), 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.5, 0.5, 0.5));
    }

    #[test]
    fn zero_threshold_accepts_everything() {
        let r = classify_rates(&recs(&[0.9, 0.0], &[0.6, 0.0, 0.2]), 0.0).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (1.0, 0.0, 0.5));
    }

    #[test]
    fn one_class_is_rejected() {
        let err = classify_rates(&recs(&[0.9], &[]), 0.5).unwrap_err();
        assert_eq!(err.code(), "ONE_CLASS_ONLY");
        assert_eq!(eer_threshold(&recs(&[], &[0.1])).unwrap_err().code(), "ONE_CLASS_ONLY");
        assert_eq!(tpr_at_fpr(&recs(&[0.2], &[]), 0.01).unwrap_err().code(), "ONE_CLASS_ONLY");
    }

    #[test]
    fn eer_on_separable_scores() {
        let p = eer_threshold(&recs(&[0.9, 0.8], &[0.3, 0.1])).unwrap();
        assert_eq!(p.eer, 0.0);
        assert!(p.threshold > 0.3 && p.threshold < 0.8);
    }

    #[test]
    fn eer_on_overlapping_scores() {
        let p = eer_threshold(&recs(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert_eq!(p.eer, 0.5);
        assert!(p.threshold > 0.4 && p.threshold <= 0.6);
        assert_eq!(p.apcer, p.bpcer);
    }

    #[test]
    fn eer_on_constant_scores() {
        let p = eer_threshold(&recs(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap();
        assert_eq!(p.eer, 0.5);
        assert_eq!(p.threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn tpr_with_clean_separation() {
        let r = recs(&[0.9, 0.8, 0.7], &[0.6, 0.2, 0.1]);
        assert_eq!(tpr_at_fpr(&r, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn tpr_target_outside_unit_interval_is_rejected() {
        let r = recs(&[0.9], &[0.1]);
        for bad in [1.0, 1.5, 0.0, -0.1, f64::NAN] {
            assert_eq!(tpr_at_fpr(&r, bad).unwrap_err().code(), "INVALID_ARGUMENT");
        }
    }

    #[test]
    fn fixed_rule_ignores_validation() {
        let test = recs(&[0.9, 0.4, 0.7], &[0.6, 0.1]);
        let a = build_report(&recs(&[0.1], &[0.9]), &test, ThresholdRule::Fixed05).unwrap();
        let b = build_report(&[], &test, ThresholdRule::Fixed05).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.threshold, 0.5);
    }

    #[test]
    fn eer_rule_on_separable_self_validation() {
        let r = recs(&[0.9, 0.8, 0.75], &[0.3, 0.1]);
        let rep = build_report(&r, &r, ThresholdRule::EerOnValidation).unwrap();
        assert_eq!(rep.acer, 0.0);
        assert_eq!(rep.acer, (rep.apcer + rep.bpcer) / 2.0);
        assert_eq!(rep.apcer_per_pai["print"], 0.0);
    }

    #[test]
    fn report_json_field_names() {
        let r = recs(&[0.5], &[0.5]);
        let rep = build_report(&r, &r, ThresholdRule::EerOnValidation).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in ["apcer", "bpcer", "acer", "eer", "threshold", "tpr_at_fpr_0.001", "tpr_at_fpr_0.01"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["threshold"], "-inf");
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn score_file_round_trip_is_exact() {
        let r = recs(&[0.1 + 0.2, 1.0 / 3.0], &[std::f64::consts::FRAC_1_SQRT_2]);
        let mut buf = Vec::new();
        write_scores(&mut buf, &r).unwrap();
        let back = read_scores(&buf[..]).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn midpoint_stays_inside_interval() {
        let a = 0.5f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert_eq!(midpoint(a, b), b);
        assert_eq!(midpoint(0.2, 0.4), 0.30000000000000004);
    }
}
