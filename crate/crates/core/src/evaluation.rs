//! Metrics and experiment reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::domain::AuLabels;
use crate::error::{Error, Result};
use crate::synthdata::{count_unique_labels, sample_sparse_labels, LabeledCorpus, SampleMode};
use crate::trainer::{run_experiment, NullSink, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_au_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Ground-truth positives per AU.
    pub support: Vec<usize>,
}

/// Per-AU F1 (`2PR / (P + R)`, with 0 whenever the AU has no true
/// positives) and the unweighted macro mean.
pub fn f1_scores(predictions: &[AuLabels], truth: &[AuLabels]) -> Result<F1Report> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), truth.len())));
    }
    let num_aus = truth.first().map_or(0, AuLabels::len);
    let mut tp = vec![0usize; num_aus];
    let mut fp = vec![0usize; num_aus];
    let mut fn_ = vec![0usize; num_aus];
    for (p, t) in predictions.iter().zip(truth) {
        if p.len() != num_aus || t.len() != num_aus {
            return Err(Error::shape("label vectors of differing length"));
        }
        for u in 0..num_aus {
            match (p.get(u), t.get(u)) {
                (true, true) => tp[u] += 1,
                (true, false) => fp[u] += 1,
                (false, true) => fn_[u] += 1,
                (false, false) => {}
            }
        }
    }
    let per_au_f1: Vec<f64> = (0..num_aus)
        .map(|u| {
            let denom = 2 * tp[u] + fp[u] + fn_[u];
            if tp[u] == 0 { 0.0 } else { 2.0 * tp[u] as f64 / denom as f64 }
        })
        .collect();
    let macro_f1 = if num_aus == 0 { 0.0 } else { per_au_f1.iter().sum::<f64>() / num_aus as f64 };
    let support = (0..num_aus).map(|u| tp[u] + fn_[u]).collect();
    Ok(F1Report { per_au_f1, macro_f1, support })
}

/// One training run per `(ratio, mode)` budget; all runs share `base`'s seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub mode: SampleMode,
    pub labeled: usize,
    pub unique_count: usize,
    pub macro_f1: f64,
}

pub fn label_budget_sweep(base: &ExperimentConfig, corpus: &LabeledCorpus, ratios: &[f64], modes: &[SampleMode]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * modes.len());
    for &ratio in ratios {
        for &mode in modes {
            let mut cfg = base.clone();
            cfg.data.label_ratio = ratio;
            cfg.data.sample_mode = mode;
            let sampled = sample_sparse_labels(corpus, ratio, mode)?;
            let (_, report) = run_experiment(&cfg, corpus, &mut NullSink)?;
            rows.push(SweepRow {
                ratio,
                mode,
                labeled: sampled.num_visible(),
                unique_count: count_unique_labels(sampled.visible_labels()),
                macro_f1: report.final_val_f1(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ratio", "mode", "labeled", "unique_count", "macro_f1"])?;
    for r in rows {
        w.write_record([
            r.ratio.to_string(),
            r.mode.name().to_string(),
            r.labeled.to_string(),
            r.unique_count.to_string(),
            format!("{:.4}", r.macro_f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub report: TrainReport,
}

impl AblationRow {
    pub fn macro_f1(&self) -> f64 {
        self.report.final_val_f1()
    }
}

/// Trains each variant from the same seed and label sample.
pub fn ablation_table(base: &ExperimentConfig, corpus: &LabeledCorpus, variants: &[Ablation]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.ablation = variant;
            let (_, report) = run_experiment(&cfg, corpus, &mut NullSink)?;
            Ok(AblationRow { variant, report })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let num_aus = rows.iter().find_map(|r| r.report.final_val.as_ref().map(|f| f.per_au_f1.len())).unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["variant".to_string(), "modules".to_string()];
    header.extend((0..num_aus).map(|u| format!("au_{u}")));
    header.extend(["macro_f1", "pseudo_accuracy", "pseudo_acceptance"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
    for r in rows {
        let mut rec = vec![r.variant.name().to_string(), r.variant.modules().to_string()];
        match &r.report.final_val {
            Some(f) => rec.extend(f.per_au_f1.iter().map(|v| format!("{v:.4}"))),
            None => rec.extend((0..num_aus).map(|_| String::new())),
        }
        rec.push(format!("{:.4}", r.macro_f1()));
        rec.push(opt(r.report.pseudo_accuracy));
        rec.push(opt(r.report.pseudo_acceptance_rate));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(bits: &[&[u8]]) -> Vec<AuLabels> {
        bits.iter().map(|b| AuLabels::from_bits(b).unwrap()).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let t = rows(&[&[1, 0], &[0, 1], &[1, 1]]);
        let r = f1_scores(&t, &t).unwrap();
        assert_eq!(r.per_au_f1, vec![1.0, 1.0]);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.support, vec![2, 2]);
    }

    #[test]
    fn all_negative_scores_zero() {
        let t = rows(&[&[0, 0], &[0, 0]]);
        assert_eq!(f1_scores(&t, &t).unwrap().macro_f1, 0.0);
    }

    #[test]
    fn hand_counted_example() {
        // TP = 3, FP = 1, FN = 2 on a single AU.
        let pred = rows(&[&[1], &[1], &[1], &[1], &[0], &[0], &[0]]);
        let truth = rows(&[&[1], &[1], &[1], &[0], &[1], &[1], &[0]]);
        let f1 = f1_scores(&pred, &truth).unwrap().macro_f1;
        assert!((f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        assert!((f1 - 0.6667).abs() < 1e-4);
        assert!(f1_scores(&pred[..2], &truth).is_err());
    }

    proptest::proptest! {
        #[test]
        fn order_does_not_matter(
            pairs in proptest::collection::vec((proptest::collection::vec(proptest::bool::ANY, 3), proptest::collection::vec(proptest::bool::ANY, 3)), 1..50),
            rot in 0usize..50,
        ) {
            let (p, t): (Vec<AuLabels>, Vec<AuLabels>) = pairs.into_iter().map(|(a, b)| (AuLabels::new(a), AuLabels::new(b))).unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            p2.reverse();
            t2.reverse();
            proptest::prop_assert_eq!(f1_scores(&p, &t).unwrap(), f1_scores(&p2, &t2).unwrap());
        }
    }
}
