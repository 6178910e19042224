//! Accuracy, token error rate, and the per-layer weight table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::FusionModel;
use crate::stackio::TaskKind;

pub fn accuracy(predictions: &[usize], references: &[usize]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Domain("accuracy over zero items".into()));
    }
    if predictions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / references.len() as f64)
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer(hypothesis: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference tokens.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64> {
    let (mut edits, mut tokens) = (0, 0);
    for (hyp, reference) in pairs {
        edits += edit_distance(reference, hyp);
        tokens += reference.len();
    }
    if tokens == 0 {
        return Err(Error::Domain("WER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / tokens as f64)
}

/// One row of the layer-weight table.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    /// 1-based model index.
    pub model: usize,
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub mode: FusionMode,
    pub task: TaskKind,
    pub rows: Vec<WeightRow>,
    /// Model mixture (`p`, or the last-layer weights); empty for naive.
    pub mixture: Vec<f64>,
}

impl WeightReport {
    /// Sum of layer weights per model.
    pub fn model_totals(&self) -> Vec<f64> {
        let m = self.rows.iter().map(|r| r.model).max().unwrap_or(0);
        let mut totals = vec![0.0; m];
        for r in &self.rows {
            totals[r.model - 1] += r.weight;
        }
        totals
    }

    /// CSV with header `model,layer,weight`. Mixture entries follow with
    /// `layer` set to `p`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "layer", "weight"]).unwrap();
        for r in &self.rows {
            w.write_record([r.model.to_string(), r.layer.to_string(), r.weight.to_string()])
                .unwrap();
        }
        for (i, p) in self.mixture.iter().enumerate() {
            w.write_record([(i + 1).to_string(), "p".to_string(), p.to_string()])
                .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Normalized layer weights of a model: per-model distributions for
/// structured and probability modes, slices of one global distribution for
/// naive, and `v_i` on each model's final layer for last-layer fusion.
pub fn weight_report(model: &FusionModel, task: TaskKind, layer_counts: &[usize]) -> Result<WeightReport> {
    let weights = model.fusion.layer_weights(model.mode, layer_counts)?;
    let rows = weights
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &w)| WeightRow {
                model: i + 1,
                layer: j,
                weight: w,
            })
        })
        .collect();
    let mixture = match model.mode {
        FusionMode::Naive => Vec::new(),
        mode => model.fusion.mixture(mode)?,
    };
    Ok(WeightReport {
        mode: model.mode,
        task,
        rows,
        mixture,
    })
}

/// Per-record metric rows (`record_id,metric,value`) for `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub record_id: String,
    pub metric: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "metric", "value"]).unwrap();
    for r in rows {
        w.write_record([r.record_id.as_str(), r.metric.as_str(), &r.value.to_string()])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionParams;
    use crate::heads::{DownstreamHead, HeadKind};
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn wer_cases() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((wer(&[1, 3], &[1, 2, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&[2, 3], &[1]).unwrap(), 2.0);
        assert!(matches!(wer(&[1], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn corpus_wer_pools_edits() {
        let refs: [&[usize]; 2] = [&[1, 2, 3], &[4]];
        let hyps: [&[usize]; 2] = [&[1, 3], &[4]];
        let w = corpus_wer(hyps.iter().copied().zip(refs.iter().copied())).unwrap();
        assert_eq!(w, 0.25);
    }

    fn report_for(mode: FusionMode, counts: &[usize]) -> WeightReport {
        let model = FusionModel {
            mode,
            fusion: FusionParams::uniform(mode, counts, false),
            heads: vec![DownstreamHead::zeros(HeadKind::Utterance, 2, 2).unwrap()],
        };
        weight_report(&model, TaskKind::UtteranceClassification, counts).unwrap()
    }

    #[test]
    fn fresh_structured_weights_are_uniform_per_model() {
        let r = report_for(FusionMode::Structured, &[13, 13]);
        assert_eq!(r.rows.len(), 26);
        assert!(r.rows.iter().all(|row| (row.weight - 1.0 / 13.0).abs() < 1e-15));
        assert_eq!(r.mixture, vec![0.5, 0.5]);
    }

    #[test]
    fn fresh_naive_weights_are_uniform_globally() {
        let r = report_for(FusionMode::Naive, &[13, 13]);
        assert!(r.rows.iter().all(|row| (row.weight - 1.0 / 26.0).abs() < 1e-15));
        assert!(r.mixture.is_empty());
    }

    #[test]
    fn csv_layout() {
        let csv = report_for(FusionMode::Structured, &[2]).to_csv();
        assert_eq!(csv, "model,layer,weight\n1,0,0.5\n1,1,0.5\n1,p,1\n");
        let rows = [MetricRow {
            record_id: "u1".into(),
            metric: "correct".into(),
            value: 1.0,
        }];
        assert_eq!(metrics_csv(&rows), "record_id,metric,value\nu1,correct,1\n");
    }

    proptest! {
        #[test]
        fn edit_distance_is_symmetric_and_zero_on_self(
            a in prop::collection::vec(0usize..5, 0..12),
            b in prop::collection::vec(0usize..5, 0..12),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }

        #[test]
        fn corpus_metrics_ignore_order(
            pairs in prop::collection::vec(
                (prop::collection::vec(1usize..5, 0..6), prop::collection::vec(1usize..5, 1..6)), 1..8),
            rot in 0usize..8,
        ) {
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let w1 = corpus_wer(pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice()))).unwrap();
            let w2 = corpus_wer(rotated.iter().map(|(h, r)| (h.as_slice(), r.as_slice()))).unwrap();
            prop_assert_eq!(w1, w2);

            let preds: Vec<usize> = pairs.iter().map(|(h, _)| h.len()).collect();
            let refs: Vec<usize> = pairs.iter().map(|(_, r)| r.len()).collect();
            let mut pr: Vec<(usize, usize)> = preds.iter().copied().zip(refs.iter().copied()).collect();
            pr.rotate_left(k);
            let (p2, r2): (Vec<usize>, Vec<usize>) = pr.into_iter().unzip();
            prop_assert_eq!(accuracy(&preds, &refs).unwrap(), accuracy(&p2, &r2).unwrap());
        }
    }
}
