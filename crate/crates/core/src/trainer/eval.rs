use ndarray::Array2;
use serde::Serialize;

use super::{match_scene, Matcher, PreparedDataset, TrainedModel};
use crate::error::{Error, Result};

/// Pooled segmentation scores. `per_class_iou` is NaN for a class that
/// appears in neither ground truth nor predictions; `miou` averages the
/// classes that appear in ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "nan_as_null")]
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    /// Rows are ground-truth classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of matched primitives whose majority ground-truth class is
    /// the class they were matched to; absent without primitives.
    pub matched_class_accuracy: Option<f64>,
}

fn nan_as_null<S: serde::Serializer>(v: &[f64], ser: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_nan() {
            seq.serialize_element(&None::<f64>)?;
        } else {
            seq.serialize_element(x)?;
        }
    }
    seq.end()
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows(s: &Array2<f64>) -> Vec<usize> {
    s.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Scores prediction/ground-truth pairs pooled over all scenes.
pub fn evaluate_predictions<P, G>(pairs: impl IntoIterator<Item = (P, G)>, num_classes: usize) -> Result<EvalReport>
where
    P: AsRef<[usize]>,
    G: AsRef<[u32]>,
{
    let c = num_classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for (pred, gt) in pairs {
        let (pred, gt) = (pred.as_ref(), gt.as_ref());
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} points", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= c || g as usize >= c {
                return Err(Error::InvalidArgument(format!("label out of range: pred {p}, gt {g}, C={c}")));
            }
            confusion[g as usize][p] += 1;
        }
    }
    let mut per_class_iou = vec![f64::NAN; c];
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        let tp = confusion[k][k];
        let gt_count: u64 = confusion[k].iter().sum();
        let pred_count: u64 = confusion.iter().map(|row| row[k]).sum();
        let union = gt_count + pred_count - tp;
        if union > 0 {
            per_class_iou[k] = tp as f64 / union as f64;
        }
        if gt_count > 0 {
            sum += per_class_iou[k];
            present += 1;
        }
    }
    let miou = if present == 0 { 0.0 } else { sum / present as f64 };
    Ok(EvalReport {
        per_class_iou,
        miou,
        confusion,
        matched_class_accuracy: None,
    })
}

pub fn evaluate(trained: &TrainedModel, data: &PreparedDataset) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let mut matched = 0usize;
    for scene in &data.scenes {
        let (f, s) = trained.model.predict(&scene.x)?;
        preds.push(argmax_rows(&s));
        let Some(prims) = trained.primitives.as_ref() else { continue };
        let (map, aff) = match match_scene(&trained.model, &f, prims, &scene.labels, Matcher::Hungarian) {
            Ok(r) => r,
            Err(Error::UnmatchableScene { .. }) => continue,
            Err(e) => return Err(e),
        };
        for (&k, &class) in &map.pi {
            let mut votes = vec![0usize; data.num_classes];
            for (i, &a) in aff.assign.iter().enumerate() {
                if a == k {
                    votes[scene.gt[i] as usize] += 1;
                }
            }
            let majority = argmax_counts(&votes);
            matched += 1;
            if majority == class {
                correct += 1;
            }
        }
    }
    let mut report = evaluate_predictions(preds.iter().zip(data.scenes.iter().map(|s| &s.gt)), data.num_classes)?;
    if trained.primitives.is_some() && matched > 0 {
        report.matched_class_accuracy = Some(correct as f64 / matched as f64);
    }
    Ok(report)
}

fn argmax_counts(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if c > v[best] {
            best = i;
        }
    }
    best
}
