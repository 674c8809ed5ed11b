//! Confusion-matrix mIoU with the ignore class excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IGNORE_CLASS;

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub num_classes: usize,
    /// Row = label, column = prediction.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Mean IoU over classes with a non-empty union, in percent. `None` when
    /// no class qualifies.
    pub miou: Option<f64>,
    /// Per-class IoU in percent, index = class id; `None` for class 0 and
    /// for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, predictions: &[u32], labels: &[u32]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Data(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        let k = self.num_classes;
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == IGNORE_CLASS {
                continue;
            }
            if p as usize >= k || y as usize >= k {
                return Err(Error::Data(format!("class id outside [0, {k}): label {y}, prediction {p}")));
            }
            self.counts[y as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn result(&self) -> MiouResult {
        let k = self.num_classes;
        let mut per_class = vec![None; k];
        for (c, slot) in per_class.iter_mut().enumerate().skip(1) {
            let inter = self.counts[c * k + c];
            let label_c: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred_c: u64 = (0..k).map(|y| self.counts[y * k + c]).sum();
            let union = label_c + pred_c - inter;
            if union > 0 {
                *slot = Some(100.0 * inter as f64 / union as f64);
            }
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        MiouResult { miou, per_class }
    }
}

pub fn miou(predictions: &[u32], labels: &[u32], num_classes: usize) -> Result<MiouResult> {
    let mut c = Confusion::new(num_classes);
    c.add(predictions, labels)?;
    Ok(c.result())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [1, 2, 3, 3, 0, 5];
        assert_eq!(miou(&y, &y, 14).unwrap().miou, Some(100.0));
    }

    #[test]
    fn half_recall_single_class() {
        let labels = [1, 1, 1, 1];
        let preds = [1, 1, 0, 0];
        let r = miou(&preds, &labels, 14).unwrap();
        assert_eq!(r.miou, Some(50.0));
        assert_eq!(r.per_class[1], Some(50.0));
    }

    #[test]
    fn ignore_only_is_undefined() {
        let r = miou(&[1, 2, 3], &[0, 0, 0], 14).unwrap();
        assert_eq!(r.miou, None);
        assert!(r.per_class.iter().all(Option::is_none));
    }

    #[test]
    fn ignored_nodes_do_not_count_as_false_positives() {
        let r = miou(&[1, 1, 1], &[1, 0, 0], 14).unwrap();
        assert_eq!(r.miou, Some(100.0));
    }

    #[test]
    fn length_mismatch_is_data_error() {
        assert!(matches!(miou(&[1], &[1, 2], 14), Err(Error::Data(_))));
    }

    #[test]
    fn invariant_under_node_permutation() {
        let labels = [1, 2, 2, 3, 0, 4, 4, 4];
        let preds = [1, 2, 3, 3, 2, 4, 1, 4];
        let perm = [7, 3, 0, 5, 1, 6, 2, 4];
        let a = miou(&preds, &labels, 14).unwrap();
        let pl: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let pp: Vec<u32> = perm.iter().map(|&i| preds[i]).collect();
        assert_eq!(miou(&pp, &pl, 14).unwrap(), a);
    }
}
