//! Confusion matrices and intersection-over-union scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::image::Image;
use crate::mask::{MaskError, SegMask, IGNORE};
use crate::models::{ModelError, SegModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("prediction has class {value} at pixel {index}, expected below {classes}")]
    PredictionClass { index: usize, value: u8, classes: usize },
    #[error("cannot merge a {0}-class matrix into a {1}-class matrix")]
    ClassMismatch(usize, usize),
    #[error("no evaluated pixels")]
    Empty,
    #[error("{0} predictions for {1} ground-truth masks")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, k)).sum()
    }

    /// Count every pixel whose ground truth is not ignored.
    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<(), MetricsError> {
        pred.check_size(gt.height(), gt.width())?;
        gt.validate(self.classes)?;
        for (index, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
            if g == IGNORE {
                continue;
            }
            if p as usize >= self.classes {
                return Err(MetricsError::PredictionClass { index, value: p, classes: self.classes });
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::ClassMismatch(other.classes, self.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row_sum(k) + self.col_sum(k) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> Result<f64, MetricsError> {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// IoU weighted by ground-truth class frequency.
    pub fn fwiou(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(self
            .iou()
            .iter()
            .enumerate()
            .map(|(k, iou)| self.row_sum(k) as f64 / total as f64 * iou.unwrap_or(0.0))
            .sum())
    }

    pub fn report(&self) -> Result<IouReport, MetricsError> {
        Ok(IouReport { per_class: self.iou(), miou: self.miou()?, fwiou: self.fwiou()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
}

/// Confusion matrix over paired prediction/ground-truth lists.
pub fn confusion(classes: usize, preds: &[SegMask], gts: &[SegMask]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::CountMismatch(preds.len(), gts.len()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(cm)
}

/// mIoU of a reference segmenter applied to translated source images, against
/// the source masks. `translate` maps a `[1, C, H, W]` batch to the target domain.
pub fn semantic_preservation<F>(reference: &SegModel, translate: F, scenes: &[(&Image, &SegMask)]) -> Result<f64, MetricsError>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>, ModelError>,
{
    let mut cm = ConfusionMatrix::new(reference.classes);
    for (img, mask) in scenes {
        let translated = translate(&img.batched())?;
        let pred = reference.predict(&translated)?;
        cm.accumulate(&pred[0], mask)?;
    }
    cm.miou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ignored_pixels_do_not_count() {
        let gt = SegMask::new(1, 3, vec![0, IGNORE, 1]).unwrap();
        let pred = SegMask::new(1, 3, vec![0, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = SegMask::new(1, 2, vec![0, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.iou(), vec![Some(1.0), None, None]);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(ConfusionMatrix::new(2).fwiou().is_err());
    }
}
