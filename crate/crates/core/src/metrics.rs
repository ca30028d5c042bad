//! Soft dice loss for training and hard dice scores for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smoothing constant of the soft dice loss.
pub const DEFAULT_DICE_SMOOTH: f64 = 1e-5;

/// Per-class sums the soft dice loss and its gradient are built from.
#[derive(Clone, Debug)]
pub struct SoftDiceTerms<T> {
    /// `sum p * g` per class.
    pub overlap: Vec<T>,
    /// `sum p^2 + sum g^2` per class.
    pub denom: Vec<T>,
}

pub(crate) fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `1 - mean_c (2 sum p g + s) / (sum p^2 + sum g^2 + s)` over `[n, k, plane]`
/// probabilities and `[n, plane]` labels, summing over the whole batch.
pub fn soft_dice_loss<T: Scalar>(
    probs: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    plane: usize,
    smooth: T,
) -> Result<(T, SoftDiceTerms<T>)> {
    if probs.len() != n * k * plane || labels.len() != n * plane {
        return Err(Error::shape(
            "dice_loss",
            format!("probs [{n},{k},{plane}] = {} values vs {} labels", probs.len(), labels.len()),
        ));
    }
    check_labels(labels, k)?;
    let mut overlap = vec![T::zero(); k];
    let mut denom = vec![T::zero(); k];
    for b in 0..n {
        let lab = &labels[b * plane..(b + 1) * plane];
        for c in 0..k {
            let p = &probs[(b * k + c) * plane..(b * k + c + 1) * plane];
            for (&pv, &l) in p.iter().zip(lab) {
                denom[c] += pv * pv;
                if l as usize == c {
                    overlap[c] += pv;
                    denom[c] += T::one();
                }
            }
        }
    }
    let two = T::lit(2.0);
    let mean = (0..k).map(|c| (two * overlap[c] + smooth) / (denom[c] + smooth)).sum::<T>()
        / T::from_usize(k).unwrap();
    Ok((T::one() - mean, SoftDiceTerms { overlap, denom }))
}

#[allow(clippy::too_many_arguments)]
pub fn soft_dice_loss_backward<T: Scalar>(
    probs: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    plane: usize,
    smooth: T,
    terms: &SoftDiceTerms<T>,
    grad_loss: T,
    grad_probs: &mut [T],
) {
    let two = T::lit(2.0);
    let scale = -grad_loss / T::from_usize(k).unwrap();
    for c in 0..k {
        let u = terms.denom[c] + smooth;
        let a = two / u;
        let bcoef = two * (two * terms.overlap[c] + smooth) / (u * u);
        for b in 0..n {
            let lab = &labels[b * plane..(b + 1) * plane];
            let off = (b * k + c) * plane;
            for i in 0..plane {
                let g = if lab[i] as usize == c { a } else { T::zero() };
                grad_probs[off + i] += scale * (g - bcoef * probs[off + i]);
            }
        }
    }
}

/// Hard-dice pixel counts per class; additive across slices of a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiceCounts {
    pub predicted: Vec<u64>,
    pub truth: Vec<u64>,
    pub overlap: Vec<u64>,
}

impl DiceCounts {
    pub fn new(classes: usize) -> Self {
        Self { predicted: vec![0; classes], truth: vec![0; classes], overlap: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.truth.len()
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("dice_score", format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
        }
        let k = self.classes();
        check_labels(pred, k)?;
        check_labels(truth, k)?;
        for (&p, &t) in pred.iter().zip(truth) {
            self.predicted[p as usize] += 1;
            self.truth[t as usize] += 1;
            if p == t {
                self.overlap[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> DiceReport {
        let per_class = (0..self.classes())
            .map(|c| {
                let total = self.predicted[c] + self.truth[c];
                if total == 0 {
                    1.0
                } else {
                    2.0 * self.overlap[c] as f64 / total as f64
                }
            })
            .collect();
        DiceReport::from_per_class(per_class)
    }
}

/// Per-class hard dice plus the foreground average (class 0 excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub average: f64,
}

impl DiceReport {
    pub fn from_per_class(per_class: Vec<f64>) -> Self {
        let fg = &per_class[1.min(per_class.len())..];
        let average = if fg.is_empty() { per_class.first().copied().unwrap_or(1.0) } else { fg.iter().sum::<f64>() / fg.len() as f64 };
        Self { per_class, average }
    }

    /// Element-wise mean of several reports, in the order given.
    pub fn mean(reports: &[DiceReport]) -> Option<DiceReport> {
        let first = reports.first()?;
        let k = first.per_class.len();
        let mut acc = vec![0.0; k];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(&r.per_class) {
                *a += v;
            }
        }
        let m = reports.len() as f64;
        let per_class: Vec<f64> = acc.into_iter().map(|v| v / m).collect();
        let average = reports.iter().map(|r| r.average).sum::<f64>() / m;
        Some(DiceReport { per_class, average })
    }
}

/// Hard dice `2|A n B| / (|A| + |B|)` per class; absent-in-both scores 1.
pub fn dice_score(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<DiceReport> {
    let mut counts = DiceCounts::new(num_classes);
    counts.add(pred, truth)?;
    Ok(counts.report())
}
