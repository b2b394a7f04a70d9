use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Classification and segmentation scores, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Macro precision, recall and F1 (0 for a class with an empty
/// denominator) and mIoU over classes with `TP + FP + FN > 0`.
pub fn compute_metrics(confusion: &Confusion) -> ClassMetrics {
    let k = confusion.counts.len();
    let c = &confusion.counts;
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let mut ious = Vec::with_capacity(k);
    let mut correct = 0;
    for i in 0..k {
        let tp = c[i][i];
        let pred: u64 = (0..k).map(|t| c[t][i]).sum();
        let truth: u64 = c[i].iter().sum();
        correct += tp;
        let p = ratio(tp, pred);
        let r = ratio(tp, truth);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let union = pred + truth - tp;
        ious.push((union > 0).then(|| 100.0 * tp as f64 / union as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let kf = k.max(1) as f64;
    ClassMetrics {
        accuracy: 100.0 * ratio(correct, confusion.total()),
        precision: 100.0 * p_sum / kf,
        recall: 100.0 * r_sum / kf,
        f1: 100.0 * f_sum / kf,
        miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        per_class_iou: ious,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val: Option<ClassMetrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Lowest 1-based epoch at which the validation mIoU reached
    /// `target_miou`, when a target was given.
    pub target_miou: Option<f64>,
    pub epochs_to_target: Option<usize>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_val(&self) -> Option<&ClassMetrics> {
        self.last().and_then(|e| e.val.as_ref())
    }

    /// First 1-based epoch whose validation mIoU is at least `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.val.as_ref().is_some_and(|m| m.miou >= target))
            .map(|e| e.epoch + 1)
    }

    /// Long-format CSV: `epoch,split,metric,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,split,metric,value")?;
        writeln!(w, "0,train,loss,{}", self.initial_train_loss)?;
        for e in &self.epochs {
            let n = e.epoch + 1;
            writeln!(w, "{n},train,loss,{}", e.train_loss)?;
            writeln!(w, "{n},train,lr,{}", e.lr)?;
            writeln!(w, "{n},train,seconds,{}", e.seconds)?;
            if let Some(l) = e.val_loss {
                writeln!(w, "{n},val,loss,{l}")?;
            }
            if let Some(m) = &e.val {
                for (name, v) in [
                    ("accuracy", m.accuracy),
                    ("precision", m.precision),
                    ("recall", m.recall),
                    ("f1", m.f1),
                    ("miou", m.miou),
                ] {
                    writeln!(w, "{n},val,{name},{v}")?;
                }
            }
        }
        Ok(())
    }
}
