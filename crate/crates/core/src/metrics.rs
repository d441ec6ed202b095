//! Binary overlap metrics from confusion counts. Any label other than 0
//! counts as foreground. A ratio whose denominator is zero is 1.0.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self> {
        let mut c = Self::default();
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                lhs: vec![pred.len()],
                rhs: vec![truth.len()],
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, false) => self.tn += 1,
                (false, true) => self.fn_ += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> MetricSet {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let (tp, fp, tn, fn_) = (self.tp, self.fp, self.tn, self.fn_);
        MetricSet {
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            acc: ratio(tp + tn, tp + fp + tn + fn_),
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
}

impl MetricSet {
    pub const CSV_HEADER: &'static str = "dice,iou,acc,se,sp";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.dice, self.iou, self.acc, self.se, self.sp)
    }
}

pub fn metrics(pred: &[u8], truth: &[u8]) -> Result<MetricSet> {
    Ok(Confusion::from_masks(pred, truth)?.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixtures() {
        let m = [0u8, 1, 1, 0, 1, 0];
        assert_eq!(metrics(&m, &m).unwrap(), MetricSet { dice: 1.0, iou: 1.0, acc: 1.0, se: 1.0, sp: 1.0 });

        let (a, b) = ([1u8, 1, 0, 0], [0u8, 0, 1, 1]);
        let r = metrics(&a, &b).unwrap();
        assert_eq!((r.dice, r.acc, r.se, r.sp), (0.0, 0.0, 0.0, 0.0));

        let r = metrics(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert!((r.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((r.se, r.sp), (1.0, 0.0));

        let r = metrics(&[0; 5], &[0; 5]).unwrap();
        assert_eq!((r.dice, r.iou, r.se, r.sp, r.acc), (1.0, 1.0, 1.0, 1.0, 1.0));

        assert!(metrics(&[0; 3], &[0; 4]).is_err());
    }

    #[test]
    fn pooling_adds_counts() {
        let mut c = Confusion::from_masks(&[1, 0], &[1, 1]).unwrap();
        c.merge(&Confusion::from_masks(&[1, 1], &[0, 0]).unwrap());
        assert_eq!(c, Confusion { tp: 1, fp: 2, tn: 0, fn_: 1 });
    }

    proptest! {
        #[test]
        fn dice_iou_identity(pred in prop::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
            let truth: Vec<u8> = pred.iter().enumerate().map(|(i, &p)| if (seed >> (i % 64)) & 1 == 1 { 1 - p } else { p }).collect();
            let r = metrics(&pred, &truth).unwrap();
            prop_assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            for v in [r.dice, r.iou, r.acc, r.se, r.sp] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
