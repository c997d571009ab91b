//! Region similarity (IoU) and F-measure over binary masks, with per-class
//! aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

/// Weighted harmonic mean of precision and recall. Both empty gives 1,
/// exactly one empty gives 0.
pub fn f_measure(pred: &BinaryMask, gt: &BinaryMask, beta2: f64) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let pred_n = c.tp + c.fp;
    let gt_n = c.tp + c.fn_;
    match (pred_n == 0, gt_n == 0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    if c.tp == 0 {
        return Ok(0.0);
    }
    let p = c.tp as f64 / pred_n as f64;
    let r = c.tp as f64 / gt_n as f64;
    Ok((1.0 + beta2) * p * r / (beta2 * p + r))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalAccumulator {
    pub per_sample_iou: Vec<f64>,
    pub per_sample_f: Vec<f64>,
    pub per_class: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, class: &str, iou: f64, f: f64) {
        self.per_sample_iou.push(iou);
        self.per_sample_f.push(f);
        let bucket = self.per_class.entry(class.to_string()).or_default();
        bucket.0.push(iou);
        bucket.1.push(f);
    }

    /// Score a clip (frames averaged) and record it under `class`.
    pub fn add_clip(&mut self, class: &str, pred: &[BinaryMask], gt: &[BinaryMask], beta2: f64) -> Result<()> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::shape(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
        }
        let mut j = 0.0;
        let mut f = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            j += iou(p, g)?;
            f += f_measure(p, g, beta2)?;
        }
        let n = pred.len() as f64;
        self.push(class, j / n, f / n);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.per_sample_iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample_iou.is_empty()
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.per_sample_iou.extend(other.per_sample_iou);
        self.per_sample_f.extend(other.per_sample_f);
        for (k, (j, f)) in other.per_class {
            let b = self.per_class.entry(k).or_default();
            b.0.extend(j);
            b.1.extend(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub samples: usize,
    pub m_j: f64,
    pub m_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub m_j: f64,
    pub m_f: f64,
    pub per_class: Vec<ClassScore>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Means over samples, overall and per class.
pub fn aggregate(acc: &EvalAccumulator) -> Result<MetricsReport> {
    if acc.is_empty() {
        return Err(Error::EmptyAccumulator);
    }
    Ok(MetricsReport {
        samples: acc.len(),
        m_j: mean(&acc.per_sample_iou),
        m_f: mean(&acc.per_sample_f),
        per_class: acc
            .per_class
            .iter()
            .map(|(k, (j, f))| ClassScore {
                class: k.clone(),
                samples: j.len(),
                m_j: mean(j),
                m_f: mean(f),
            })
            .collect(),
    })
}

impl MetricsReport {
    /// One row per metric: a column per class, then the overall mean.
    pub fn to_table(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.per_class.iter().map(|c| c.class.clone()));
        header.push("mean".into());
        let mut rows = vec![header];
        for (name, pick, overall) in [
            ("M_J", (|c: &ClassScore| c.m_j) as fn(&ClassScore) -> f64, self.m_j),
            ("M_F", |c: &ClassScore| c.m_f, self.m_f),
        ] {
            let mut row = vec![name.to_string()];
            row.extend(self.per_class.iter().map(|c| format!("{:.4}", pick(c))));
            row.push(format!("{overall:.4}"));
            rows.push(row);
        }
        let mut row = vec!["n".to_string()];
        row.extend(self.per_class.iter().map(|c| c.samples.to_string()));
        row.push(self.samples.to_string());
        rows.push(row);
        render_table(&rows)
    }
}

/// Left-aligned first column, right-aligned others, two-space gutters.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(2, 2, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[1, 0, 1, 0])).unwrap(), 1.0 / 3.0);
        assert_eq!(f_measure(&m(&[1, 1, 0, 0]), &m(&[1, 0, 0, 0]), 1.0).unwrap(), 2.0 / 3.0);
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(iou(&m(&[0; 4]), &m(&[0; 4])).unwrap(), 1.0);
        assert_eq!(f_measure(&m(&[0; 4]), &m(&[0; 4]), 1.0).unwrap(), 1.0);
        assert_eq!(f_measure(&m(&[0; 4]), &m(&[1, 0, 0, 0]), 1.0).unwrap(), 0.0);
        assert_eq!(f_measure(&m(&[1, 0, 0, 0]), &m(&[0; 4]), 0.3).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(iou(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 3)).is_err());
    }

    #[test]
    fn aggregation() {
        assert!(matches!(aggregate(&EvalAccumulator::new()), Err(Error::EmptyAccumulator)));
        let mut acc = EvalAccumulator::new();
        acc.push("a", 1.0, 1.0);
        acc.push("b", 0.0, 0.0);
        let r = aggregate(&acc).unwrap();
        assert_eq!(r.m_j, 0.5);
        assert_eq!(r.per_class[0].m_j, 1.0);
        assert_eq!(r.per_class[1].m_j, 0.0);
        let table = r.to_table();
        let header = table.lines().next().unwrap();
        assert!(header.starts_with("metric"));
        assert!(header.ends_with("mean"));
    }

    fn mask_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (proptest::collection::vec(any::<bool>(), 36), proptest::collection::vec(any::<bool>(), 36)).prop_map(
            |(a, b)| (BinaryMask::from_bits(6, 6, a).unwrap(), BinaryMask::from_bits(6, 6, b).unwrap()),
        )
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded((a, b) in mask_strategy()) {
            let j = iou(&a, &b).unwrap();
            prop_assert_eq!(j, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            let f = f_measure(&a, &b, 0.3).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn true_positive_never_hurts((a, b) in mask_strategy(), idx in 0usize..36) {
            let (y, x) = (idx / 6, idx % 6);
            if b.get(y, x) {
                let mut a2 = a.clone();
                a2.set(y, x, true);
                prop_assert!(iou(&a2, &b).unwrap() >= iou(&a, &b).unwrap());
            }
        }
    }
}
