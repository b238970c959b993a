//! Dice-Sørensen coefficient and the Wilcoxon signed-rank test.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// `2|P∩G| / (|P|+|G|)` for class `cls`; 1 when both sets are empty.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, cls: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dsc pred vs gt", &gt.shape(), &pred.shape()));
    }
    if cls >= gt.n_classes() {
        return Err(Error::invalid("class", format!("{cls} >= {}", gt.n_classes())));
    }
    let c = cls as u8;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (pa, gb) = (a == c, b == c);
        p += pa as usize;
        g += gb as usize;
        both += (pa && gb) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Mean DSC over foreground classes `1..C`.
pub fn foreground_dsc(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let c = gt.n_classes();
    let mut s = 0.0;
    for k in 1..c {
        s += dsc(pred, gt, k)?;
    }
    Ok(s / (c - 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Exact for `n <= 12`, normal approximation above.
    #[default]
    Auto,
    Exact,
    Normal,
}

/// Largest sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test of paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)?.p_value)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples", &[a.len()], &[b.len()]));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n < 5 {
        return Err(Error::TooFew { what: "non-zero paired differences", needed: 5, got: n });
    }
    // midranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let total: f64 = ranks.iter().sum();
    let mean = total / 2.0;

    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        if n > 24 {
            return Err(Error::invalid("wilcoxon", format!("exact enumeration over n = {n} is too large")));
        }
        let observed = (w_plus - mean).abs();
        let mut extreme = 0u64;
        for mask in 0u64..(1u64 << n) {
            let w: f64 = (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            if (w - mean).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / (1u64 << n) as f64
    } else {
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(WilcoxonResult { n, w_plus, p_value: p_value.min(1.0), exact })
}

/// Per-case, per-class DSC table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub case_ids: Vec<String>,
    pub n_classes: usize,
    /// `table[case][class]`.
    pub table: Vec<Vec<f64>>,
}

impl EvalResult {
    pub fn from_predictions(ids: &[String], preds: &[LabelMap], gts: &[LabelMap]) -> Result<Self> {
        if ids.len() != preds.len() || preds.len() != gts.len() {
            return Err(Error::shape("evaluation inputs", &[ids.len()], &[preds.len(), gts.len()]));
        }
        let n_classes = gts.first().map(|g| g.n_classes()).unwrap_or(2);
        let table = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| (0..n_classes).map(|c| dsc(p, g, c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalResult { case_ids: ids.to_vec(), n_classes, table })
    }

    pub fn mean_per_class(&self) -> Vec<f64> {
        let n = self.table.len().max(1) as f64;
        (0..self.n_classes).map(|c| self.table.iter().map(|r| r[c]).sum::<f64>() / n).collect()
    }

    /// Per-case mean over foreground classes.
    pub fn per_case_foreground(&self) -> Vec<f64> {
        self.table.iter().map(|r| r[1..].iter().sum::<f64>() / (self.n_classes - 1) as f64).collect()
    }

    pub fn mean_foreground(&self) -> f64 {
        let v = self.per_case_foreground();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Writes `case_id,class,dsc` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case_id", "class", "dsc"])?;
        for (id, row) in self.case_ids.iter().zip(&self.table) {
            for (c, v) in row.iter().enumerate() {
                w.write_record([id.clone(), c.to_string(), format!("{v:.8}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(v: &[u8]) -> LabelMap {
        LabelMap::new([1, 1, v.len()], v.to_vec(), 2).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = lm(&[1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &lm(&[0, 0, 1, 1]), 1).unwrap(), 0.0);
        // |P| = 2, |G| = 4, overlap 2
        let p = lm(&[1, 1, 0, 0, 0]);
        let g = lm(&[1, 1, 1, 1, 0]);
        assert!((dsc(&p, &g, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = lm(&[0, 0]);
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &lm(&[0, 1]), 1).unwrap(), 0.0);
        assert!(dsc(&empty, &a, 1).is_err());
        assert!(dsc(&a, &a, 2).is_err());
    }

    #[test]
    fn wilcoxon_degenerate_and_symmetric() {
        let a = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert!(wilcoxon_signed_rank(&a, &a).is_err());
        let b = [0.4, 0.65, 0.6, 0.85, 0.7, 0.5];
        assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&b, &a).unwrap());
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Auto).unwrap();
        assert_eq!(r.w_plus, 21.0);
        assert!(r.exact);
        assert_eq!(r.p_value, 0.03125);
    }
}
