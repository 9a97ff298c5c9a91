//! Confusion counts, F-beta scores, the any-pixel detection rule and report
//! formatting.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    Pixel,
    Sample,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Pixel => "pixel",
            Granularity::Sample => "sample",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub granularity: Granularity,
}

impl ConfusionCounts {
    pub fn new(granularity: Granularity) -> Self {
        ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
            granularity,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies one prediction/ground-truth pair.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        debug_assert_eq!(self.granularity, rhs.granularity);
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.tn += rhs.tn;
        self.fn_ += rhs.fn_;
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub f2: f64,
    /// Metrics whose denominator was zero; they are reported as 0.
    pub undefined: Vec<&'static str>,
}

/// `(1 + β²)·P·S / (β²·P + S)`; 0 when both precision and sensitivity are 0.
pub fn fbeta(precision: f64, sensitivity: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta", format!("{beta} must be ≥ 0")));
    }
    for (name, v) in [("precision", precision), ("sensitivity", sensitivity)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(name, format!("{v} outside [0, 1]")));
        }
    }
    let b2 = beta * beta;
    let den = b2 * precision + sensitivity;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + b2) * precision * sensitivity / den)
}

/// `(1 + β²)·tp / ((1 + β²)·tp + β²·fn + fp)`, the count form of
/// [`fbeta`]. One division of exact integers, so the result is the
/// correctly rounded value of the ratio. 0 when `tp + fn + fp = 0`.
pub fn fbeta_counts(c: &ConfusionCounts, beta: u32) -> f64 {
    let b2 = (beta * beta) as u64;
    let num = (1 + b2) * c.tp;
    let den = num + b2 * c.fn_ + c.fp;
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::invalid("confusion", "all counts are zero"));
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &'static str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let sensitivity = ratio("sensitivity", c.tp, c.tp + c.fn_);
    let specificity = ratio("specificity", c.tn, c.tn + c.fp);
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    Ok(MetricsReport {
        sensitivity,
        specificity,
        precision,
        accuracy,
        f1: fbeta_counts(c, 1),
        f2: fbeta_counts(c, 2),
        undefined,
    })
}

fn check_threshold(threshold: f32) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(
            "threshold",
            format!("{threshold} outside (0, 1)"),
        ));
    }
    Ok(())
}

/// Pixel tallies with `pred ≥ threshold` as positive; `gt` must be binary.
pub fn pixel_confusion(pred: &Tensor, gt: &Tensor, threshold: f32) -> Result<ConfusionCounts> {
    check_threshold(threshold)?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "pixel_confusion",
            format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    let mut c = ConfusionCounts::new(Granularity::Pixel);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g != 0.0 && g != 1.0 {
            return Err(Error::invalid("gt", "ground-truth mask must be binary"));
        }
        c.record(p >= threshold, g == 1.0);
    }
    Ok(c)
}

/// A sample is positive iff any pixel of its mask reaches `threshold`.
pub fn detect_sample(pred: &[f32], threshold: f32) -> bool {
    pred.iter().any(|&p| p >= threshold)
}

/// Sample-level tallies for `N×…` predictions; a ground truth is positive
/// iff its mask has any foreground pixel.
pub fn sample_confusion(pred: &Tensor, gt: &Tensor, threshold: f32) -> Result<ConfusionCounts> {
    check_threshold(threshold)?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "sample_confusion",
            format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    let n = pred.shape()[0];
    let per = pred.len() / n;
    let mut c = ConfusionCounts::new(Granularity::Sample);
    for b in 0..n {
        let p = &pred.data()[b * per..(b + 1) * per];
        let g = &gt.data()[b * per..(b + 1) * per];
        c.record(detect_sample(p, threshold), g.iter().any(|&v| v != 0.0));
    }
    Ok(c)
}

/// Percentage with two decimals, rounding half away from zero.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}", (fraction * 10_000.0).round() / 100.0)
}

pub const CSV_HEADER: &str =
    "granularity,tp,fp,tn,fn,sensitivity,specificity,precision,accuracy,f1,f2";

pub fn csv_row(c: &ConfusionCounts, m: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        c.granularity.as_str(),
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        m.sensitivity,
        m.specificity,
        m.precision,
        m.accuracy,
        m.f1,
        m.f2
    )
}

pub fn metrics_csv(c: &ConfusionCounts, m: &MetricsReport) -> String {
    format!("{CSV_HEADER}\n{}\n", csv_row(c, m))
}

/// Header and row in the column order Sensitivity, Specificity, Precision,
/// F1, F2, Accuracy.
pub fn render_table_row(label: &str, m: &MetricsReport) -> String {
    let cells = [
        m.sensitivity,
        m.specificity,
        m.precision,
        m.f1,
        m.f2,
        m.accuracy,
    ];
    let mut s = format!(
        "{:<12} {:>11} {:>11} {:>9} {:>7} {:>7} {:>8}\n{:<12}",
        "", "Sensitivity", "Specificity", "Precision", "F1", "F2", "Accuracy", label
    );
    let widths = [11, 11, 9, 7, 7, 8];
    for (v, w) in cells.iter().zip(widths) {
        let _ = write!(s, " {:>w$}", percent(*v));
    }
    s
}

/// Two-by-two confusion matrix, ground truth on rows.
pub fn render_confusion_matrix(c: &ConfusionCounts) -> String {
    let (neg, pos) = match c.granularity {
        Granularity::Pixel => ("Background", "Foreground"),
        Granularity::Sample => ("Control", "Positive"),
    };
    let w = [c.tn, c.fp, c.fn_, c.tp]
        .iter()
        .map(|v| v.to_string().len())
        .max()
        .unwrap_or(1)
        .max(pos.len());
    let l = 13 + neg.len().max(pos.len());
    format!(
        "{:l$} Predicted\n{:l$} {:>w$} {:>w$}\n{:<l$} {:>w$} {:>w$}\n{:>l$} {:>w$} {:>w$}\n",
        "",
        "",
        neg,
        pos,
        format!("Ground truth {neg}"),
        c.tn,
        c.fp,
        pos,
        c.fn_,
        c.tp
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts {
            tp,
            fp,
            tn,
            fn_,
            granularity: Granularity::Sample,
        }
    }

    #[test]
    fn fbeta_cases() {
        for beta in [0.5, 1.0, 2.0, 3.0] {
            assert!((fbeta(0.7, 0.7, beta).unwrap() - 0.7).abs() < 1e-12);
        }
        assert_eq!(percent(fbeta(0.9809, 0.9735, 1.0).unwrap()), "97.72");
        assert_eq!(percent(fbeta(0.9809, 0.9735, 2.0).unwrap()), "97.50");
        assert_eq!(fbeta(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(fbeta(0.5, 0.5, -1.0).is_err());
    }

    #[test]
    fn published_confusion_rows() {
        let m = metrics_from_confusion(&counts(2057, 40, 25556, 56)).unwrap();
        let got: Vec<String> = [
            m.sensitivity,
            m.specificity,
            m.precision,
            m.f1,
            m.f2,
            m.accuracy,
        ]
        .iter()
        .map(|&v| percent(v))
        .collect();
        assert_eq!(got, ["97.35", "99.84", "98.09", "97.72", "97.50", "99.65"]);

        let m = metrics_from_confusion(&counts(2082, 113, 25483, 31)).unwrap();
        let got: Vec<String> = [
            m.sensitivity,
            m.specificity,
            m.precision,
            m.f1,
            m.f2,
            m.accuracy,
        ]
        .iter()
        .map(|&v| percent(v))
        .collect();
        assert_eq!(got, ["98.53", "99.56", "94.85", "96.66", "97.77", "99.48"]);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = metrics_from_confusion(&counts(5, 0, 7, 0)).unwrap();
        for v in [
            m.sensitivity,
            m.specificity,
            m.precision,
            m.accuracy,
            m.f1,
            m.f2,
        ] {
            assert_eq!(v, 1.0);
        }
        assert!(metrics_from_confusion(&counts(0, 0, 0, 0)).is_err());
        let m = metrics_from_confusion(&counts(0, 0, 9, 0)).unwrap();
        assert_eq!(m.undefined, ["sensitivity", "precision"]);
        assert_eq!(m.sensitivity, 0.0);
        assert_eq!(m.specificity, 1.0);
    }

    #[test]
    fn pixel_rules() {
        let gt = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = pixel_confusion(&gt, &gt, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp, c.tn), (0, 0, 2, 2));
        let inv = gt.map(|v| 1.0 - v);
        let c = pixel_confusion(&inv, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        let c = pixel_confusion(&half, &gt, 0.5).unwrap();
        assert_eq!(c.tp + c.fp, 4);
        assert!(pixel_confusion(&half, &gt, 1.0).is_err());
        assert!(pixel_confusion(&half, &gt, 0.0).is_err());
    }

    #[test]
    fn detection_rule() {
        assert!(!detect_sample(&[0.0; 16], 0.5));
        let mut m = [0.0; 16];
        m[7] = 0.51;
        assert!(detect_sample(&m, 0.5));
        m[7] = 0.49;
        assert!(!detect_sample(&m, 0.5));
    }

    #[test]
    fn percent_rounds_half_away_from_zero() {
        assert_eq!(percent(0.123_46), "12.35");
        assert_eq!(percent(-0.000_05), "-0.01");
        assert_eq!(percent(0.999_95), "100.00");
        assert_eq!(percent(0.0), "0.00");
    }

    #[test]
    fn csv_layout() {
        let c = counts(1, 2, 3, 4);
        let m = metrics_from_confusion(&c).unwrap();
        let csv = metrics_csv(&c, &m);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row = lines.next().unwrap();
        assert!(row.starts_with("sample,1,2,3,4,0.200000,0.600000,0.333333,0.400000,"));
    }

    #[test]
    fn table_row_rendering() {
        let m = metrics_from_confusion(&counts(2057, 40, 25556, 56)).unwrap();
        let s = render_table_row("OSegNet", &m);
        let last = s.lines().last().unwrap();
        let cells: Vec<&str> = last.split_whitespace().skip(1).collect();
        assert_eq!(
            cells,
            ["97.35", "99.84", "98.09", "97.72", "97.50", "99.65"]
        );
        let cm = render_confusion_matrix(&counts(2057, 40, 25556, 56));
        assert!(cm.contains("25556") && cm.contains("2057"));
    }
}
