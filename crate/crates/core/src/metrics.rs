//! Binary segmentation metrics: pixel confusion counts and the six
//! leaderboard scores (Jaccard, DSC, recall, precision, accuracy, F2).

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};

/// Binary `H x W` mask stored row-major with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    /// Validates dimensions and that every entry is 0 or 1.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            ));
        }
        let mask = Self { height, width, data };
        mask.check_binary()?;
        Ok(mask)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(i) => domain_err(format!(
                "mask entry at ({}, {}) is {}, expected 0 or 1",
                i / self.width.max(1),
                i % self.width.max(1),
                self.data[i]
            )),
            None => Ok(()),
        }
    }

    /// Pixel-wise complement.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v.min(1)).collect(),
        }
    }
}

/// Exact pixel tallies for one prediction/truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// The six per-image (or per-run) scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub jaccard: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

impl MetricSet {
    /// Column order used by reports.
    pub const NAMES: [&'static str; 6] = ["jaccard", "dsc", "recall", "precision", "accuracy", "f2"];

    pub fn splat(v: f64) -> Self {
        Self::from_array([v; 6])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.jaccard, self.dsc, self.recall, self.precision, self.accuracy, self.f2]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            jaccard: a[0],
            dsc: a[1],
            recall: a[2],
            precision: a[3],
            accuracy: a[4],
            f2: a[5],
        }
    }
}

pub fn confusion_counts(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return shape_err(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        ));
    }
    if pred.data.len() != truth.data.len() || pred.data.len() != pred.height * pred.width {
        return shape_err("mask buffer length does not match its dimensions");
    }
    pred.check_binary()?;
    truth.check_binary()?;
    // Index by 2*pred + truth: [tn, fn, fp, tp].
    let mut tally = [0u64; 4];
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        tally[(2 * p + t) as usize] += 1;
    }
    Ok(ConfusionCounts {
        tp: tally[3],
        fp: tally[2],
        fn_: tally[1],
        tn: tally[0],
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores for one counts record.
///
/// When both masks are empty (`tp + fp + fn == 0`) the overlap scores are
/// all 1.0. Otherwise any single score whose denominator is zero is 0.0.
pub fn metric_set(c: &ConfusionCounts) -> Result<MetricSet> {
    let total = c.total();
    if total == 0 {
        return domain_err("confusion counts are all zero");
    }
    let accuracy = ratio(c.tp + c.tn, total);
    if c.tp + c.fp + c.fn_ == 0 {
        let mut m = MetricSet::splat(1.0);
        m.accuracy = accuracy;
        return Ok(m);
    }
    Ok(MetricSet {
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        recall: ratio(c.tp, c.tp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        accuracy,
        f2: ratio(5 * c.tp, 5 * c.tp + 4 * c.fn_ + c.fp),
    })
}

/// Macro average: unweighted mean of each field across images.
pub fn aggregate(per_image: &[MetricSet]) -> Result<MetricSet> {
    if per_image.is_empty() {
        return domain_err("cannot aggregate an empty list of metric sets");
    }
    let mut sums = [0.0; 6];
    for m in per_image {
        for (s, v) in sums.iter_mut().zip(m.to_array()) {
            *s += v;
        }
    }
    let n = per_image.len() as f64;
    Ok(MetricSet::from_array(sums.map(|s| s / n)))
}
