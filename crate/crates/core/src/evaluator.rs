//! Test-set evaluation and leaderboard-style tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapipe::{to_batch, ImageSample};
use crate::error::{domain_err, Result};
use crate::kernels::sigmoid;
use crate::metrics::{aggregate, confusion_counts, metric_set, Mask, MetricSet};
use crate::models::Model;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Anything that maps an `N x C x H x W` batch to `N x 1 x H x W` logits.
pub trait LogitPredictor {
    fn predict(&self, batch: &Tensor) -> Result<Tensor>;
}

impl LogitPredictor for Model {
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.main)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> LogitPredictor for F {
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self(batch)
    }
}

/// Per-image and aggregate scores for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub threshold: f64,
    pub n_images: usize,
    pub per_image: BTreeMap<String, MetricSet>,
    pub aggregate: MetricSet,
}

impl RunReport {
    /// Builds a report whose aggregate is the macro average of `per_image`.
    pub fn from_per_image(run_id: &str, threshold: f64, per_image: BTreeMap<String, MetricSet>) -> Result<Self> {
        let values: Vec<MetricSet> = per_image.values().copied().collect();
        let aggregate = aggregate(&values)?;
        Ok(Self {
            run_id: run_id.to_string(),
            threshold,
            n_images: per_image.len(),
            per_image,
            aggregate,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Thresholds `sigmoid(logits)` for sample `i` of a logit batch.
pub fn threshold_logits(logits: &Tensor, i: usize, threshold: f64) -> Result<Mask> {
    let (_, _, h, w) = logits.dims4()?;
    let plane = &logits.data()[i * h * w..(i + 1) * h * w];
    Mask::new(h, w, plane.iter().map(|&z| (sigmoid(z) > threshold) as u8).collect())
}

/// Scores `model` on `test_set`, one sample at a time.
pub fn evaluate(
    model: &impl LogitPredictor,
    test_set: &[ImageSample],
    threshold: f64,
    run_id: &str,
) -> Result<RunReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return domain_err(format!("threshold must be in (0,1), got {threshold}"));
    }
    if test_set.is_empty() {
        return domain_err("test set is empty");
    }
    let mut per_image = BTreeMap::new();
    for s in test_set {
        let (batch, _) = to_batch(&[s])?;
        let logits = model.predict(&batch)?;
        let pred = threshold_logits(&logits, 0, threshold)?;
        per_image.insert(s.id.clone(), metric_set(&confusion_counts(&pred, &s.mask)?)?);
    }
    RunReport::from_per_image(run_id, threshold, per_image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

pub const TABLE_HEADER: [&str; 7] = ["Run ID", "Jaccard", "DSC", "Recall", "Precision", "Accuracy", "F2"];

/// Rounds to three decimals, half away from zero, on the shortest decimal
/// representation of `v` (so 0.1235 becomes 0.124).
pub fn round3(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let repr = format!("{}", v.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    if repr.contains('e') {
        // Only tiny or huge magnitudes print in exponent form.
        return format!("{:.3}", v);
    }
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..3).map(|i| frac.get(i).copied().unwrap_or(0)));
    if frac.get(3).copied().unwrap_or(0) >= 5 {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 3;
    let int_s: String = digits[..split].iter().map(|d| (d + b'0') as char).collect();
    let frac_s: String = digits[split..].iter().map(|d| (d + b'0') as char).collect();
    let negative = v < 0.0 && digits.iter().any(|&d| d != 0);
    format!("{}{}.{}", if negative { "-" } else { "" }, int_s, frac_s)
}

/// Renders one row per report with the six aggregate metrics.
pub fn format_table(reports: &[RunReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return domain_err("no reports to format");
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            std::iter::once(r.run_id.clone())
                .chain(r.aggregate.to_array().iter().map(|&v| round3(v)))
                .collect()
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_HEADER.join(","));
            out.push('\n');
            for row in rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", TABLE_HEADER.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(TABLE_HEADER.len())));
            for row in rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, values: [f64; 6]) -> RunReport {
        let mut per = BTreeMap::new();
        per.insert("img".to_string(), MetricSet::from_array(values));
        RunReport::from_per_image(id, 0.5, per).unwrap()
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round3(0.12345), "0.123");
        assert_eq!(round3(0.1235), "0.124");
        assert_eq!(round3(1.0), "1.000");
        assert_eq!(round3(0.9995), "1.000");
        assert_eq!(round3(0.0), "0.000");
        assert_eq!(round3(0.766), "0.766");
    }

    #[test]
    fn csv_row_layout() {
        let r = report("Run5", [0.766, 0.841, 0.894, 0.844, 0.946, 0.857]);
        let t = format_table(&[r], TableFormat::Csv).unwrap();
        assert_eq!(
            t,
            "Run ID,Jaccard,DSC,Recall,Precision,Accuracy,F2\nRun5,0.766,0.841,0.894,0.844,0.946,0.857\n"
        );
        let ones = format_table(&[report("x", [1.0; 6])], TableFormat::Csv).unwrap();
        assert!(ones.ends_with("x,1.000,1.000,1.000,1.000,1.000,1.000\n"));
        assert!(format_table(&[], TableFormat::Csv).is_err());
    }

    #[test]
    fn markdown_layout() {
        let t = format_table(&[report("Run1", [0.5; 6])], TableFormat::Markdown).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "| Run ID | Jaccard | DSC | Recall | Precision | Accuracy | F2 |");
        assert_eq!(lines[1], "|---|---|---|---|---|---|---|");
        assert_eq!(lines[2], "| Run1 | 0.500 | 0.500 | 0.500 | 0.500 | 0.500 | 0.500 |");
    }

    #[test]
    fn report_json_keys() {
        let r = report("a", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["aggregate", "n_images", "per_image", "run_id", "threshold"]);
        let mut mk: Vec<&str> = v["aggregate"].as_object().unwrap().keys().map(String::as_str).collect();
        mk.sort();
        assert_eq!(mk, ["accuracy", "dsc", "f2", "jaccard", "precision", "recall"]);
        assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn rejects_bad_threshold_and_empty_set() {
        let f = |b: &Tensor| -> Result<Tensor> { Ok(Tensor::zeros(&[b.shape()[0], 1, b.shape()[2], b.shape()[3]])) };
        let s = crate::datapipe::synthetic_samples(1, 8, 0);
        assert!(evaluate(&f, &s, 1.5, "r").is_err());
        assert!(evaluate(&f, &s, 0.0, "r").is_err());
        assert!(evaluate(&f, &[], 0.5, "r").is_err());
    }
}
