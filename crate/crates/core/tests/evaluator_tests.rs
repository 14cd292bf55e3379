use polyseg::datapipe::{synthetic_samples, ImageSample};
use polyseg::evaluator::{evaluate, format_table, RunReport, TableFormat};
use polyseg::metrics::MetricSet;
use polyseg::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits_for<'a>(
    samples: &'a [ImageSample],
    f: impl Fn(&ImageSample, usize) -> f64 + 'a,
) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
    // The evaluator feeds one image at a time; identify it by its pixels.
    move |batch: &Tensor| {
        let s = samples.iter().find(|s| s.image.data() == batch.data()).expect("known image");
        let (h, w) = (s.height(), s.width());
        Ok(Tensor::from_fn(&[1, 1, h, w], |i| f(s, i)))
    }
}

#[test]
fn perfect_predictions_score_one() {
    let samples = synthetic_samples(5, 16, 1);
    let model = logits_for(&samples, |s, i| if s.mask.data[i] == 1 { 50.0 } else { -50.0 });
    let r = evaluate(&model, &samples, 0.5, "oracle").unwrap();
    assert_eq!(r.n_images, 5);
    assert_eq!(r.aggregate.to_array(), [1.0; 6]);
}

#[test]
fn all_background_predictions() {
    let samples = synthetic_samples(3, 16, 2);
    let model = |b: &Tensor| -> Result<Tensor> {
        let s = b.shape();
        Ok(Tensor::full(&[s[0], 1, s[2], s[3]], -100.0))
    };
    let r = evaluate(&model, &samples, 0.5, "blank").unwrap();
    let a = r.aggregate;
    assert_eq!((a.jaccard, a.dsc, a.recall, a.precision, a.f2), (0.0, 0.0, 0.0, 0.0, 0.0));
    let expected_acc = samples
        .iter()
        .map(|s| 1.0 - s.mask.foreground() as f64 / s.mask.data.len() as f64)
        .sum::<f64>()
        / 3.0;
    assert!((a.accuracy - expected_acc).abs() < 1e-12);
}

/// Pixel-loop pipeline: sigmoid, threshold, tally, ratios, mean.
fn brute_force(samples: &[ImageSample], logits: &[Vec<f64>], threshold: f64) -> [f64; 6] {
    let mut sums = [0.0; 6];
    for (s, z) in samples.iter().zip(logits) {
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (i, &t) in s.mask.data.iter().enumerate() {
            let p = 1.0 / (1.0 + (-z[i]).exp()) > threshold;
            match (p, t == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let d = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
        let row = if tp + fp + fn_ == 0.0 {
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        } else {
            [
                d(tp, tp + fp + fn_),
                d(2.0 * tp, 2.0 * tp + fp + fn_),
                d(tp, tp + fn_),
                d(tp, tp + fp),
                (tp + tn) / (tp + fp + fn_ + tn),
                d(5.0 * tp, 5.0 * tp + 4.0 * fn_ + fp),
            ]
        };
        for (acc, v) in sums.iter_mut().zip(row) {
            *acc += v;
        }
    }
    sums.map(|v| v / samples.len() as f64)
}

#[test]
fn random_logits_match_brute_force() {
    let samples = synthetic_samples(8, 24, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<Vec<f64>> = samples.iter().map(|_| (0..24 * 24).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let model = logits_for(&samples, |s, i| {
        let k = samples.iter().position(|o| o.id == s.id).unwrap();
        logits[k][i]
    });
    for threshold in [0.3, 0.5, 0.7] {
        let r = evaluate(&model, &samples, threshold, "rand").unwrap();
        let expected = brute_force(&samples, &logits, threshold);
        for (a, b) in r.aggregate.to_array().iter().zip(expected) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn raising_threshold_never_raises_recall() {
    let samples = synthetic_samples(6, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let model = logits_for(&samples, |s, i| noise[i] + if s.mask.data[i] == 1 { 1.0 } else { -1.0 });
    let mut prev = f64::INFINITY;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let r = evaluate(&model, &samples, t, "m").unwrap();
        assert!(r.aggregate.recall <= prev);
        prev = r.aggregate.recall;
    }
}

#[test]
fn csv_rows_parse_back() {
    let reports: Vec<RunReport> = (0..3)
        .map(|k| {
            let per = (0..4)
                .map(|i| (format!("img{i}"), MetricSet::splat(0.1 * (k + i) as f64 + 0.0004)))
                .collect();
            RunReport::from_per_image(&format!("Run {k}"), 0.5, per).unwrap()
        })
        .collect();
    let csv = format_table(&reports, TableFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "Run ID,Jaccard,DSC,Recall,Precision,Accuracy,F2");
    for (line, r) in lines.zip(&reports) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], r.run_id);
        for (cell, v) in cells[1..].iter().zip(r.aggregate.to_array()) {
            assert_eq!(cell.split('.').nth(1).unwrap().len(), 3);
            assert!((cell.parse::<f64>().unwrap() - v).abs() <= 0.0005 + 1e-12);
        }
    }
}

#[test]
fn report_json_round_trip() {
    let samples = synthetic_samples(2, 16, 0);
    let model = logits_for(&samples, |_, i| (i % 3) as f64 - 1.0);
    let r = evaluate(&model, &samples, 0.5, "rt").unwrap();
    assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    assert_eq!(r.per_image.keys().cloned().collect::<Vec<_>>(), ["synth000", "synth001"]);
}
