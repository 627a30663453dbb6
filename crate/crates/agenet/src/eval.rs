//! Evaluation: task accuracies, average age-bucket absolute difference,
//! confusion matrices, gender probability histograms and attention-map
//! export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_batch, BucketScheme, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{ensemble_predict, MultiTaskModel, Prediction};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

pub const HISTOGRAM_BINS: usize = 20;

/// Serializable evaluation result covering every reported metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_count: usize,
    pub gender_accuracy: f64,
    pub age_bucket_accuracy: f64,
    pub aabd: f64,
    /// Rows are truth, columns are prediction.
    pub confusion_gender: Vec<Vec<u64>>,
    pub confusion_age: Vec<Vec<u64>>,
    /// Row-normalized percentages of the matrices above.
    pub confusion_gender_percent: Vec<Vec<f64>>,
    pub confusion_age_percent: Vec<Vec<f64>>,
    /// Counts of predicted P(female) over uniform bins on [0,1].
    pub gender_prob_histogram: Vec<u64>,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy: empty input".into()));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Mean absolute difference between predicted and true bucket indices.
/// Identical for internal and display indexing: a common offset cancels.
pub fn aabd(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "aabd: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("aabd: empty input".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// K x K counts, rows = truth, columns = prediction.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "confusion_matrix: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::InvalidArgument(format!(
                "confusion_matrix: label ({}, {}) out of range [0,{})",
                t, p, k
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn row_normalize_percent(m: &[Vec<u64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect()
}

/// Uniform-width bins over [0,1]; the final bin includes its right edge.
pub fn probability_histogram(probs: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &p in probs {
        let clamped = p.clamp(0.0, 1.0);
        let bin = ((clamped * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    counts
}

/// Full forward-pass evaluation over `records`. With one model this is a
/// single-model report; with two or more the member probabilities are
/// averaged per image before the argmax (the ensemble rule).
pub fn evaluate<S: Scalar>(
    models: &[&MultiTaskModel<S>],
    records: &[SampleRecord],
    batch_size: usize,
) -> Result<MetricsReport> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("evaluate: no models".into()));
    }
    if records.is_empty() {
        return Err(Error::Data("evaluate: empty partition".into()));
    }
    let buckets = models[0].spec.num_age_buckets;
    let input_size = models[0].spec.input_size;
    for m in models {
        if m.spec.num_age_buckets != buckets || m.spec.input_size != input_size {
            return Err(Error::Config(
                "evaluate: ensemble members disagree on bucket count or input size".into(),
            ));
        }
    }
    let mut predictions: Vec<Prediction> = Vec::new();
    let mut gender_truth = Vec::new();
    let mut bucket_truth = Vec::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = load_batch::<S>(chunk, input_size, false, 0)?;
        let members: Vec<Vec<Prediction>> = models
            .iter()
            .map(|m| m.predict(&batch.images))
            .collect::<Result<_>>()?;
        let merged = if members.len() == 1 {
            members.into_iter().next().unwrap()
        } else {
            ensemble_predict(&members)?
        };
        predictions.extend(merged);
        gender_truth.extend(batch.gender_labels);
        bucket_truth.extend(batch.bucket_labels);
    }
    report_from_predictions(&predictions, &gender_truth, &bucket_truth, buckets)
}

pub fn report_from_predictions(
    predictions: &[Prediction],
    gender_truth: &[usize],
    bucket_truth: &[usize],
    buckets: usize,
) -> Result<MetricsReport> {
    let gender_pred: Vec<usize> = predictions.iter().map(|p| p.gender_class()).collect();
    let age_pred: Vec<usize> = predictions.iter().map(|p| p.age_class()).collect();
    let confusion_gender = confusion_matrix(&gender_pred, gender_truth, 2)?;
    let confusion_age = confusion_matrix(&age_pred, bucket_truth, buckets)?;
    let female_probs: Vec<f64> = predictions.iter().map(|p| p.gender_probs[1]).collect();
    Ok(MetricsReport {
        sample_count: predictions.len(),
        gender_accuracy: accuracy(&gender_pred, gender_truth)?,
        age_bucket_accuracy: accuracy(&age_pred, bucket_truth)?,
        aabd: aabd(&age_pred, bucket_truth)?,
        confusion_gender_percent: row_normalize_percent(&confusion_gender),
        confusion_age_percent: row_normalize_percent(&confusion_age),
        confusion_gender,
        confusion_age,
        gender_prob_histogram: probability_histogram(&female_probs, HISTOGRAM_BINS),
    })
}

/// Flat CSV view of the scalar metrics.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("sample_count,{}\n", report.sample_count));
    out.push_str(&format!("gender_accuracy,{}\n", report.gender_accuracy));
    out.push_str(&format!("age_bucket_accuracy,{}\n", report.age_bucket_accuracy));
    out.push_str(&format!("aabd,{}\n", report.aabd));
    out
}

pub fn confusion_to_csv(m: &[Vec<u64>], scheme: Option<&BucketScheme>) -> String {
    let mut out = String::new();
    let label = |i: usize| match scheme {
        Some(s) => s.display_label(i),
        None => i.to_string(),
    };
    out.push_str("truth\\pred");
    for j in 0..m.len() {
        out.push_str(&format!(",{}", label(j)));
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        out.push_str(&label(i));
        for c in row {
            out.push_str(&format!(",{}", c));
        }
        out.push('\n');
    }
    out
}

/// Linear blue (lowest) to red (highest) colormap.
fn blue_red(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Channel-averaged, min-max-normalized mask of one sample, upscaled to
/// `target_hw`. Returns 8-bit grayscale values; constant masks map to
/// mid-gray.
fn normalized_mask<S: Scalar>(tap: &Tensor<S>, sample: usize, target_hw: usize) -> Result<(Vec<u8>, bool)> {
    let (c, h, w) = (tap.dims()[1], tap.dims()[2], tap.dims()[3]);
    let data = tap.data();
    let plane = h * w;
    let mut mean = vec![0.0f64; plane];
    for ch in 0..c {
        let base = (sample * c + ch) * plane;
        for (i, m) in mean.iter_mut().enumerate() {
            *m += data[base + i].as_f64();
        }
    }
    drop(data);
    mean.iter_mut().for_each(|v| *v /= c as f64);
    let small = Tensor::<f64>::from_vec(&[1, 1, h, w], mean)?;
    let up = ops::upsample_bilinear(&small, target_hw, target_hw)?;
    let vals = up.to_f64_vec();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        return Ok((vec![128u8; vals.len()], true));
    }
    let scale = 255.0 / (hi - lo);
    Ok((vals.iter().map(|&v| ((v - lo) * scale).round() as u8).collect(), false))
}

/// Writes one grayscale PGM and one blue-to-red PPM per (sample, module)
/// pair; filenames are `<sample_id>_attn<module>.{pgm,ppm}`. Returns the
/// PGM paths in module order per sample.
pub fn export_attention_maps<S: Scalar>(
    taps: &[Tensor<S>],
    sample_ids: &[String],
    out_dir: &Path,
    target_hw: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (module_idx, tap) in taps.iter().enumerate() {
        if tap.dims().len() != 4 || tap.dims()[0] != sample_ids.len() {
            return Err(Error::shape(
                "export_attention_maps",
                format!("tap dims {:?} vs {} sample ids", tap.dims(), sample_ids.len()),
            ));
        }
        for (sample, id) in sample_ids.iter().enumerate() {
            let (gray, constant) = normalized_mask(tap, sample, target_hw)?;
            if constant {
                eprintln!(
                    "warning: attention map {} module {} is constant; emitting mid-gray",
                    id, module_idx
                );
            }
            let pgm = out_dir.join(format!("{}_attn{}.pgm", id, module_idx));
            crate::pnm::write_pgm(&pgm, target_hw, target_hw, &gray)?;
            let rgb: Vec<u8> = gray
                .iter()
                .flat_map(|&g| blue_red(g as f64 / 255.0))
                .collect();
            crate::pnm::write_ppm(
                &out_dir.join(format!("{}_attn{}.ppm", id, module_idx)),
                target_hw,
                target_hw,
                &rgb,
            )?;
            written.push(pgm);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_edges() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn aabd_paper_example_and_hand_cases() {
        // age 25 -> bucket display index 3; prediction one bucket above
        assert_eq!(aabd(&[4], &[3]).unwrap(), 1.0);
        assert_eq!(aabd(&[2, 5, 9], &[2, 5, 9]).unwrap(), 0.0);
        let v = aabd(&[0, 5, 10], &[1, 5, 7]).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-12);
        assert!(aabd(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn aabd_offset_invariance() {
        let internal_pred = [0, 3, 7];
        let internal_true = [1, 3, 5];
        let display_pred: Vec<usize> = internal_pred.iter().map(|v| v + 1).collect();
        let display_true: Vec<usize> = internal_true.iter().map(|v| v + 1).collect();
        assert_eq!(
            aabd(&internal_pred, &internal_true).unwrap(),
            aabd(&display_pred, &display_true).unwrap()
        );
    }

    #[test]
    fn confusion_basics() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let m = confusion_matrix(&[0], &[1], 2).unwrap();
        assert_eq!(m[1][0], 1);
        assert!(confusion_matrix(&[5], &[0], 2).is_err());
    }

    #[test]
    fn confusion_trace_equals_accuracy_numerator() {
        let pred = [0, 1, 1, 0, 2, 2, 1];
        let truth = [0, 1, 0, 0, 2, 1, 1];
        let m = confusion_matrix(&pred, &truth, 3).unwrap();
        let trace: u64 = (0..3).map(|i| m[i][i]).sum();
        let total: u64 = m.iter().flatten().sum();
        let acc = accuracy(&pred, &truth).unwrap();
        assert_eq!(trace as f64 / total as f64, acc);
    }

    #[test]
    fn histogram_edges_and_totals() {
        let counts = probability_histogram(&[0.0, 0.0, 0.0], 20);
        assert_eq!(counts[0], 3);
        assert_eq!(counts.iter().sum::<u64>(), 3);
        // 1.0 lands in the last (right-inclusive) bin
        let counts = probability_histogram(&[1.0], 20);
        assert_eq!(counts[19], 1);
        let counts = probability_histogram(&[], 20);
        assert_eq!(counts.iter().sum::<u64>(), 0);
        // uniform grid fills bins near-uniformly
        let grid: Vec<f64> = (0..40).map(|k| 0.025 * k as f64).collect();
        let counts = probability_histogram(&grid, 20);
        assert!(counts.iter().all(|&c| c == 2), "{:?}", counts);
    }

    #[test]
    fn report_on_hand_dataset() {
        let preds = vec![
            Prediction { gender_probs: vec![0.9, 0.1], age_probs: vec![0.1, 0.7, 0.2] },
            Prediction { gender_probs: vec![0.2, 0.8], age_probs: vec![0.5, 0.3, 0.2] },
            Prediction { gender_probs: vec![0.4, 0.6], age_probs: vec![0.1, 0.2, 0.7] },
        ];
        let report = report_from_predictions(&preds, &[0, 1, 0], &[1, 0, 2], 3).unwrap();
        assert_eq!(report.sample_count, 3);
        assert!((report.gender_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.age_bucket_accuracy, 1.0);
        assert_eq!(report.aabd, 0.0);
        assert_eq!(report.confusion_gender[0][0], 1);
        assert_eq!(report.confusion_gender[0][1], 1);
        assert_eq!(report.confusion_gender[1][1], 1);
        assert_eq!(report.gender_prob_histogram.iter().sum::<u64>(), 3);
        // accuracy == trace/total of the matching confusion matrix
        let trace: u64 = (0..3).map(|i| report.confusion_age[i][i]).sum();
        let total: u64 = report.confusion_age.iter().flatten().sum();
        assert_eq!(trace as f64 / total as f64, report.age_bucket_accuracy);
    }

    #[test]
    fn constant_mask_exports_mid_gray() {
        let tap = Tensor::<f64>::full(&[1, 2, 4, 4], 0.5);
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention_maps(&[tap], &["s0".into()], dir.path(), 8).unwrap();
        assert_eq!(files.len(), 1);
        let (w, h, pixels) = crate::pnm::read_pgm(&files[0]).unwrap();
        assert_eq!((w, h), (8, 8));
        assert!(pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn single_max_pixel_maps_to_255() {
        let mut data = vec![0.0f64; 16];
        data[5] = 1.0;
        let tap = Tensor::<f64>::from_vec(&[1, 1, 4, 4], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention_maps(&[tap], &["s0".into()], dir.path(), 4).unwrap();
        let (_, _, pixels) = crate::pnm::read_pgm(&files[0]).unwrap();
        assert_eq!(pixels[5], 255);
        assert_eq!(*pixels.iter().max().unwrap(), 255);
    }
}
