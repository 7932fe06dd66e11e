//! Classification metrics, teacher–student logit divergence and report
//! output.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::nn::EncoderModel;
use crate::numerics::Tensor;

/// Rows per evaluation batch. Fixed so that results do not depend on the
/// thread count.
pub const EVAL_CHUNK: usize = 64;

pub const THREADS_ENV: &str = "CILDA_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    pub count: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::shape("metrics", format!("{} predictions, {} labels", predicted.len(), labels.len())));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            for c in [p, y] {
                if c >= num_classes {
                    return Err(Error::LabelOutOfRange { label: c, num_classes });
                }
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let support: Vec<f64> = confusion.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
        let predicted: Vec<f64> =
            (0..k).map(|j| confusion.iter().map(|r| r[j]).sum::<usize>() as f64).collect();

        let f1s: Vec<f64> = (0..k)
            .map(|i| {
                let tp = confusion[i][i] as f64;
                let denom = support[i] + predicted[i];
                if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }
            })
            .collect();
        let macro_f1 = if k == 0 { 0.0 } else { f1s.iter().sum::<f64>() / k as f64 };

        // Multi-class Matthews correlation (Gorodkin's R_K).
        let (s, c) = (total as f64, correct as f64);
        let pt: f64 = (0..k).map(|i| predicted[i] * support[i]).sum();
        let pp: f64 = predicted.iter().map(|p| p * p).sum();
        let tt: f64 = support.iter().map(|t| t * t).sum();
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        let mcc = if denom == 0.0 { 0.0 } else { (c * s - pt) / denom };

        Self {
            accuracy: if total == 0 { 0.0 } else { c / s },
            macro_f1,
            mcc,
            count: total,
            confusion,
        }
    }
}

/// Worker pool honouring `CILDA_THREADS` (unset or invalid means rayon's
/// default), built on first use.
fn pool() -> Result<&'static rayon::ThreadPool> {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    if let Some(p) = POOL.get() {
        return Ok(p);
    }
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    let built = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))?;
    Ok(POOL.get_or_init(|| built))
}

/// Eval-mode logits for every example, `[len, num_classes]`, in dataset
/// order.
pub fn predict_logits(model: &EncoderModel, data: &EncodedDataset) -> Result<Tensor> {
    let classes = model
        .config
        .num_classes()
        .ok_or(Error::HeadMismatch("evaluation needs a classifier head"))?;
    let batches = data.sequential_batches(EVAL_CHUNK);
    let parts: Vec<Result<Tensor>> =
        pool()?.install(|| batches.par_iter().map(|b| model.predict_logits(b)).collect());
    let mut out = Vec::with_capacity(data.len() * classes);
    for part in parts {
        out.extend_from_slice(part?.data());
    }
    Tensor::new(vec![data.len(), classes], out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

fn check_label_space(model: &EncoderModel, data: &EncodedDataset) -> Result<Vec<usize>> {
    let classes = model.config.num_classes().unwrap_or(0);
    if classes != data.num_classes {
        return Err(Error::Data(format!(
            "label space mismatch: model has {classes} classes, dataset has {}",
            data.num_classes
        )));
    }
    data.labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::Data("evaluation needs labelled examples".into())))
        .collect()
}

/// Accuracy, macro F1 and MCC of the model's argmax predictions, with
/// dropout disabled.
pub fn evaluate(model: &EncoderModel, data: &EncodedDataset) -> Result<MetricReport> {
    let labels = check_label_space(model, data)?;
    let logits = predict_logits(model, data)?;
    let predicted: Vec<usize> = (0..data.len()).map(|i| argmax(logits.row(i))).collect();
    MetricReport::from_predictions(&predicted, &labels, data.num_classes)
}

/// [`evaluate`] on a shifted split; kept separate so reports can label it.
pub fn evaluate_ood(model: &EncoderModel, ood: &EncodedDataset) -> Result<MetricReport> {
    evaluate(model, ood)
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|x| x / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

/// `KL(softmax(t / tau) || softmax(s / tau))` for one pair of logit rows.
pub fn kl_row(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let lp = log_softmax(teacher, tau);
    let lq = log_softmax(student, tau);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

pub fn divergence_from_logits(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<Divergence> {
    if teacher.shape() != student.shape() || teacher.ndim() != 2 {
        return Err(Error::shape("logit_divergence", format!("{:?} vs {:?}", teacher.shape(), student.shape())));
    }
    let per_example: Vec<f64> =
        (0..teacher.rows()).map(|i| kl_row(teacher.row(i), student.row(i), tau)).collect();
    let mean = if per_example.is_empty() {
        0.0
    } else {
        per_example.iter().sum::<f64>() / per_example.len() as f64
    };
    Ok(Divergence { mean, per_example })
}

/// Mean per-example `KL(teacher || student)` at temperature `tau`.
pub fn logit_divergence(
    teacher: &EncoderModel,
    student: &EncoderModel,
    data: &EncodedDataset,
    tau: f64,
) -> Result<Divergence> {
    if teacher.config.num_classes() != student.config.num_classes() {
        return Err(Error::Data("teacher and student label spaces differ".into()));
    }
    divergence_from_logits(&predict_logits(teacher, data)?, &predict_logits(student, data)?, tau)
}

/// One line of a `method,task,metric,value,seed` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl ReportRow {
    /// Accuracy, F1 and MCC rows for one report.
    pub fn from_report(method: &str, task: &str, seed: u64, report: &MetricReport) -> Vec<Self> {
        [("accuracy", report.accuracy), ("macro_f1", report.macro_f1), ("mcc", report.mcc)]
            .into_iter()
            .map(|(metric, value)| Self {
                method: method.into(),
                task: task.into(),
                metric: metric.into(),
                value,
                seed,
            })
            .collect()
    }
}

pub fn write_report_csv<W: Write>(mut out: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(out, "method,task,metric,value,seed")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.method, r.task, r.metric, r.value, r.seed)?;
    }
    Ok(())
}

pub fn write_divergence_csv(path: &Path, div: &Divergence) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "example_id,kl")?;
    for (i, kl) in div.per_example.iter().enumerate() {
        writeln!(out, "{i},{kl}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = MetricReport::from_predictions(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((r.accuracy, r.mcc, r.macro_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictions_have_zero_mcc() {
        let r = MetricReport::from_predictions(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.mcc, 0.0);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn symmetric_confusion_hand_value() {
        let r = MetricReport::from_confusion(vec![vec![2, 1], vec![1, 2]]);
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        // Binary MCC: (tp*tn - fp*fn) / sqrt(3*3*3*3) = (4 - 1) / 9.
        assert!((r.mcc - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows_are_support() {
        let r = MetricReport::from_predictions(&[0, 2, 1, 1, 2], &[0, 1, 1, 2, 2], 3).unwrap();
        let support: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(support, vec![1, 2, 2]);
        assert!((r.accuracy - 3.0 / 5.0).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&r.mcc));
    }

    #[test]
    fn kl_row_of_equal_rows_is_zero() {
        assert_eq!(kl_row(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0], 1.0), 0.0);
        let e = std::f64::consts::E;
        assert!((kl_row(&[1.0, 0.0], &[0.0, 1.0], 1.0) - (e - 1.0) / (e + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let rows = ReportRow::from_report("cilda", "count", 3, &MetricReport::from_confusion(vec![vec![1, 0], vec![0, 1]]));
        write_report_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,task,metric,value,seed\ncilda,count,accuracy,1,3\n"));
    }
}
