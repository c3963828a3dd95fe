//! Classification metrics and attention reporting.
//!
//! Metrics come from a confusion matrix with the usual conventions spelled
//! out explicitly: precision of a class nobody was assigned to is
//! *undefined* (not zero) and excluded from macro averages, and argmax ties
//! resolve to the lower class index.
//!
//! Attention reports summarize per-pixel channel gates per class. Gates are
//! normalized per pixel by default (`alpha_i / sum_j alpha_j`, so channels
//! of one pixel compare directly); an alternative normalizes by the class
//! mean total instead. Quartiles use linear interpolation between order
//! statistics. Raw gate summaries are kept alongside so the normalization
//! never hides magnitude information.
//!
//! Both CSV artifacts are fixpoints: parsing an exported file and exporting
//! the parse result reproduces the file byte for byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Model;
use crate::train::{argmax_row, predict, LabeledSet, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("evaluation: {0}")]
    Invalid(String),

    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Per-class precision/recall/F1; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

/// Confusion-matrix metrics for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Means over classes where the metric is defined.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self, EvalError> {
        let classes = confusion.len();
        if classes == 0 || confusion.iter().any(|row| row.len() != classes) {
            return Err(EvalError::Invalid(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(EvalError::Invalid("confusion matrix is all zero".into()));
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();

        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let tp = confusion[c][c];
            let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (actual > 0).then(|| tp as f64 / actual as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
                support: actual,
            });
        }
        let macro_of = |extract: fn(&ClassMetrics) -> Option<f64>| {
            let defined: Vec<f64> = per_class.iter().filter_map(extract).collect();
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        };
        Ok(MetricsReport {
            accuracy: correct as f64 / total as f64,
            macro_precision: macro_of(|m| m.precision),
            macro_recall: macro_of(|m| m.recall),
            macro_f1: macro_of(|m| m.f1),
            confusion,
            per_class,
        })
    }

    /// Builds the report from row-major probabilities via argmax.
    pub fn from_predictions(
        labels: &[usize],
        probs: &[f64],
        num_classes: usize,
    ) -> Result<Self, EvalError> {
        if labels.is_empty() || num_classes == 0 || probs.len() != labels.len() * num_classes {
            return Err(EvalError::Invalid(format!(
                "{} labels with {} probabilities do not form rows of {num_classes}",
                labels.len(),
                probs.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(EvalError::Invalid(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            let pred = argmax_row(&probs[i * num_classes..(i + 1) * num_classes]);
            confusion[label][pred] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// Flat rows for the CSV artifact.
    pub fn to_rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow {
            metric: "accuracy".into(),
            class: None,
            value: Some(self.accuracy),
        }];
        for (c, m) in self.per_class.iter().enumerate() {
            for (name, value) in [
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
            ] {
                rows.push(MetricRow {
                    metric: name.into(),
                    class: Some(c),
                    value,
                });
            }
        }
        for (name, value) in [
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ] {
            rows.push(MetricRow {
                metric: name.into(),
                class: None,
                value: Some(value),
            });
        }
        rows
    }
}

/// One line of the metrics CSV; an absent value renders as an empty field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub class: Option<usize>,
    pub value: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,class,value\n");
    for row in rows {
        out.push_str(&row.metric);
        out.push(',');
        if let Some(c) = row.class {
            out.push_str(&c.to_string());
        }
        out.push(',');
        if let Some(v) = row.value {
            out.push_str(&format!("{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "metric,class,value")) => {}
        other => {
            return Err(EvalError::Parse {
                line: 1,
                msg: format!("expected metrics header, found {:?}", other.map(|(_, l)| l)),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(EvalError::Parse {
                line,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let class = if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].parse().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad class {:?}", fields[1]),
            })?)
        };
        let value = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad value {:?}", fields[2]),
            })?)
        };
        rows.push(MetricRow {
            metric: fields[0].to_string(),
            class,
            value,
        });
    }
    Ok(rows)
}

/// How gates are normalized before summarizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaNormalization {
    /// Divide each pixel's gates by that pixel's gate total.
    PerPixel,
    /// Divide each pixel's gates by the mean gate total of its class.
    ClassMeanTotal,
}

/// Quartile value at fraction `q` with linear interpolation between order
/// statistics; `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Summary of one channel's gates within one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelAttentionStats {
    pub channel: usize,
    pub channel_name: String,
    /// Quartiles of the normalized gate.
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Raw (unnormalized) gate summaries.
    pub raw_mean: f64,
    pub raw_min: f64,
    pub raw_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAttention {
    pub class: usize,
    pub pixels: usize,
    pub channels: Vec<ChannelAttentionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub normalization: AlphaNormalization,
    pub per_class: Vec<ClassAttention>,
}

impl AttentionReport {
    /// Summarizes an `n x channels` gate matrix against per-pixel labels.
    pub fn new(
        alphas: &[f64],
        labels: &[usize],
        num_classes: usize,
        channel_names: &[String],
        normalization: AlphaNormalization,
    ) -> Result<Self, EvalError> {
        let channels = channel_names.len();
        if channels == 0 || labels.is_empty() || alphas.len() != labels.len() * channels {
            return Err(EvalError::Invalid(format!(
                "{} gates for {} labels and {channels} channels do not agree",
                alphas.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(EvalError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }

        // per-pixel totals, and per-class mean totals for the alternative
        let totals: Vec<f64> = (0..labels.len())
            .map(|i| alphas[i * channels..(i + 1) * channels].iter().sum())
            .collect();
        let mut class_total = vec![0.0; num_classes];
        let mut class_count = vec![0usize; num_classes];
        for (i, &label) in labels.iter().enumerate() {
            class_total[label] += totals[i];
            class_count[label] += 1;
        }

        let mut per_class = Vec::new();
        for class in 0..num_classes {
            if class_count[class] == 0 {
                continue;
            }
            let mean_total = class_total[class] / class_count[class] as f64;
            let mut channel_stats = Vec::with_capacity(channels);
            for c in 0..channels {
                let mut normalized = Vec::with_capacity(class_count[class]);
                let mut raw = Vec::with_capacity(class_count[class]);
                for (i, &label) in labels.iter().enumerate() {
                    if label != class {
                        continue;
                    }
                    let a = alphas[i * channels + c];
                    raw.push(a);
                    let denom = match normalization {
                        AlphaNormalization::PerPixel => totals[i],
                        AlphaNormalization::ClassMeanTotal => mean_total,
                    };
                    normalized.push(if denom > 0.0 { a / denom } else { 0.0 });
                }
                normalized.sort_by(|a, b| a.partial_cmp(b).expect("finite gates"));
                let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
                let (raw_min, raw_max) = raw
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                channel_stats.push(ChannelAttentionStats {
                    channel: c,
                    channel_name: channel_names[c].clone(),
                    q1: quantile(&normalized, 0.25),
                    median: quantile(&normalized, 0.5),
                    q3: quantile(&normalized, 0.75),
                    raw_mean,
                    raw_min,
                    raw_max,
                });
            }
            per_class.push(ClassAttention {
                class,
                pixels: class_count[class],
                channels: channel_stats,
            });
        }
        Ok(AttentionReport {
            normalization,
            per_class,
        })
    }

    /// The channel with the highest median normalized gate for `class`.
    pub fn top_channel(&self, class: usize) -> Option<usize> {
        let entry = self.per_class.iter().find(|c| c.class == class)?;
        entry
            .channels
            .iter()
            .max_by(|a, b| a.median.partial_cmp(&b.median).expect("finite medians"))
            .map(|c| c.channel)
    }

    pub fn to_rows(&self) -> Vec<AttentionRow> {
        let mut rows = Vec::new();
        for class in &self.per_class {
            for ch in &class.channels {
                rows.push(AttentionRow {
                    class: class.class,
                    channel: ch.channel,
                    channel_name: ch.channel_name.clone(),
                    q1: ch.q1,
                    median: ch.median,
                    q3: ch.q3,
                });
            }
        }
        rows
    }
}

/// One line of the attention CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRow {
    pub class: usize,
    pub channel: usize,
    pub channel_name: String,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("class,channel,channel_name,alpha_q1,alpha_median,alpha_q3\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.class, r.channel, r.channel_name, r.q1, r.median, r.q3
        ));
    }
    out
}

pub fn parse_attention_csv(text: &str) -> Result<Vec<AttentionRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "class,channel,channel_name,alpha_q1,alpha_median,alpha_q3")) => {}
        other => {
            return Err(EvalError::Parse {
                line: 1,
                msg: format!(
                    "expected attention header, found {:?}",
                    other.map(|(_, l)| l)
                ),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 6 {
            return Err(EvalError::Parse {
                line,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        rows.push(AttentionRow {
            class: parse_usize(fields[0], "class")?,
            channel: parse_usize(fields[1], "channel")?,
            channel_name: fields[2].to_string(),
            q1: parse_f64(fields[3], "q1")?,
            median: parse_f64(fields[4], "median")?,
            q3: parse_f64(fields[5], "q3")?,
        });
    }
    Ok(rows)
}

/// Runs the model on a set and reports metrics plus the raw gate matrix
/// (`n x channels`, present when the model has attention).
pub fn evaluate(
    model: &Model,
    set: &LabeledSet,
    batch_size: usize,
) -> Result<(MetricsReport, Option<Vec<f64>>), EvalError> {
    let out = predict(model, set, batch_size)?;
    let metrics =
        MetricsReport::from_predictions(&set.labels, &out.main_probs, model.config().num_classes)?;
    Ok((metrics, out.alphas))
}
