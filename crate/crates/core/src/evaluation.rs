//! Rotation-aggregated inference and the protocol metrics.
//!
//! A test image is scored against class `i` by averaging, over the `M`
//! rotations, the scaled cosine between the rotated image's feature and the
//! class's mean for that rotation. No noise is drawn at test time.

use std::fmt::Write as _;

use crate::backbone::FeatureExtractor;
use crate::data::{ImageGrid, LabeledSample};
use crate::error::{Error, Result};
use crate::head::{self, StochasticHead};
use crate::numerics;

/// Aggregated score of every class slot from per-rotation features.
pub fn aggregate_scores_from_features(
    head: &StochasticHead,
    features: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let m = head.rotations();
    if features.len() != m {
        return Err(Error::ShapeMismatch {
            expected: format!("{m} rotated features"),
            found: format!("{}", features.len()),
        });
    }
    let mut z = vec![0.0; head.class_count()];
    for (r, f) in features.iter().enumerate() {
        let logits = head::logits(head.eta(), head.dim(), head.means(), f)?;
        for (slot, zi) in z.iter_mut().enumerate() {
            *zi += logits[head.head_index(slot, r)];
        }
    }
    z.iter_mut().for_each(|zi| *zi /= m as f64);
    Ok(z)
}

fn rotated_features(
    head: &StochasticHead,
    extractor: &FeatureExtractor,
    image: &ImageGrid,
) -> Result<Vec<Vec<f64>>> {
    (0..head.rotations())
        .map(|r| extractor.features(&image.rotate(r)?))
        .collect()
}

/// Aggregated score `z` of every class slot for `image`.
pub fn aggregate_scores(
    head: &StochasticHead,
    extractor: &FeatureExtractor,
    image: &ImageGrid,
) -> Result<Vec<f64>> {
    aggregate_scores_from_features(head, &rotated_features(head, extractor, image)?)
}

/// Softmax of the aggregated scores over every class seen so far.
pub fn aggregated_probabilities(scores: &[f64]) -> Vec<f64> {
    numerics::softmax(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub class_id: u32,
    pub task_id: usize,
}

/// Argmax of the aggregated scores. The softmax is monotone, so this is also
/// the argmax of the aggregated probabilities; ties go to the lowest
/// `(task, class)` position in the bank.
pub fn predict_from_scores(head: &StochasticHead, scores: &[f64]) -> Result<Prediction> {
    let best = numerics::argmax(scores)
        .ok_or_else(|| Error::Config("classifier has no classes".into()))?;
    debug_assert_eq!(
        numerics::argmax(&aggregated_probabilities(scores)).map(|i| scores[i]),
        Some(scores[best])
    );
    let slot = head.slots()[best];
    Ok(Prediction {
        class_id: slot.class_id,
        task_id: slot.task_id,
    })
}

pub fn predict(
    head: &StochasticHead,
    extractor: &FeatureExtractor,
    image: &ImageGrid,
) -> Result<Prediction> {
    predict_from_scores(head, &aggregate_scores(head, extractor, image)?)
}

/// `2ab / (a + b)`, and 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Base-session accuracy minus final accuracy. Both arguments must use the
/// same unit; a value above 1.5 is taken to be a percentage.
///
/// The difference is snapped to nine decimals so that decimal inputs give
/// the decimal answer (`75.85 - 52.28` is `23.57`, not `23.569999999999993`).
pub fn performance_drop(acc_first: f64, acc_last: f64) -> Result<f64> {
    if (acc_first > 1.5) != (acc_last > 1.5) {
        return Err(Error::UnitMismatch(acc_first, acc_last));
    }
    Ok(((acc_first - acc_last) * 1e9).round() / 1e9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskAccuracy {
    pub task: usize,
    pub correct: usize,
    pub total: usize,
}

impl TaskAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Metrics after one session, all as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub session: usize,
    pub per_task: Vec<TaskAccuracy>,
    /// Top-1 over every test sample of tasks `0..=session`.
    pub top1: f64,
    /// Accuracy on task 0.
    pub base: f64,
    /// Pooled accuracy over tasks `1..=session`; absent after session 0.
    pub new: Option<f64>,
    /// Harmonic mean of `base` and `new`; absent after session 0.
    pub hm: Option<f64>,
}

impl SessionMetrics {
    /// Builds the row from per-task counts.
    pub fn from_counts(session: usize, per_task: Vec<TaskAccuracy>) -> Result<Self> {
        let sum = |it: &mut dyn Iterator<Item = &TaskAccuracy>| {
            it.fold((0, 0), |(c, t), a| (c + a.correct, t + a.total))
        };
        let (correct, total) = sum(&mut per_task.iter());
        if total == 0 {
            return Err(Error::Config(format!(
                "session {session} has no test samples"
            )));
        }
        let base = per_task
            .iter()
            .find(|a| a.task == 0)
            .map_or(0.0, TaskAccuracy::accuracy);
        let (new, hm) = if session == 0 {
            (None, None)
        } else {
            let (nc, nt) = sum(&mut per_task.iter().filter(|a| a.task > 0));
            let new = if nt == 0 { 0.0 } else { nc as f64 / nt as f64 };
            (Some(new), Some(harmonic_mean(base, new)))
        };
        Ok(Self {
            session,
            per_task,
            top1: correct as f64 / total as f64,
            base,
            new,
            hm,
        })
    }

    pub fn samples(&self) -> usize {
        self.per_task.iter().map(|a| a.total).sum()
    }
}

/// Counts correct predictions per task; `outcomes` holds
/// `(true task, true class, predicted class)`.
pub fn metrics_from_outcomes(
    session: usize,
    outcomes: &[(usize, u32, u32)],
) -> Result<SessionMetrics> {
    let mut per_task: Vec<TaskAccuracy> = (0..=session)
        .map(|task| TaskAccuracy {
            task,
            correct: 0,
            total: 0,
        })
        .collect();
    for &(task, truth, predicted) in outcomes {
        let slot = per_task
            .get_mut(task)
            .ok_or_else(|| Error::Config(format!("task {task} is beyond session {session}")))?;
        slot.total += 1;
        if truth == predicted {
            slot.correct += 1;
        }
    }
    SessionMetrics::from_counts(session, per_task)
}

/// Evaluates the model after `session` on the test split of every task so
/// far; `test_sets[n]` is the test data of task `n`.
pub fn evaluate_session(
    head: &StochasticHead,
    extractor: &FeatureExtractor,
    session: usize,
    test_sets: &[Vec<LabeledSample>],
) -> Result<SessionMetrics> {
    let mut outcomes = Vec::new();
    for (task, samples) in test_sets.iter().enumerate().take(session + 1) {
        for s in samples {
            if head.slot_of(s.class_id).is_none() {
                return Err(Error::UnknownTestClass(s.class_id));
            }
            let p = predict(head, extractor, &s.image)?;
            outcomes.push((task, s.class_id, p.class_id));
        }
    }
    metrics_from_outcomes(session, &outcomes)
}

/// Metrics of every session of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub sessions: Vec<SessionMetrics>,
}

pub const CSV_HEADER: &str = "session,task,metric,value";

impl MetricsReport {
    pub fn push(&mut self, row: SessionMetrics) {
        self.sessions.push(row);
    }

    pub fn final_hm(&self) -> Option<f64> {
        self.sessions.last().and_then(|s| s.hm)
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.sessions.last().map(|s| s.top1)
    }

    /// Performance drop from the base session to the last one.
    pub fn pd(&self) -> Option<f64> {
        let first = self.sessions.first()?;
        let last = self.sessions.last()?;
        performance_drop(first.top1, last.top1).ok()
    }

    /// Long-format CSV with columns `session,task,metric,value`.
    ///
    /// Per session: `acc` and `count` for each task `n`, then `top1` (task
    /// `all`), `acc` for `base`, and after session 0 `acc` for `new` and `hm`
    /// (task `base+new`). The last line is `pd` (task `all`). Values are
    /// fractions printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.sessions {
            for a in &s.per_task {
                let _ = writeln!(out, "{},{},acc,{}", s.session, a.task, a.accuracy());
                let _ = writeln!(out, "{},{},count,{}", s.session, a.task, a.total);
                let _ = writeln!(out, "{},{},correct,{}", s.session, a.task, a.correct);
            }
            let _ = writeln!(out, "{},all,top1,{}", s.session, s.top1);
            let _ = writeln!(out, "{},base,acc,{}", s.session, s.base);
            if let (Some(new), Some(hm)) = (s.new, s.hm) {
                let _ = writeln!(out, "{},new,acc,{}", s.session, new);
                let _ = writeln!(out, "{},base+new,hm,{}", s.session, hm);
            }
        }
        if let (Some(pd), Some(last)) = (self.pd(), self.sessions.last()) {
            let _ = writeln!(out, "{},all,pd,{}", last.session, pd);
        }
        out
    }

    /// Rebuilds a report from [`Self::to_csv`] output using the per-task
    /// counts; derived rows are recomputed, not trusted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Config("metrics CSV header missing".into()));
        }
        let mut sessions: Vec<Vec<TaskAccuracy>> = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("metrics CSV line {}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let session: usize = fields[0].parse().map_err(|_| bad())?;
            let Ok(task) = fields[1].parse::<usize>() else {
                continue;
            };
            while sessions.len() <= session {
                sessions.push(Vec::new());
            }
            let row = &mut sessions[session];
            let entry = match row.iter_mut().find(|a| a.task == task) {
                Some(e) => e,
                None => {
                    row.push(TaskAccuracy {
                        task,
                        correct: 0,
                        total: 0,
                    });
                    row.last_mut().unwrap()
                }
            };
            match fields[2] {
                "count" => entry.total = fields[3].parse().map_err(|_| bad())?,
                "correct" => entry.correct = fields[3].parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        let mut report = MetricsReport::default();
        for (session, per_task) in sessions.into_iter().enumerate() {
            if per_task.is_empty() {
                continue;
            }
            report.push(SessionMetrics::from_counts(session, per_task)?);
        }
        Ok(report)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Plain-text comparison: a top-1 table and an HM table with one column per
/// run, sessions as rows, and a final PD row. Values in percent.
pub fn render_comparison(runs: &[(String, MetricsReport)]) -> String {
    let sessions = runs
        .iter()
        .map(|(_, r)| r.sessions.len())
        .max()
        .unwrap_or(0);
    let width = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    for (title, pick) in [
        (
            "Top-1 accuracy (%)",
            (|s: &SessionMetrics| Some(s.top1)) as fn(&SessionMetrics) -> Option<f64>,
        ),
        ("Harmonic mean (%)", |s: &SessionMetrics| s.hm),
    ] {
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:<8}", "session");
        for (name, _) in runs {
            let _ = write!(out, " | {name:>width$}");
        }
        out.push('\n');
        for t in 0..sessions {
            let _ = write!(out, "{t:<8}");
            for (_, r) in runs {
                let _ = write!(out, " | {:>width$}", pct(r.sessions.get(t).and_then(pick)));
            }
            out.push('\n');
        }
        if title.starts_with("Top-1") {
            let _ = write!(out, "{:<8}", "PD");
            for (_, r) in runs {
                let _ = write!(out, " | {:>width$}", pct(r.pd()));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// CSV form of [`render_comparison`]: `metric,session,<run>...` in percent.
pub fn render_comparison_csv(runs: &[(String, MetricsReport)]) -> String {
    let sessions = runs
        .iter()
        .map(|(_, r)| r.sessions.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("metric,session");
    for (name, _) in runs {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (metric, pick) in [
        (
            "top1",
            (|s: &SessionMetrics| Some(s.top1)) as fn(&SessionMetrics) -> Option<f64>,
        ),
        ("hm", |s: &SessionMetrics| s.hm),
    ] {
        for t in 0..sessions {
            let _ = write!(out, "{metric},{t}");
            for (_, r) in runs {
                let _ = write!(out, ",{}", pct(r.sessions.get(t).and_then(pick)));
            }
            out.push('\n');
        }
    }
    let _ = write!(out, "pd,final");
    for (_, r) in runs {
        let _ = write!(out, ",{}", pct(r.pd()));
    }
    out.push('\n');
    out
}
