use super::Task;
use std::fmt;

/// Area under the ROC curve by pairwise counting: each positive/negative
/// pair scores 1 when the positive ranks higher and 0.5 on a tie. NaN when
/// either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l >= 0.5).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l < 0.5).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    (pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetMetrics {
    Regression { mae: f64, rmse: f64 },
    Classification { auc: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub split: String,
    pub count: usize,
    pub rows: Vec<(String, TargetMetrics)>,
    pub mean: TargetMetrics,
}

impl MetricsReport {
    /// `predictions[i]` and `targets[i]` are the vectors of molecule `i`, in
    /// original units.
    pub fn compute(task: Task, split: &str, names: &[String], predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Self {
        let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        let rows: Vec<(String, TargetMetrics)> = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let (p, t) = (column(predictions, j), column(targets, j));
                let m = match task {
                    Task::Regression => TargetMetrics::Regression { mae: mae(&p, &t), rmse: rmse(&p, &t) },
                    Task::Classification => TargetMetrics::Classification { auc: roc_auc(&p, &t) },
                };
                (name.clone(), m)
            })
            .collect();
        let k = rows.len() as f64;
        let mean = match task {
            Task::Regression => {
                let (mut a, mut r) = (0.0, 0.0);
                for (_, m) in &rows {
                    if let TargetMetrics::Regression { mae, rmse } = m {
                        a += mae / k;
                        r += rmse / k;
                    }
                }
                TargetMetrics::Regression { mae: a, rmse: r }
            }
            Task::Classification => {
                let aucs: Vec<f64> = rows
                    .iter()
                    .filter_map(|(_, m)| match m {
                        TargetMetrics::Classification { auc } if auc.is_finite() => Some(*auc),
                        _ => None,
                    })
                    .collect();
                let auc = if aucs.is_empty() { f64::NAN } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
                TargetMetrics::Classification { auc }
            }
        };
        Self { task, split: split.to_string(), count: predictions.len(), rows, mean }
    }

    /// One `key=value` line for scripts.
    pub fn summary_line(&self) -> String {
        match self.mean {
            TargetMetrics::Regression { mae, rmse } => format!(
                "metrics split={} n={} task={} mean_mae={mae:.6e} mean_rmse={rmse:.6e}",
                self.split, self.count, self.task
            ),
            TargetMetrics::Classification { auc } => {
                format!("metrics split={} n={} task={} mean_auc={auc:.6}", self.split, self.count, self.task)
            }
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).chain([6]).max().unwrap_or(6);
        let line = |f: &mut fmt::Formatter<'_>, name: &str, m: &TargetMetrics| match m {
            TargetMetrics::Regression { mae, rmse } => writeln!(f, "{name:<width$}  {mae:>14.6e}  {rmse:>14.6e}"),
            TargetMetrics::Classification { auc } => writeln!(f, "{name:<width$}  {auc:>10.6}"),
        };
        match self.task {
            Task::Regression => writeln!(f, "{:<width$}  {:>14}  {:>14}", "target", "MAE", "RMSE")?,
            Task::Classification => writeln!(f, "{:<width$}  {:>10}", "target", "ROC-AUC")?,
        }
        for (name, m) in &self.rows {
            line(f, name, m)?;
        }
        line(f, "mean", &self.mean)?;
        write!(f, "{}", self.summary_line())
    }
}
