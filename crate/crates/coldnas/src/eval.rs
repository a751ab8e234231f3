//! Rating-prediction and ranking metrics: MSE, MAE, nDCG@3 and nDCG@5,
//! computed per task and macro-averaged over a task set.
//!
//! MSE and MAE are computed on the normalized rating scale and reported
//! ×100 (percent convention). nDCG uses raw ratings as linear gains with
//! a `1/log2(rank+1)` discount; prediction ties break toward the lower
//! item position.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

/// Macro-averaged metrics over a task set. All values follow the percent
/// convention (nDCG in `[0, 100]`). `sd` is populated when aggregating
/// reports across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub n_tasks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<MetricsSd>,
}

/// Per-metric standard deviation across aggregated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSd {
    pub mse: f64,
    pub mae: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sd {
            Some(sd) => write!(
                f,
                "MSE {:.2}_({:.2})  MAE {:.2}_({:.2})  nDCG_3 {:.2}_({:.2})  nDCG_5 {:.2}_({:.2})  ({} tasks)",
                self.mse, sd.mse, self.mae, sd.mae, self.ndcg3, sd.ndcg3, self.ndcg5, sd.ndcg5,
                self.n_tasks
            ),
            None => write!(
                f,
                "MSE {:.2}  MAE {:.2}  nDCG_3 {:.2}  nDCG_5 {:.2}  ({} tasks)",
                self.mse, self.mae, self.ndcg3, self.ndcg5, self.n_tasks
            ),
        }
    }
}

/// Mean squared / absolute error on the normalized scale, ×100.
pub fn mse_mae(preds: &[f64], truths: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Precondition(format!(
            "mse_mae needs equal nonempty lengths, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let n = preds.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&p, &t) in preds.iter().zip(truths) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n * 100.0, ae / n * 100.0))
}

/// nDCG@k of items ranked by descending prediction, gains equal to the
/// (non-negative) true relevances, discount `1/log2(rank+1)`. An ideal
/// DCG of zero yields 1 by convention.
pub fn ndcg_at(k: usize, preds: &[f64], truths: &[f64]) -> Result<f64> {
    if k == 0 {
        return Err(Error::Precondition("nDCG requires k >= 1".into()));
    }
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Precondition(format!(
            "nDCG needs equal nonempty lengths, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Descending by prediction, ties toward the lower item index.
    order.sort_by(|&a, &b| {
        preds[b]
            .partial_cmp(&preds[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let cutoff = k.min(preds.len());
    let dcg: f64 = order
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(rank, &i)| truths[i] / ((rank + 2) as f64).log2())
        .sum();

    let mut ideal = truths.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let idcg: f64 = ideal
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(rank, g)| g / ((rank + 2) as f64).log2())
        .sum();

    if idcg == 0.0 {
        Ok(1.0)
    } else {
        Ok(dcg / idcg)
    }
}

/// Per-task evaluation: `predict` returns normalized predictions for the
/// task's query items, in query order. Errors propagate; metrics are
/// macro-averaged over tasks in task order.
pub fn evaluate_with<F>(tasks: &[Task], rating_range: (f64, f64), mut predict: F) -> Result<MetricsReport>
where
    F: FnMut(&Task) -> Result<Vec<f64>>,
{
    if tasks.is_empty() {
        return Err(Error::Precondition("evaluate over empty task set".into()));
    }
    let (lo, hi) = rating_range;
    let span = (hi - lo).max(f64::EPSILON);
    let mut sums = [0.0f64; 4];
    for task in tasks {
        let preds = predict(task)?;
        if preds.len() != task.query.len() {
            return Err(Error::Precondition(format!(
                "predictor returned {} values for {} query items",
                preds.len(),
                task.query.len()
            )));
        }
        let raw: Vec<f64> = task.query.iter().map(|i| i.rating).collect();
        let norm: Vec<f64> = raw.iter().map(|r| (r - lo) / span).collect();
        let (mse, mae) = mse_mae(&preds, &norm)?;
        let n3 = ndcg_at(3, &preds, &raw)?;
        let n5 = ndcg_at(5, &preds, &raw)?;
        sums[0] += mse;
        sums[1] += mae;
        sums[2] += n3 * 100.0;
        sums[3] += n5 * 100.0;
    }
    let n = tasks.len() as f64;
    Ok(MetricsReport {
        mse: sums[0] / n,
        mae: sums[1] / n,
        ndcg3: sums[2] / n,
        ndcg5: sums[3] / n,
        n_tasks: tasks.len(),
        sd: None,
    })
}

/// Aggregate per-seed reports into mean ± standard deviation.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Precondition("aggregate over no reports".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sd = |f: fn(&MetricsReport) -> f64, m: f64| {
        (reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let (mse, mae) = (mean(|r| r.mse), mean(|r| r.mae));
    let (n3, n5) = (mean(|r| r.ndcg3), mean(|r| r.ndcg5));
    Ok(MetricsReport {
        mse,
        mae,
        ndcg3: n3,
        ndcg5: n5,
        n_tasks: reports[0].n_tasks,
        sd: Some(MetricsSd {
            mse: sd(|r| r.mse, mse),
            mae: sd(|r| r.mae, mae),
            ndcg3: sd(|r| r.ndcg3, n3),
            ndcg5: sd(|r| r.ndcg5, n5),
        }),
    })
}
