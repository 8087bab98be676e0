use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::TaskEval;
use crate::trainer::StepMetrics;

fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Unbiased best@k: the probability that a uniformly chosen size-`k` subset
/// of `total` samples, `correct` of them correct, contains a correct one.
/// Equals `1 - C(total - correct, k) / C(total, k)`.
pub fn best_at_k(correct: u64, total: u64, k: u64) -> Result<f64> {
    if correct > total {
        return Err(Error::param(format!("correct={correct} exceeds total={total}")));
    }
    if k == 0 || k > total {
        return Err(Error::param(format!("k={k} must lie in 1..=total ({total})")));
    }
    if total - correct < k {
        return Ok(1.0);
    }
    if let (Some(miss), Some(all)) = (binomial_u128(total - correct, k), binomial_u128(total, k)) {
        return Ok((all - miss) as f64 / all as f64);
    }
    // product form for sizes whose binomials overflow u128
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (total - correct - i) as f64 / (total - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Mean best@k over per-task evaluations; `None` if any task has fewer
/// than `k` samples.
pub fn mean_best_at_k(evals: &[TaskEval], k: u64) -> Option<f64> {
    if evals.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for e in evals {
        sum += best_at_k(e.n_correct as u64, e.n_samples as u64, k).ok()?;
    }
    Some(sum / evals.len() as f64)
}

/// Binomial standard error of an accuracy estimate.
pub fn binomial_std_error(accuracy: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (accuracy * (1.0 - accuracy) / n as f64).sqrt()
}

/// Successful-path counts keyed by path length.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bins: BTreeMap<usize, u64>,
}

impl LengthHistogram {
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut bins = BTreeMap::new();
        for l in lengths {
            *bins.entry(l).or_insert(0) += 1;
        }
        Self { bins }
    }

    pub fn total(&self) -> u64 {
        self.bins.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.bins.iter().map(|(&l, &c)| l as f64 * c as f64).sum::<f64>() / total as f64)
    }
}

/// Histogram of successful training-rollout lengths over the steps in `window`.
pub fn correct_length_histogram(metrics: &[StepMetrics], window: RangeInclusive<usize>) -> LengthHistogram {
    let mut bins = BTreeMap::new();
    for m in metrics.iter().filter(|m| window.contains(&m.step)) {
        for (i, &c) in m.correct_length_counts.iter().enumerate() {
            if c > 0 {
                *bins.entry(i + 1).or_insert(0) += c;
            }
        }
    }
    LengthHistogram { bins }
}

/// Counts of tasks per accuracy bin. Bin 0 holds exactly-zero accuracy and
/// the last bin exactly-one; the `n_inner` bins between split (0, 1) evenly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero: usize,
    pub one: usize,
}

pub fn accuracy_histogram(accuracies: &[f64], n_inner: usize) -> AccuracyHistogram {
    let n_inner = n_inner.max(1);
    let mut counts = vec![0; n_inner];
    let (mut zero, mut one) = (0, 0);
    for &a in accuracies {
        if a <= 0.0 {
            zero += 1;
        } else if a >= 1.0 {
            one += 1;
        } else {
            let b = ((a * n_inner as f64) as usize).min(n_inner - 1);
            counts[b] += 1;
        }
    }
    let edges = (0..=n_inner).map(|i| i as f64 / n_inner as f64).collect();
    AccuracyHistogram { edges, counts, zero, one }
}
