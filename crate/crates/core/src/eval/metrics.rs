use serde::{Deserialize, Serialize};

/// `confusion[true][pred]` counts.
pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class precision, recall and F1. Empty denominators give 0.
pub fn per_class(conf: &[Vec<u64>], names: &[String]) -> Vec<ClassMetrics> {
    let c = conf.len();
    (0..c)
        .map(|k| {
            let tp = conf[k][k] as f64;
            let support: u64 = conf[k].iter().sum();
            let predicted: u64 = conf.iter().map(|row| row[k]).sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                name: names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1; classes without support count as 0.
pub fn macro_f1(conf: &[Vec<u64>]) -> f64 {
    if conf.is_empty() {
        return 0.0;
    }
    let m = per_class(conf, &[]);
    m.iter().map(|c| if c.support == 0 { 0.0 } else { c.f1 }).sum::<f64>() / m.len() as f64
}

pub fn accuracy(conf: &[Vec<u64>]) -> f64 {
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    (0..conf.len()).map(|k| conf[k][k]).sum::<u64>() as f64 / total as f64
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
