//! Per-arm summary statistics of meta-test records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetaTestRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    /// Mean over seeds of the per-seed mean post-update return.
    pub mean: f64,
    /// Half-width of the 95% Student-t interval over seed means (0 with one seed).
    pub ci_half_width: f64,
    /// Median over every (seed, task, trial) post-update return.
    pub median: f64,
    pub seed_means: Vec<f64>,
    pub records: usize,
}

/// Half-width of the two-sided 95% t-interval for the mean of `xs`.
pub fn t_half_width(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    t * (var / n as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One summary per arm, in first-seen arm order.
pub fn summarize(records: &[MetaTestRecord]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_arm: BTreeMap<&str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        if !by_arm.contains_key(r.arm.as_str()) {
            order.push(&r.arm);
        }
        by_arm
            .entry(&r.arm)
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.post_return);
    }
    order
        .into_iter()
        .map(|arm| {
            let seeds = &by_arm[arm];
            let seed_means: Vec<f64> = seeds.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let all: Vec<f64> = seeds.values().flatten().copied().collect();
            ArmSummary {
                arm: arm.to_string(),
                mean: seed_means.iter().sum::<f64>() / seed_means.len() as f64,
                ci_half_width: t_half_width(&seed_means),
                median: median(&all),
                records: all.len(),
                seed_means,
            }
        })
        .collect()
}

/// `arm,mean,ci_half_width,median,seeds,records` rows.
pub fn summary_csv(summaries: &[ArmSummary]) -> String {
    let mut s = String::from("arm,mean,ci_half_width,median,seeds,records\n");
    for a in summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.arm,
            a.mean,
            a.ci_half_width,
            a.median,
            a.seed_means.len(),
            a.records
        ));
    }
    s
}

/// Fixed-width table for terminals.
pub fn summary_table(summaries: &[ArmSummary]) -> String {
    let mut s = format!("{:<12} {:>22} {:>10}\n", "arm", "mean ± 95% CI", "median");
    for a in summaries {
        s.push_str(&format!(
            "{:<12} {:>22} {:>10.2}\n",
            a.arm,
            format!("{:.2} ± {:.2}", a.mean, a.ci_half_width),
            a.median
        ));
    }
    s
}
