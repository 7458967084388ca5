//! CSV bundles for the figures.
//!
//! - `fig3.csv` `task_index,step,x,y,arm`: first evaluation path of trial 0
//!   for the first seed (point environment only).
//! - `fig4.csv` `task_index,task_parameter,arm,seed,post_return`: one row per
//!   (task, arm, seed), averaged over trials.
//! - `fig7.csv` `arm,task_index,task_parameter,seed,trial,post_return`: every
//!   record, for distribution plots.
//!
//! Without records every file still gets its header row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{RunManifest, MANIFEST_FILE};
use super::{read_records, HarnessError, MetaTestRecord, RunPaths};

pub const FIG3_HEADER: &str = "task_index,step,x,y,arm";
pub const FIG4_HEADER: &str = "task_index,task_parameter,arm,seed,post_return";
pub const FIG7_HEADER: &str = "arm,task_index,task_parameter,seed,trial,post_return";

/// Writes `plots/fig{3,4,7}.csv` under `run_dir` and returns their paths.
/// The run's manifest, if there is one, records the files.
pub fn export_plots(run_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let start = std::time::Instant::now();
    let records = read_records(&run_dir.join(RunPaths::records()))?;
    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let files = [
        ("fig3.csv", fig3(&records)),
        ("fig4.csv", fig4(&records)),
        ("fig7.csv", fig7(&records)),
    ];
    let mut out = Vec::new();
    for (name, body) in &files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        out.push(p);
    }
    let manifest_path = run_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let mut m: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let rel = files.iter().map(|(name, _)| PathBuf::from("plots").join(name)).collect();
        m.record(run_dir, "export-plots", start.elapsed().as_secs_f64(), rel)?;
    }
    Ok(out)
}

pub fn fig3(records: &[MetaTestRecord]) -> String {
    let mut s = format!("{FIG3_HEADER}\n");
    let Some(first_seed) = records.first().map(|r| r.seed) else {
        return s;
    };
    for r in records.iter().filter(|r| r.seed == first_seed && r.trial == 0) {
        if r.path.first().is_none_or(|p| p.len() != 2) {
            continue;
        }
        for (step, p) in r.path.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", r.task_index, step, p[0], p[1], r.arm);
        }
    }
    s
}

pub fn fig4(records: &[MetaTestRecord]) -> String {
    let mut s = format!("{FIG4_HEADER}\n");
    let mut cells: BTreeMap<(usize, String, u64), (f64, f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let key = (r.task_index, r.arm.clone(), r.seed);
        let e = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.task_parameter, 0.0, 0)
        });
        e.1 += r.post_return;
        e.2 += 1;
    }
    for key in order {
        let (param, sum, n) = cells[&key];
        let _ = writeln!(s, "{},{},{},{},{}", key.0, param, key.1, key.2, sum / n as f64);
    }
    s
}

pub fn fig7(records: &[MetaTestRecord]) -> String {
    let mut s = format!("{FIG7_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.arm, r.task_index, r.task_parameter, r.seed, r.trial, r.post_return
        );
    }
    s
}
