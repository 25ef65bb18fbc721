//! Run directories, per-epoch metrics logs and plot data files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gtc_core::eval::ResultsTable;
use gtc_core::train::EpochRecord;

pub const RUNS_DIR_ENV: &str = "GTC_RUNS_DIR";

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESULTS_FILE: &str = "results.csv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const VISUAL_FILE: &str = "visual.gtcmat";
pub const TEXTUAL_FILE: &str = "textual.gtcmat";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";

/// `$GTC_RUNS_DIR` when set and non-empty, else `runs`.
pub fn runs_root(env_value: Option<OsString>) -> PathBuf {
    match env_value {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Creates `<root>/<command>-<UTC timestamp>`, adding `-2`, `-3`, ... on collision.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}");
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

pub const METRICS_HEADER: &str =
    "epoch,bpr,gen,con,reg,total,tc_bound,val_ndcg@10,balance,consistency_interaction,consistency_visual,consistency_textual";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One CSV line (no newline). Fields absent for the epoch are left empty.
pub fn metrics_line(r: &EpochRecord) -> String {
    let e = r.eval;
    format!(
        "{},{:?},{:?},{:?},{:?},{:?},{},{},{},{},{},{}",
        r.epoch,
        r.bpr,
        r.gen,
        r.con,
        r.reg,
        r.total,
        opt(r.tc_bound),
        opt(e.map(|e| e.val_ndcg)),
        opt(e.map(|e| e.balance)),
        opt(e.map(|e| e.consistency[0])),
        opt(e.map(|e| e.consistency[1])),
        opt(e.map(|e| e.consistency[2])),
    )
}

pub fn metrics_csv(trace: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in trace {
        out.push_str(&metrics_line(r));
        out.push('\n');
    }
    out
}

/// Appends epochs to a metrics log as they finish, so a failed run keeps its history.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file })
    }

    pub fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", metrics_line(r))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Plain `x y` lines under a `#` header naming both columns.
pub fn xy_text(x_name: &str, y_name: &str, points: &[(String, f64)]) -> String {
    let mut out = format!("# {x_name} {y_name}\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x} {y:?}");
    }
    out
}

/// Balance score and the three consistency traces against epoch, one file each.
pub fn write_epoch_plots(dir: &Path, trace: &[EpochRecord]) -> Result<()> {
    let series = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Vec<(String, f64)> {
        trace
            .iter()
            .filter_map(|r| f(r).map(|y| (r.epoch.to_string(), y)))
            .collect()
    };
    let files: [(&str, &str, Box<dyn Fn(&EpochRecord) -> Option<f64>>); 4] = [
        ("plot_balance.dat", "balance", Box::new(|r| r.eval.map(|e| e.balance))),
        ("plot_consistency_interaction.dat", "fused_dot_interaction", Box::new(|r| r.eval.map(|e| e.consistency[0]))),
        ("plot_consistency_visual.dat", "fused_dot_visual", Box::new(|r| r.eval.map(|e| e.consistency[1]))),
        ("plot_consistency_textual.dat", "fused_dot_textual", Box::new(|r| r.eval.map(|e| e.consistency[2]))),
    ];
    for (name, y, f) in files {
        write(&dir.join(name), xy_text("epoch", y, &series(f.as_ref())))?;
    }
    Ok(())
}

/// One file per metric and cutoff: swept value against the mean over seeds.
pub fn write_sweep_plots(dir: &Path, table: &ResultsTable) -> Result<Vec<PathBuf>> {
    let mut keys: Vec<(&str, usize)> = Vec::new();
    for r in &table.rows {
        if !keys.contains(&(r.metric, r.k)) {
            keys.push((r.metric, r.k));
        }
    }
    let mut written = Vec::new();
    for (metric, k) in keys {
        let points: Vec<(String, f64)> = table
            .rows
            .iter()
            .filter(|r| r.metric == metric && r.k == k)
            .map(|r| (r.label.clone(), r.mean))
            .collect();
        let path = dir.join(format!("plot_sweep_{metric}@{k}.dat"));
        write(&path, xy_text(&table.label_column, &format!("{metric}@{k}"), &points))?;
        written.push(path);
    }
    Ok(written)
}

/// Wide sweep summary: one row per swept value with mean and std of every metric.
pub fn sweep_summary_csv(table: &ResultsTable) -> String {
    let mut cols: Vec<(&str, usize)> = Vec::new();
    for r in &table.rows {
        if !cols.contains(&(r.metric, r.k)) {
            cols.push((r.metric, r.k));
        }
    }
    let mut out = table.label_column.clone();
    for (m, k) in &cols {
        let _ = write!(out, ",{m}@{k}_mean,{m}@{k}_std");
    }
    out.push_str(",n_seeds\n");
    for label in table.labels() {
        out.push_str(label);
        let mut n = 0;
        for &(m, k) in &cols {
            if let Some(r) = table.find(label, m, k) {
                let _ = write!(out, ",{:.10},{:.10}", r.mean, r.std);
                n = r.n_seeds;
            } else {
                out.push_str(",,");
            }
        }
        let _ = writeln!(out, ",{n}");
    }
    out
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gtc_core::eval::ResultRow;
    use gtc_core::train::EvalRecord;

    fn record(epoch: usize, eval: bool) -> EpochRecord {
        EpochRecord {
            epoch,
            bpr: 0.5,
            gen: 0.25,
            con: 1.0,
            reg: 3.0,
            total: 2.0,
            tc_bound: None,
            eval: eval.then_some(EvalRecord {
                val_ndcg: 0.1,
                balance: 0.9,
                consistency: [1.0, 2.0, 3.0],
            }),
        }
    }

    #[test]
    fn runs_root_env_override() {
        assert_eq!(runs_root(None), PathBuf::from("runs"));
        assert_eq!(runs_root(Some("".into())), PathBuf::from("runs"));
        assert_eq!(runs_root(Some("/tmp/x".into())), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "train").unwrap();
        let b = create_run_dir(root.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        assert!(a.file_name().unwrap().to_str().unwrap().starts_with("train-"));
    }

    #[test]
    fn metrics_lines_leave_missing_fields_empty() {
        let text = metrics_csv(&[record(1, false), record(2, true)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let width = METRICS_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == width));
        assert_eq!(lines[1], "1,0.5,0.25,1.0,3.0,2.0,,,,,,");
        assert!(lines[2].ends_with(",0.1,0.9,1.0,2.0,3.0"));
    }

    #[test]
    fn epoch_plots_are_two_columns() {
        let dir = tempfile::tempdir().unwrap();
        write_epoch_plots(dir.path(), &[record(1, true), record(2, false), record(3, true)]).unwrap();
        let text = fs::read_to_string(dir.path().join("plot_consistency_textual.dat")).unwrap();
        assert_eq!(text, "# epoch fused_dot_textual\n1 3.0\n3 3.0\n");
    }

    #[test]
    fn sweep_summary_has_one_row_per_value() {
        let row = |label: &str, metric, k, mean| ResultRow {
            label: label.into(),
            metric,
            k,
            mean,
            std: 0.0,
            n_seeds: 2,
        };
        let table = ResultsTable {
            label_column: "omega2".into(),
            rows: vec![row("0.1", "ndcg", 10, 0.2), row("0.1", "map", 10, 0.1), row("0.2", "ndcg", 10, 0.3), row("0.2", "map", 10, 0.15)],
        };
        let csv = sweep_summary_csv(&table);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("omega2,ndcg@10_mean,ndcg@10_std,map@10_mean,map@10_std,n_seeds\n"));
        let dir = tempfile::tempdir().unwrap();
        let files = write_sweep_plots(dir.path(), &table).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(fs::read_to_string(&files[0]).unwrap(), "# omega2 ndcg@10\n0.1 0.2\n0.2 0.3\n");
    }
}
