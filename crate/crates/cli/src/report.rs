//! Tables and plot data rendered from stored evaluation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use retrolite::eval::{mean_std, EvalReport};

use crate::CliError;

pub const MISSING: &str = "—";

fn mode_rank(mode: &str) -> u8 {
    match mode {
        "off" => 0,
        "on-no-neighbors" => 1,
        "on-ideal" => 2,
        "on-noisy" => 3,
        _ => 4,
    }
}

fn mode_label(r: &EvalReport) -> String {
    match r.mode.as_str() {
        "on-noisy" => format!("on-noisy({})", r.lambda_i),
        m => m.to_string(),
    }
}

/// Row key: mode order, then λ_i ascending, then regularizer.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
struct RowKey {
    rank: u8,
    lambda_i: f64,
    regularizer: String,
    label: String,
}

impl RowKey {
    fn of(r: &EvalReport) -> Self {
        Self {
            rank: mode_rank(&r.mode),
            lambda_i: r.lambda_i,
            regularizer: r.regularizer.clone(),
            label: mode_label(r),
        }
    }
}

/// Reports under `dir` (recursively): files named `report-*.json`.
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>, CliError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        for e in rd.filter_map(|e| e.ok()) {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report-") && n.ends_with(".json"))
            {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::new("E_REPORT", format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(CliError::new("E_NO_REPORTS", format!("no report-*.json under {}", dir.display())));
    }
    sort_reports(&mut reports);
    Ok(reports)
}

/// Sorted by (dataset, mode, λ_i), then regularizer and seed.
pub fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(mode_rank(&a.mode).cmp(&mode_rank(&b.mode)))
            .then(a.lambda_i.total_cmp(&b.lambda_i))
            .then(a.regularizer.cmp(&b.regularizer))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("dataset,mode,lambda_i,regularizer,seed,perplexity,tokens_scored\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dataset, r.mode, r.lambda_i, r.regularizer, r.seed, r.perplexity, r.tokens_scored
        ));
    }
    s
}

/// One row per (mode, regularizer), one column per dataset; cells average over seeds.
pub fn render_table(reports: &[EvalReport]) -> String {
    let datasets: BTreeSet<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
    let mut rows: Vec<RowKey> = Vec::new();
    let mut cells: BTreeMap<(usize, &str), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let key = RowKey::of(r);
        let i = match rows.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                rows.push(key);
                rows.len() - 1
            }
        };
        cells.entry((i, r.dataset.as_str())).or_default().push(r.perplexity);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].partial_cmp(&rows[b]).expect("finite lambdas"));

    let mut header = vec!["mode".to_string(), "regularizer".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    let mut lines = vec![header];
    for &i in &order {
        let mut line = vec![rows[i].label.clone(), rows[i].regularizer.clone()];
        for d in &datasets {
            line.push(match cells.get(&(i, *d)) {
                Some(v) => {
                    let (mean, std) = mean_std(v);
                    if v.len() > 1 {
                        format!("{mean:.3} ± {std:.3}")
                    } else {
                        format!("{mean:.3}")
                    }
                }
                None => MISSING.to_string(),
            });
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cols: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(cols.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Perplexity against λ_i per (dataset, regularizer); on-ideal counts as λ_i = 0.
pub fn lambda_plot_csv(reports: &[EvalReport]) -> String {
    let mut cells: BTreeMap<(&str, &str, u64), Vec<f64>> = BTreeMap::new();
    for r in reports {
        if r.mode == "on-ideal" || r.mode == "on-noisy" {
            cells
                .entry((r.dataset.as_str(), r.regularizer.as_str(), r.lambda_i.to_bits()))
                .or_default()
                .push(r.perplexity);
        }
    }
    let mut rows: Vec<_> = cells.into_iter().collect();
    rows.sort_by(|a, b| {
        (a.0 .0, a.0 .1)
            .cmp(&(b.0 .0, b.0 .1))
            .then(f64::from_bits(a.0 .2).total_cmp(&f64::from_bits(b.0 .2)))
    });
    let mut s = String::from("dataset,regularizer,lambda_i,mean,std,n\n");
    for ((d, reg, l), v) in rows {
        let (mean, std) = mean_std(&v);
        s.push_str(&format!("{d},{reg},{},{mean},{std},{}\n", f64::from_bits(l), v.len()));
    }
    s
}
