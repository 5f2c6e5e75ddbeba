//! Aligned plain-text tables: a site-by-method grid for one metric with a
//! closing `Mean (sd)` row, and a cause-by-site Top-1 grid headed by
//! narrative availability rows. Cells with no cases print as `--`.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{EvalReport, MethodSummary, Pooled};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Top1,
    Top5,
    Csmf,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Top1 => "Top-1",
            Metric::Top5 => "Top-5",
            Metric::Csmf => "CSMF",
        }
    }

    pub fn of(self, r: &EvalReport) -> Option<f64> {
        match self {
            Metric::Top1 => Some(r.top1),
            Metric::Top5 => r.top5,
            Metric::Csmf => Some(r.csmf),
        }
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn render_grid(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths = vec![0usize; cols];
    for row in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |row: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.trim_end().to_owned()
    };
    let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", "=".repeat(total));
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", "-".repeat(total));
    for row in rows {
        if row.first().is_some_and(|c| c.starts_with("Mean")) {
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
        let _ = writeln!(out, "{}", line(row));
    }
    out
}

/// Site-by-method grid for one metric; the last row holds the mean and
/// sample standard deviation across sites.
pub fn render_metric_table(title: &str, reports: &[EvalReport], metric: Metric) -> String {
    let methods = first_seen(reports.iter().map(|r| r.method.as_str()));
    let sites = first_seen(reports.iter().filter_map(|r| r.site.as_deref()));
    let mut header = vec!["Site".to_owned()];
    header.extend(methods.iter().map(|m| m.to_string()));
    let mut rows = Vec::new();
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for site in &sites {
        let mut row = vec![site.to_string()];
        for m in &methods {
            let v = reports
                .iter()
                .find(|r| r.method == *m && r.site.as_deref() == Some(*site))
                .and_then(|r| metric.of(r));
            match v {
                Some(v) => {
                    columns.entry(m).or_default().push(v);
                    row.push(format!("{v:.2}"));
                }
                None => row.push("--".into()),
            }
        }
        rows.push(row);
    }
    let mut mean_row = vec!["Mean (sd)".to_owned()];
    for m in &methods {
        mean_row.push(match columns.get(m).and_then(|v| Pooled::of(v)) {
            Some(p) => format!("{:.2} ({:.2})", p.mean, p.sd),
            None => "--".into(),
        });
    }
    rows.push(mean_row);
    render_grid(&format!("{} accuracy by site: {title}", metric.name()), &header, &rows)
}

/// One row per method with pooled Top-1, Top-5 and CSMF as `mean (sd)`.
pub fn render_summary_table(title: &str, summaries: &[MethodSummary]) -> String {
    let header: Vec<String> =
        ["Method", "Top-1", "Top-5", "CSMF"].iter().map(|s| s.to_string()).collect();
    let cell = |p: Option<&Pooled>| match p {
        Some(p) => format!("{:.3} ({:.3})", p.mean, p.sd),
        None => "--".into(),
    };
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![s.method.clone(), cell(Some(&s.top1)), cell(s.top5.as_ref()), cell(Some(&s.csmf))]
        })
        .collect();
    render_grid(title, &header, &rows)
}

/// Cause-by-site Top-1 grid for a single method. Rows are ordered by total
/// case count, largest first.
pub fn render_cause_table(title: &str, reports: &[EvalReport]) -> String {
    let sites = first_seen(reports.iter().filter_map(|r| r.site.as_deref()));
    let mut header = vec!["Cause of Death".to_owned()];
    header.extend(sites.iter().map(|s| s.to_string()));
    let by_site = |site: &str| reports.iter().find(|r| r.site.as_deref() == Some(site));

    let mut rows = vec![
        std::iter::once("Narratives %".to_owned())
            .chain(sites.iter().map(|s| {
                by_site(s).map_or("--".into(), |r| format!("{:.0}", 100.0 * r.narrative_share))
            }))
            .collect::<Vec<_>>(),
        std::iter::once("Avg Words".to_owned())
            .chain(sites.iter().map(|s| by_site(s).map_or("--".into(), |r| format!("{:.0}", r.avg_words))))
            .collect(),
    ];

    let mut totals: BTreeMap<usize, (String, usize)> = BTreeMap::new();
    for r in reports {
        for c in &r.per_cause_top1 {
            let e = totals.entry(c.cause).or_insert_with(|| (c.label.clone(), 0));
            e.1 += c.n;
        }
    }
    let mut causes: Vec<(usize, String, usize)> =
        totals.into_iter().map(|(c, (label, n))| (c, label, n)).collect();
    causes.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
    for (cause, label, _) in causes {
        let mut row = vec![label];
        for s in &sites {
            let cell = by_site(s)
                .and_then(|r| r.per_cause_top1.iter().find(|c| c.cause == cause))
                .map_or("--".into(), |c| format!("{:.2}", c.top1));
            row.push(cell);
        }
        rows.push(row);
    }
    render_grid(title, &header, &rows)
}
