//! Summary tables over finished runs: one table per study, one row per
//! variant, recall as mean ± population standard deviation over seeds.

use std::fmt::Write as _;

use crate::metrics::RunSummary;
use crate::partition::mean_std;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd {
            mean,
            std,
            n: values.len(),
        }
    }

    /// `mean ± std` of fractions, shown in percent.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    pub fn plain(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub study: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Column-aligned text.
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                let pad = w - cell.chars().count();
                if i == 0 {
                    let _ = write!(s, "{cell}{}", " ".repeat(pad));
                } else {
                    let _ = write!(s, "  {}{cell}", " ".repeat(pad));
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.header));
        out.push('\n');
        let rule: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let escape = |c: &String| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&row.iter().map(escape).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

fn title(study: &str) -> String {
    match study {
        "splits" => "Partition splits".into(),
        "local_iterations" => "Local iterations under a fixed total budget".into(),
        "augmentation" => "Augmentation".into(),
        "mining_restriction" => "Mining pool restriction".into(),
        "negatives" => "Negative mining".into(),
        "aggregation_interval" => "Top-level aggregation interval".into(),
        "base" => "Runs".into(),
        other => format!("Study {other}"),
    }
}

/// Groups items by key, keeping first-appearance order.
fn group_by<'a, K: PartialEq + Clone>(
    items: impl IntoIterator<Item = &'a RunSummary>,
    key: impl Fn(&RunSummary) -> K,
) -> Vec<(K, Vec<&'a RunSummary>)> {
    let mut groups: Vec<(K, Vec<&RunSummary>)> = Vec::new();
    for s in items {
        let k = key(s);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(s),
            None => groups.push((k, vec![s])),
        }
    }
    groups
}

/// Final recall at `k` of each run, in run order.
pub fn final_recall(runs: &[&RunSummary], k: usize) -> Vec<f64> {
    runs.iter().filter_map(|s| s.final_recall.at(k)).collect()
}

/// One table per study, rows in variant order.
pub fn tables(summaries: &[RunSummary]) -> Vec<Table> {
    let mut out = Vec::new();
    for (study, runs) in group_by(summaries, |s| s.key.study.clone()) {
        let ks: Vec<usize> = runs[0].final_recall.recall.keys().copied().collect();
        let splits = study == "splits";
        let mut header = vec!["variant".to_string(), "runs".to_string()];
        if splits {
            header.extend(["clients", "seqs/client", "images/client"].map(String::from));
        }
        if let Some(k) = ks.first() {
            header.push(format!("init R@{k} (%)"));
        }
        header.extend(ks.iter().map(|k| format!("R@{k} (%)")));

        let mut variants = group_by(runs.iter().copied(), |s| (s.key.variant_index, s.key.variant.clone()));
        variants.sort_by_key(|((i, _), _)| *i);
        let rows = variants
            .into_iter()
            .map(|((_, label), group)| {
                let mut row = vec![label, group.len().to_string()];
                let stat = |f: &dyn Fn(&RunSummary) -> f64| MeanStd::of(&group.iter().map(|s| f(s)).collect::<Vec<_>>());
                if splits {
                    row.push(stat(&|s| s.partition.clients as f64).plain());
                    let seqs = stat(&|s| s.partition.seqs_mean).mean;
                    let seqs_sd = stat(&|s| s.partition.seqs_std).mean;
                    let imgs = stat(&|s| s.partition.images_mean).mean;
                    let imgs_sd = stat(&|s| s.partition.images_std).mean;
                    row.push(format!("{seqs:.1} ± {seqs_sd:.1}"));
                    row.push(format!("{imgs:.1} ± {imgs_sd:.1}"));
                }
                if let Some(&k) = ks.first() {
                    row.push(stat(&|s| s.initial.at(k).unwrap_or(f64::NAN)).percent());
                }
                for &k in &ks {
                    row.push(MeanStd::of(&final_recall(&group, k)).percent());
                }
                row
            })
            .collect();
        out.push(Table {
            title: title(&study),
            study,
            header,
            rows,
        });
    }
    out
}
