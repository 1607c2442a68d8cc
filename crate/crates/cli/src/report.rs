//! Accuracy-table rendering: rows are model labels, columns are
//! decision-window lengths in seconds, cells are percentages or "-".

use std::collections::BTreeMap;
use tanet_core::training::ResultRecord;

/// Decision-window lengths (seconds) every report lays out by default.
pub const CANONICAL_WINDOWS: [f64; 6] = [0.1, 0.25, 0.3, 0.4, 0.5, 1.0];

/// Published decision accuracies (%) for this architecture on the public
/// 64-channel dichotic-listening corpus, per decision window. Shown only
/// under the reference label; never mixed with measured cells.
pub const REFERENCE_ROW: [f64; 6] = [92.4, 94.9, 95.1, 95.4, 95.5, 94.7];

pub const MEASURED_LABEL: &str = "TAnet (measured)";
pub const REFERENCE_LABEL: &str = "TAnet (published reference, not reproduced)";

/// One rendered row: label plus an accuracy (%) per column, None for "-".
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub windows: Vec<f64>,
    pub rows: Vec<TableRow>,
    pub per_subject: Vec<(u32, Vec<Option<f64>>)>,
    pub grand_means: Vec<Option<f64>>,
}

fn window_key(w: f64) -> i64 {
    (w * 1_000_000.0).round() as i64
}

/// Aggregates records into the table: per subject and window, the mean fold
/// accuracy; the headline cell is the mean of the per-subject means.
pub fn build_table(records: &[ResultRecord], include_reference: bool) -> ResultsTable {
    // column set: canonical windows plus anything else found in the file
    let mut keys: Vec<i64> = CANONICAL_WINDOWS.iter().map(|&w| window_key(w)).collect();
    for r in records {
        let k = window_key(r.win_seconds);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_unstable();
    let windows: Vec<f64> = keys.iter().map(|&k| k as f64 / 1_000_000.0).collect();

    // (subject, window) -> fold accuracies
    let mut cells: BTreeMap<(u32, i64), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.subject, window_key(r.win_seconds)))
            .or_default()
            .push(r.accuracy);
    }
    let mut subjects: Vec<u32> = records.iter().map(|r| r.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let per_subject: Vec<(u32, Vec<Option<f64>>)> = subjects
        .iter()
        .map(|&s| {
            let row = keys
                .iter()
                .map(|&k| cells.get(&(s, k)).map(|v| 100.0 * mean(v)))
                .collect();
            (s, row)
        })
        .collect();

    let grand_means: Vec<Option<f64>> = keys
        .iter()
        .enumerate()
        .map(|(col, _)| {
            let subject_means: Vec<f64> = per_subject
                .iter()
                .filter_map(|(_, row)| row[col])
                .collect();
            if subject_means.is_empty() {
                None
            } else {
                Some(mean(&subject_means))
            }
        })
        .collect();

    let mut rows = Vec::new();
    if !records.is_empty() {
        rows.push(TableRow {
            label: MEASURED_LABEL.to_string(),
            cells: grand_means.clone(),
        });
    }
    if include_reference {
        let cells = windows
            .iter()
            .map(|w| {
                CANONICAL_WINDOWS
                    .iter()
                    .position(|c| window_key(*c) == window_key(*w))
                    .map(|i| REFERENCE_ROW[i])
            })
            .collect();
        rows.push(TableRow {
            label: REFERENCE_LABEL.to_string(),
            cells,
        });
    }

    ResultsTable {
        windows,
        rows,
        per_subject,
        grand_means,
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "-".to_string(),
    }
}

fn fmt_window(w: f64) -> String {
    let s = format!("{w}");
    s
}

/// Plain-text rendering of the table plus the per-subject breakdown.
pub fn render(table: &ResultsTable) -> String {
    let label_width = table
        .rows
        .iter()
        .map(|r| r.label.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    out.push_str("Decision-window accuracy (%)\n");
    out.push_str(&format!("{:<label_width$}", "model"));
    for w in &table.windows {
        out.push_str(&format!(" {:>7}", fmt_window(*w)));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<label_width$}", row.label));
        for cell in &row.cells {
            out.push_str(&format!(" {:>7}", fmt_cell(*cell)));
        }
        out.push('\n');
    }
    if !table.per_subject.is_empty() {
        out.push('\n');
        out.push_str("Per-subject mean accuracy (%)\n");
        out.push_str(&format!("{:<8}", "subject"));
        for w in &table.windows {
            out.push_str(&format!(" {:>7}", fmt_window(*w)));
        }
        out.push('\n');
        for (subject, cells) in &table.per_subject {
            out.push_str(&format!("{subject:<8}"));
            for cell in cells {
                out.push_str(&format!(" {:>7}", fmt_cell(*cell)));
            }
            out.push('\n');
        }
    }
    out
}

/// CSV rendering (one header row; per-subject rows then the grand mean).
pub fn render_csv(table: &ResultsTable) -> String {
    let mut out = String::from("subject");
    for w in &table.windows {
        out.push_str(&format!(",{}", fmt_window(*w)));
    }
    out.push('\n');
    for (subject, cells) in &table.per_subject {
        out.push_str(&subject.to_string());
        for cell in cells {
            out.push(',');
            if let Some(v) = cell {
                out.push_str(&format!("{v:.4}"));
            }
        }
        out.push('\n');
    }
    out.push_str("mean");
    for cell in &table.grand_means {
        out.push(',');
        if let Some(v) = cell {
            out.push_str(&format!("{v:.4}"));
        }
    }
    out.push('\n');
    out
}
