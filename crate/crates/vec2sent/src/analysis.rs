//! Rank encoders and correlate reconstruction diagnostics with task scores.
//!
//! Everything here works on [`ScoreTable`], a (task x encoder) matrix loaded
//! from CSV. Ranks use average (fractional) ties throughout; Spearman is the
//! Pearson correlation of the rank vectors and is reported as null when
//! undefined.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("score table: {0}")]
    BadTable(String),
    #[error("unknown row {0:?}")]
    UnknownRow(String),
    #[error("need at least {needed} common encoder columns, found {found}")]
    TooFewCommonColumns { needed: usize, found: usize },
    #[error("unknown diagnostic {0:?}")]
    UnknownDiagnostic(String),
    #[error("no defined correlations for diagnostic {0:?}")]
    AllNull(String),
    #[error("cannot rank an empty table")]
    EmptyTable,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A (task x encoder) score matrix. Missing cells are explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
    pub higher_is_better: Vec<bool>,
}

impl ScoreTable {
    pub fn new(
        rows: Vec<String>,
        cols: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
        higher_is_better: Vec<bool>,
    ) -> Result<Self, AnalysisError> {
        if values.len() != rows.len() || higher_is_better.len() != rows.len() {
            return Err(AnalysisError::BadTable(format!(
                "{} rows but {} value rows and {} directions",
                rows.len(),
                values.len(),
                higher_is_better.len()
            )));
        }
        for (r, row) in values.iter().enumerate() {
            if row.len() != cols.len() {
                return Err(AnalysisError::BadTable(format!(
                    "row {r} has {} cells, expected {}",
                    row.len(),
                    cols.len()
                )));
            }
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(AnalysisError::BadTable(format!(
                            "non-finite value at row {r}, column {c}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            values,
            higher_is_better,
        })
    }

    pub fn row_index(&self, name: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == name)
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == name)
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    /// Cells of one row, in column order.
    pub fn row_values(&self, row: usize) -> &[Option<f64>] {
        &self.values[row]
    }

    /// Parses the CSV format: header `task,<enc>,<enc>,...`, one task per
    /// data row, empty cell = missing. An optional comment row starting with
    /// `#direction:` lists `+`/`-` per task (file order) and marks rows where
    /// lower scores are better.
    pub fn from_csv_str(text: &str) -> Result<Self, AnalysisError> {
        let bad = |m: String| AnalysisError::BadTable(m);
        let mut cols: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut values = Vec::new();
        let mut directions: Option<Vec<bool>> = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#direction:") {
                let dirs: Result<Vec<bool>, AnalysisError> = rest
                    .split([',', ' '])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| match s {
                        "+" => Ok(true),
                        "-" | "\u{2212}" => Ok(false),
                        other => Err(bad(format!(
                            "line {lineno}: direction must be + or -, got {other:?}"
                        ))),
                    })
                    .collect();
                directions = Some(dirs?);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            match &cols {
                None => {
                    if fields.len() < 2 {
                        return Err(bad(format!("line {lineno}: header needs columns")));
                    }
                    cols = Some(fields[1..].iter().map(|s| s.to_string()).collect());
                }
                Some(cols) => {
                    if fields.len() != cols.len() + 1 {
                        return Err(bad(format!(
                            "line {lineno}: {} fields, expected {}",
                            fields.len(),
                            cols.len() + 1
                        )));
                    }
                    rows.push(fields[0].to_string());
                    let parsed: Result<Vec<Option<f64>>, AnalysisError> = fields[1..]
                        .iter()
                        .map(|f| {
                            if f.is_empty() {
                                Ok(None)
                            } else {
                                f.parse::<f64>().map(Some).map_err(|e| {
                                    bad(format!("line {lineno}: bad number {f:?} ({e})"))
                                })
                            }
                        })
                        .collect();
                    values.push(parsed?);
                }
            }
        }
        let cols = cols.ok_or_else(|| bad("missing header row".to_string()))?;
        let higher = match directions {
            Some(d) => {
                if d.len() != rows.len() {
                    return Err(bad(format!(
                        "#direction: has {} entries for {} rows",
                        d.len(),
                        rows.len()
                    )));
                }
                d
            }
            None => vec![true; rows.len()],
        };
        Self::new(rows, cols, values, higher)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, AnalysisError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task,{}", self.cols.join(","));
        if self.higher_is_better.iter().any(|h| !h) {
            let dirs: Vec<&str> = self
                .higher_is_better
                .iter()
                .map(|h| if *h { "+" } else { "-" })
                .collect();
            let _ = writeln!(out, "#direction: {}", dirs.join(","));
        }
        for (r, name) in self.rows.iter().enumerate() {
            let cells: Vec<String> = self.values[r]
                .iter()
                .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }
}

/// Average (fractional) ranks of `values`; rank 1 goes to the largest value
/// when `descending`, otherwise to the smallest. Ties share the mean of the
/// positions they span.
pub fn average_ranks(values: &[f64], descending: bool) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).expect("finite scores");
        if descending {
            cmp.reverse()
        } else {
            cmp
        }
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the mean rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ties: Pearson correlation of the
/// two rank vectors. `None` when fewer than two points or either rank vector
/// has zero variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    if xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs, false);
    let ry = average_ranks(ys, false);
    pearson(&rx, &ry)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Encoders ordered by rank (1 = best), with fractional ranks on ties.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub entries: Vec<(String, f64)>,
}

impl Ranking {
    fn from_ranks(names: &[String], ranks: &[f64]) -> Self {
        let mut entries: Vec<(String, f64)> = names
            .iter()
            .cloned()
            .zip(ranks.iter().copied())
            .collect();
        entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        Self { entries }
    }

    /// Encoder ids from best to worst.
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Integer view of the ranks, for comparing against hand-made tables.
    pub fn rounded(&self) -> Vec<(String, i64)> {
        self.entries
            .iter()
            .map(|(n, r)| (n.clone(), r.round() as i64))
            .collect()
    }
}

/// Ranks encoders on one task row. Best = highest score when the row is
/// higher-is-better, lowest otherwise. Encoders missing from the row are
/// left out.
pub fn rank_encoders(table: &ScoreTable, row: &str) -> Result<Ranking, AnalysisError> {
    let r = table
        .row_index(row)
        .ok_or_else(|| AnalysisError::UnknownRow(row.to_string()))?;
    let mut names = Vec::new();
    let mut scores = Vec::new();
    for (c, v) in table.row_values(r).iter().enumerate() {
        if let Some(v) = v {
            names.push(table.cols[c].clone());
            scores.push(*v);
        }
    }
    if names.is_empty() {
        return Err(AnalysisError::EmptyTable);
    }
    let ranks = average_ranks(&scores, table.higher_is_better[r]);
    Ok(Ranking::from_ranks(&names, &ranks))
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageRankResult {
    pub ranking: Ranking,
    /// Mean per-task rank per encoder, in `ranking` order.
    pub mean_ranks: Vec<(String, f64)>,
    /// Encoders with no scores at all, left out with a warning.
    pub excluded: Vec<String>,
}

/// Mean of per-task ranks, then ranked ascending. Rows where an encoder has
/// no value simply do not contribute to that encoder's mean.
pub fn average_rank(table: &ScoreTable) -> Result<AverageRankResult, AnalysisError> {
    if table.rows.is_empty() || table.cols.is_empty() {
        return Err(AnalysisError::EmptyTable);
    }
    let mut sums = vec![0.0; table.cols.len()];
    let mut counts = vec![0usize; table.cols.len()];
    for r in 0..table.rows.len() {
        let present: Vec<usize> = (0..table.cols.len())
            .filter(|&c| table.value(r, c).is_some())
            .collect();
        if present.is_empty() {
            continue;
        }
        let scores: Vec<f64> = present.iter().map(|&c| table.value(r, c).unwrap()).collect();
        let ranks = average_ranks(&scores, table.higher_is_better[r]);
        for (k, &c) in present.iter().enumerate() {
            sums[c] += ranks[k];
            counts[c] += 1;
        }
    }
    let mut names = Vec::new();
    let mut means = Vec::new();
    let mut excluded = Vec::new();
    for (c, name) in table.cols.iter().enumerate() {
        if counts[c] == 0 {
            excluded.push(name.clone());
        } else {
            names.push(name.clone());
            means.push(sums[c] / counts[c] as f64);
        }
    }
    if names.is_empty() {
        return Err(AnalysisError::EmptyTable);
    }
    let ranks = average_ranks(&means, false);
    let ranking = Ranking::from_ranks(&names, &ranks);
    let mut mean_by_name: HashMap<&str, f64> = HashMap::new();
    for (n, m) in names.iter().zip(&means) {
        mean_by_name.insert(n, *m);
    }
    let mean_ranks = ranking
        .entries
        .iter()
        .map(|(n, _)| (n.clone(), mean_by_name[n.as_str()]))
        .collect();
    Ok(AverageRankResult {
        ranking,
        mean_ranks,
        excluded,
    })
}

/// Spearman correlations between every diagnostic row and every task row.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub diagnostics: Vec<String>,
    pub tasks: Vec<String>,
    pub rho: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "diagnostic,{}", self.tasks.join(","));
        for (i, d) in self.diagnostics.iter().enumerate() {
            let cells: Vec<String> = self.rho[i]
                .iter()
                .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{d},{}", cells.join(","));
        }
        out
    }

    /// JSON summary: per-diagnostic mean and min over defined entries.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for d in &self.diagnostics {
            if let Ok(s) = summarize(self, d) {
                map.insert(
                    d.clone(),
                    serde_json::json!({ "mean_rho": s.mean_rho, "min_rho": s.min_rho }),
                );
            }
        }
        serde_json::Value::Object(map)
    }
}

/// Correlates each diagnostic row with each task row over the encoders both
/// tables share, deleting pairwise-missing cells. Rows flagged lower-is-better
/// are negated first so every correlation compares "goodness" with "goodness".
pub fn correlation_matrix(
    diag: &ScoreTable,
    down: &ScoreTable,
) -> Result<CorrelationMatrix, AnalysisError> {
    let common: Vec<(usize, usize)> = diag
        .cols
        .iter()
        .enumerate()
        .filter_map(|(i, name)| down.col_index(name).map(|j| (i, j)))
        .collect();
    if common.len() < 3 {
        return Err(AnalysisError::TooFewCommonColumns {
            needed: 3,
            found: common.len(),
        });
    }
    let mut rho = Vec::with_capacity(diag.rows.len());
    for di in 0..diag.rows.len() {
        let mut row = Vec::with_capacity(down.rows.len());
        for ti in 0..down.rows.len() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &(ci, cj) in &common {
                if let (Some(x), Some(y)) = (diag.value(di, ci), down.value(ti, cj)) {
                    xs.push(if diag.higher_is_better[di] { x } else { -x });
                    ys.push(if down.higher_is_better[ti] { y } else { -y });
                }
            }
            row.push(spearman(&xs, &ys));
        }
        rho.push(row);
    }
    Ok(CorrelationMatrix {
        diagnostics: diag.rows.clone(),
        tasks: down.rows.clone(),
        rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationSummary {
    pub mean_rho: f64,
    pub min_rho: f64,
}

/// Mean and minimum correlation of one diagnostic across tasks, ignoring
/// null entries.
pub fn summarize(
    matrix: &CorrelationMatrix,
    diagnostic: &str,
) -> Result<CorrelationSummary, AnalysisError> {
    let i = matrix
        .diagnostics
        .iter()
        .position(|d| d == diagnostic)
        .ok_or_else(|| AnalysisError::UnknownDiagnostic(diagnostic.to_string()))?;
    let defined: Vec<f64> = matrix.rho[i].iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(AnalysisError::AllNull(diagnostic.to_string()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CorrelationSummary {
        mean_rho: mean,
        min_rho: min,
    })
}

/// Outcome of recomputing a ratio row (`Id` over `PERM`) against its
/// published column.
#[derive(Debug, Clone, Serialize)]
pub struct RatioCheck {
    pub encoder_id: String,
    pub published: f64,
    pub recomputed: Option<f64>,
    /// Within tolerance of the published value.
    pub consistent: bool,
}

/// Recomputes `100 * Id / PERM` per encoder and compares with the stored
/// ratio row. Encoders outside `tol` are flagged, not errors.
pub fn check_id_perm_consistency(
    table: &ScoreTable,
    id_row: &str,
    perm_row: &str,
    ratio_row: &str,
    tol: f64,
) -> Result<Vec<RatioCheck>, AnalysisError> {
    let id = table
        .row_index(id_row)
        .ok_or_else(|| AnalysisError::UnknownRow(id_row.to_string()))?;
    let perm = table
        .row_index(perm_row)
        .ok_or_else(|| AnalysisError::UnknownRow(perm_row.to_string()))?;
    let ratio = table
        .row_index(ratio_row)
        .ok_or_else(|| AnalysisError::UnknownRow(ratio_row.to_string()))?;
    let mut out = Vec::new();
    for (c, name) in table.cols.iter().enumerate() {
        let (Some(idv), Some(permv), Some(published)) = (
            table.value(id, c),
            table.value(perm, c),
            table.value(ratio, c),
        ) else {
            continue;
        };
        let recomputed = if permv > 0.0 {
            Some(100.0 * idv / permv)
        } else {
            None
        };
        let consistent = recomputed.is_some_and(|r| (r - published).abs() <= tol);
        out.push(RatioCheck {
            encoder_id: name.clone(),
            published,
            recomputed,
            consistent,
        });
    }
    Ok(out)
}
