//! Result tables and plot-data files.
//!
//! [`ReportTable`] is a rectangular grid of labelled cells with two
//! renderings: an aligned text table where each standard error appears in
//! parentheses on the line beneath its estimate, and a CSV form where the
//! estimate and its standard error share one `estimate (se)` cell. Both
//! renderings round to four significant figures; full-precision numbers
//! belong in the machine-readable results file, not in tables.
//!
//! [`emit_gates_plot_data`] writes the per-group effect profile of a
//! heterogeneity analysis as full-precision CSV that any plotting tool can
//! consume: one row per proxy group plus one whole-sample average-effect
//! row.

use crate::causal_forest::HeterogeneityTest;
use crate::dml::EstimateSummary;
use crate::error::{Error, Result};
use crate::generic_ml::GenericResult;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    /// A point estimate with its standard error; the text rendering puts
    /// the standard error in parentheses beneath the estimate.
    Estimate { value: f64, se: f64 },
    /// A single number.
    Scalar(f64),
    /// A count or short note.
    Text(String),
    /// Nothing to show.
    Blank,
}

impl Cell {
    /// Main-line rendering at four significant figures.
    fn top(&self) -> String {
        match self {
            Cell::Estimate { value, .. } => sig4(*value),
            Cell::Scalar(v) => sig4(*v),
            Cell::Text(t) => t.clone(),
            Cell::Blank => String::new(),
        }
    }

    /// Second-line rendering: the parenthesized standard error, if any.
    fn bottom(&self) -> String {
        match self {
            Cell::Estimate { se, .. } => format!("({})", sig4(*se)),
            _ => String::new(),
        }
    }
}

/// A rectangular table of labelled results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    /// `cells[i][j]` sits at row `i`, column `j`; every row has exactly
    /// `column_labels.len()` cells.
    pub cells: Vec<Vec<Cell>>,
    pub footnotes: Vec<String>,
}

impl ReportTable {
    /// An empty table with the given title and columns.
    pub fn new(title: impl Into<String>, column_labels: Vec<String>) -> ReportTable {
        ReportTable {
            title: title.into(),
            row_labels: Vec::new(),
            column_labels,
            cells: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    /// Appends a row; the cell count must match the column count.
    pub fn push_row(&mut self, label: impl Into<String>, cells: Vec<Cell>) -> Result<()> {
        if cells.len() != self.column_labels.len() {
            return Err(Error::Config(format!(
                "table '{}' has {} columns but the row has {} cells",
                self.title,
                self.column_labels.len(),
                cells.len()
            )));
        }
        self.row_labels.push(label.into());
        self.cells.push(cells);
        Ok(())
    }

    pub fn push_footnote(&mut self, note: impl Into<String>) {
        self.footnotes.push(note.into());
    }

    /// Aligned text rendering: title, header, one or two lines per row
    /// (standard errors in parentheses beneath their estimates), then
    /// footnotes.
    pub fn render_text(&self) -> String {
        let ncols = self.column_labels.len();
        // Width of the label column and of each value column.
        let mut label_w = 0usize;
        for l in &self.row_labels {
            label_w = label_w.max(l.chars().count());
        }
        let mut col_w = vec![0usize; ncols];
        for (j, h) in self.column_labels.iter().enumerate() {
            col_w[j] = h.chars().count();
        }
        let rendered: Vec<(Vec<String>, Vec<String>)> = self
            .cells
            .iter()
            .map(|row| {
                (
                    row.iter().map(Cell::top).collect(),
                    row.iter().map(Cell::bottom).collect(),
                )
            })
            .collect();
        for (tops, bottoms) in &rendered {
            for j in 0..ncols {
                col_w[j] = col_w[j]
                    .max(tops[j].chars().count())
                    .max(bottoms[j].chars().count());
            }
        }

        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        let total = label_w + col_w.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total.max(self.title.chars().count())));
        out.push('\n');
        out.push_str(&pad_right("", label_w));
        for (j, h) in self.column_labels.iter().enumerate() {
            out.push_str("  ");
            out.push_str(&pad_left(h, col_w[j]));
        }
        out.push('\n');
        for (i, (tops, bottoms)) in rendered.iter().enumerate() {
            out.push_str(&pad_right(&self.row_labels[i], label_w));
            for (j, top) in tops.iter().enumerate() {
                out.push_str("  ");
                out.push_str(&pad_left(top, col_w[j]));
            }
            out.push('\n');
            if bottoms.iter().any(|b| !b.is_empty()) {
                out.push_str(&pad_right("", label_w));
                for (j, bottom) in bottoms.iter().enumerate() {
                    out.push_str("  ");
                    out.push_str(&pad_left(bottom, col_w[j]));
                }
                out.push('\n');
            }
        }
        if !self.footnotes.is_empty() {
            out.push_str(&"-".repeat(total.max(self.title.chars().count())));
            out.push('\n');
            for note in &self.footnotes {
                out.push_str("note: ");
                out.push_str(note);
                out.push('\n');
            }
        }
        out
    }

    /// CSV rendering: a header row, then one record per table row with
    /// estimates written as a single `estimate (se)` cell. The title and
    /// footnotes are not part of the CSV.
    pub fn render_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.column_labels.iter().cloned());
        writer
            .write_record(&header)
            .map_err(|e| Error::Data(format!("writing csv table: {e}")))?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut record = vec![self.row_labels[i].clone()];
            for cell in row {
                record.push(match cell {
                    Cell::Estimate { value, se } => format!("{} ({})", sig4(*value), sig4(*se)),
                    other => other.top(),
                });
            }
            writer
                .write_record(&record)
                .map_err(|e| Error::Data(format!("writing csv table: {e}")))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Data(format!("writing csv table: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv table is not utf-8: {e}")))
    }
}

fn pad_left(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{}{s}", " ".repeat(width.saturating_sub(len)))
}

fn pad_right(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{s}{}", " ".repeat(width.saturating_sub(len)))
}

/// Formats a number to four significant figures, switching to scientific
/// notation far from unit scale. Values at or above 10 000 keep their full
/// integer part rather than losing place value.
pub fn sig4(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0.000".to_string();
    }
    let a = x.abs();
    if !(1e-4..1e6).contains(&a) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - a.log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Builds a one-row-per-estimate table with interval, p-value, confidence
/// level, and sample size columns. Row labels come from each summary's
/// method label.
pub fn summaries_table(title: &str, rows: &[&EstimateSummary]) -> Result<ReportTable> {
    let mut table = ReportTable::new(
        title,
        ["estimate", "ci_low", "ci_high", "p_value", "level", "n"]
            .map(String::from)
            .to_vec(),
    );
    for s in rows {
        table.push_row(
            s.method_label.clone(),
            vec![
                Cell::Estimate {
                    value: s.theta,
                    se: s.se,
                },
                Cell::Scalar(s.ci_low),
                Cell::Scalar(s.ci_high),
                Cell::Scalar(s.p_value),
                Cell::Scalar(s.nominal_level),
                Cell::Text(s.n.to_string()),
            ],
        )?;
    }
    Ok(table)
}

/// Builds the above-/below-median average-effect table with the difference
/// row and its confidence interval.
pub fn heterogeneity_test_table(test: &HeterogeneityTest) -> Result<ReportTable> {
    let mut table = summaries_table(
        "average effects above and below the median predicted effect",
        &[&test.ate_above, &test.ate_below],
    )?;
    table.push_row(
        "difference (above - below)",
        vec![
            Cell::Scalar(test.diff),
            Cell::Scalar(test.diff_ci.0),
            Cell::Scalar(test.diff_ci.1),
            Cell::Blank,
            Cell::Blank,
            Cell::Blank,
        ],
    )?;
    for w in &test.warnings {
        table.push_footnote(w.clone());
    }
    Ok(table)
}

/// Builds a variable-importance table in the given order.
pub fn importance_table(importance: &[(String, f64)]) -> Result<ReportTable> {
    let mut table = ReportTable::new(
        "variable importance (split-frequency share)",
        vec!["importance".to_string()],
    );
    for (name, value) in importance {
        table.push_row(name.clone(), vec![Cell::Scalar(*value)])?;
    }
    Ok(table)
}

/// Builds the tables for one proxy source's heterogeneity analysis: the
/// proxy regression coefficients, the per-group average effects with the
/// top-vs-bottom contrast, and (when present) the group characteristic
/// comparison.
pub fn generic_ml_tables(result: &GenericResult) -> Result<Vec<ReportTable>> {
    let mut tables = Vec::new();

    let mut coef_rows: Vec<&EstimateSummary> = vec![&result.blp_beta1];
    if let Some(beta2) = &result.blp_beta2 {
        coef_rows.push(beta2);
    }
    let mut coef = summaries_table(
        &format!("proxy regression coefficients - {}", result.learner_label),
        &coef_rows,
    )?;
    if result.blp_beta2.is_none() {
        coef.push_footnote("heterogeneity loading omitted: the effect proxy had zero variance");
    }
    coef.push_footnote(format!(
        "ranking metrics: proxy regression {}, group effects {}",
        sig4(result.lambda_blp),
        sig4(result.lambda_gates)
    ));
    coef.push_footnote(format!(
        "{} splits used, {} failed; intervals at the {} level after the splitting adjustment",
        result.n_splits_used,
        result.n_splits_failed,
        sig4(result.nominal_level)
    ));
    for w in &result.warnings {
        coef.push_footnote(w.clone());
    }
    tables.push(coef);

    let mut group_rows: Vec<&EstimateSummary> =
        result.gates_groups.iter().map(|g| &g.summary).collect();
    if let Some(diff) = &result.gates_difference {
        group_rows.push(diff);
    }
    let mut groups = summaries_table(
        &format!(
            "average effects by proxy group (1 = least affected) - {}",
            result.learner_label
        ),
        &group_rows,
    )?;
    groups.push_footnote(format!(
        "group effects {} in the proxy ordering",
        if result.gates_monotone {
            "are non-decreasing"
        } else {
            "are not monotone"
        }
    ));
    for (k, g) in result.gates_groups.iter().enumerate() {
        if g.flagged_splits > 0 {
            groups.push_footnote(format!(
                "group {} lacked a treatment arm in {} of {} splits",
                k + 1,
                g.flagged_splits,
                result.n_splits_used
            ));
        }
    }
    tables.push(groups);

    if !result.clan.is_empty() {
        let mut clan = ReportTable::new(
            format!(
                "covariate means in the most and least affected groups - {}",
                result.learner_label
            ),
            ["most_affected", "least_affected", "p_difference"]
                .map(String::from)
                .to_vec(),
        );
        for ch in &result.clan {
            clan.push_row(
                ch.name.clone(),
                vec![
                    Cell::Estimate {
                        value: ch.mean_most.theta,
                        se: ch.mean_most.se,
                    },
                    Cell::Estimate {
                        value: ch.mean_least.theta,
                        se: ch.mean_least.se,
                    },
                    Cell::Scalar(ch.p_diff),
                ],
            )?;
            for note in &ch.notes {
                clan.push_footnote(format!("{}: {note}", ch.name));
            }
        }
        tables.push(clan);
    }

    Ok(tables)
}

/// Writes the per-group effect profile as full-precision CSV with columns
/// `group, estimate, ci_low, ci_high`: one row per proxy group (groups
/// that lacked a treatment arm in every usable split are dropped) plus a
/// final `ate` row carrying the whole-sample average effect and its
/// interval. Errors when no group has a usable estimate.
pub fn emit_gates_plot_data(result: &GenericResult, path: &Path) -> Result<()> {
    let plottable: Vec<(usize, &EstimateSummary)> = result
        .gates_groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.flagged_splits < result.n_splits_used)
        .map(|(k, g)| (k, &g.summary))
        .collect();
    if plottable.is_empty() {
        return Err(Error::Data(
            "no plottable groups: every group lacked a treatment arm in every split".into(),
        ));
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Data(format!("cannot write {}: {e}", path.display()));
    writer
        .write_record(["group", "estimate", "ci_low", "ci_high"])
        .map_err(fail)?;
    for (k, s) in &plottable {
        writer
            .write_record([
                format!("group_{}", k + 1),
                format!("{}", s.theta),
                format!("{}", s.ci_low),
                format!("{}", s.ci_high),
            ])
            .map_err(fail)?;
    }
    let ate = &result.blp_beta1;
    writer
        .write_record([
            "ate".to_string(),
            format!("{}", ate.theta),
            format!("{}", ate.ci_low),
            format!("{}", ate.ci_high),
        ])
        .map_err(fail)?;
    writer
        .flush()
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generic_ml::{ClanSummary, GatesGroupSummary};

    fn summary(label: &str, theta: f64, se: f64) -> EstimateSummary {
        EstimateSummary::from_point(label.to_string(), 200, theta, se, 0.90, vec![(theta, se)])
    }

    fn generic_result(k: usize) -> GenericResult {
        let groups: Vec<GatesGroupSummary> = (0..k)
            .map(|g| GatesGroupSummary {
                summary: summary(&format!("gates_group_{}", g + 1), 0.3 * g as f64, 0.1),
                flagged_splits: 0,
            })
            .collect();
        GenericResult {
            learner_label: "oracle".to_string(),
            blp_beta1: summary("blp_beta1", 0.75, 0.05),
            blp_beta2: Some(summary("blp_beta2", 1.02, 0.2)),
            gates_difference: Some(summary("gates_difference", 0.3 * (k - 1) as f64, 0.15)),
            gates_groups: groups,
            gates_monotone: true,
            clan: vec![ClanSummary {
                name: "x1".to_string(),
                mean_most: summary("clan_x1_most_affected", 0.8, 0.04),
                mean_least: summary("clan_x1_least_affected", -0.8, 0.04),
                p_diff: 1e-6,
                notes: vec![],
            }],
            lambda_blp: 0.4,
            lambda_gates: 0.2,
            n_splits_used: 10,
            n_splits_failed: 0,
            k_groups: k,
            nominal_level: 0.90,
            warnings: vec![],
        }
    }

    #[test]
    fn four_significant_figures_across_magnitudes() {
        assert_eq!(sig4(0.5), "0.5000");
        assert_eq!(sig4(-0.074), "-0.07400");
        assert_eq!(sig4(0.09), "0.09000");
        assert_eq!(sig4(1234.4), "1234");
        assert_eq!(sig4(12345.6), "12346");
        assert_eq!(sig4(3.14159), "3.142");
        assert_eq!(sig4(0.0001234), "0.0001234");
        assert_eq!(sig4(0.00001234), "1.234e-5");
        assert_eq!(sig4(1.5e7), "1.500e7");
        assert_eq!(sig4(0.0), "0.000");
        assert_eq!(sig4(f64::NAN), "NaN");
        assert_eq!(sig4(f64::INFINITY), "inf");
        assert_eq!(sig4(0.09996), "0.09996");
        // Rounding can carry into the next magnitude; the carried value
        // keeps its decimal places and may show one extra digit.
        assert_eq!(sig4(0.099996), "0.10000");
        assert_eq!(sig4(999.96), "1000.0");
    }

    #[test]
    fn rows_must_match_the_column_count() {
        let mut t = ReportTable::new("t", vec!["a".into(), "b".into()]);
        let err = t.push_row("r", vec![Cell::Scalar(1.0)]).unwrap_err();
        assert!(err.to_string().contains("2 columns"));
        t.push_row("r", vec![Cell::Scalar(1.0), Cell::Blank]).unwrap();
        assert_eq!(t.cells.len(), 1);
    }

    #[test]
    fn text_rendering_puts_standard_errors_in_parentheses_beneath_estimates() {
        let rows = [summary("effect of treatment", -0.074, 0.09)];
        let table = summaries_table("average effect estimates", &[&rows[0]]).unwrap();
        let text = table.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "average effect estimates");
        // Header, then the estimate line, then the parenthesized standard
        // error directly beneath it.
        let est_line = lines
            .iter()
            .position(|l| l.contains("effect of treatment"))
            .unwrap();
        assert!(lines[est_line].contains("-0.07400"));
        assert!(lines[est_line + 1].contains("(0.09000)"));
        // The estimate and its standard error are aligned to the same
        // column span.
        let est_col = lines[est_line].find("-0.07400").unwrap();
        let se_col = lines[est_line + 1].find("(0.09000)").unwrap();
        assert!(se_col <= est_col && est_col <= se_col + 2);
        // Every row line fits the same rectangle.
        let header_pos = lines.iter().position(|l| l.contains("ci_low")).unwrap();
        let width = lines[header_pos].chars().count();
        assert!(lines[est_line].chars().count() <= width + 2);
    }

    #[test]
    fn csv_rendering_is_rectangular_and_parses_back() {
        let s1 = summary("m1", 0.5, 0.1);
        let s2 = summary("m2", -1.25, 0.2);
        let table = summaries_table("t", &[&s1, &s2]).unwrap();
        let text = table.render_csv().unwrap();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().unwrap().clone();
        assert_eq!(headers.len(), 7);
        assert_eq!(&headers[1], "estimate");
        let records: Vec<csv::StringRecord> =
            reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert_eq!(r.len(), 7);
        }
        assert_eq!(&records[0][0], "m1");
        assert_eq!(&records[0][1], "0.5000 (0.1000)");
        assert_eq!(&records[1][1], "-1.250 (0.2000)");
    }

    #[test]
    fn generic_tables_cover_coefficients_groups_and_characteristics() {
        let result = generic_result(5);
        let tables = generic_ml_tables(&result).unwrap();
        assert_eq!(tables.len(), 3);
        assert_eq!(tables[0].row_labels, vec!["blp_beta1", "blp_beta2"]);
        assert_eq!(tables[1].row_labels.len(), 6); // 5 groups + difference
        assert!(tables[1]
            .footnotes
            .iter()
            .any(|f| f.contains("non-decreasing")));
        assert_eq!(tables[2].row_labels, vec!["x1"]);
        // A result without a heterogeneity loading explains the omission.
        let mut bare = generic_result(3);
        bare.blp_beta2 = None;
        bare.clan.clear();
        let tables = generic_ml_tables(&bare).unwrap();
        assert_eq!(tables.len(), 2);
        assert!(tables[0]
            .footnotes
            .iter()
            .any(|f| f.contains("zero variance")));
    }

    #[test]
    fn heterogeneity_table_carries_the_difference_interval() {
        let test = HeterogeneityTest {
            ate_above: summary("above_median", 1.4, 0.2),
            ate_below: summary("below_median", 0.2, 0.15),
            diff: 1.2,
            diff_ci: (0.7, 1.7),
            warnings: vec!["ties at the median".to_string()],
        };
        let table = heterogeneity_test_table(&test).unwrap();
        assert_eq!(table.row_labels.len(), 3);
        let text = table.render_text();
        assert!(text.contains("difference (above - below)"));
        assert!(text.contains("note: ties at the median"));
        let csv_text = table.render_csv().unwrap();
        assert!(csv_text.contains("0.7000"));
    }

    #[test]
    fn plot_data_round_trips_exactly_and_counts_rows() {
        let result = generic_result(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        emit_gates_plot_data(&result, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let records: Vec<csv::StringRecord> =
            reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 6); // 5 groups + 1 ate row
        for (k, record) in records.iter().take(5).enumerate() {
            let s = &result.gates_groups[k].summary;
            assert_eq!(&record[0], format!("group_{}", k + 1).as_str());
            assert_eq!(record[1].parse::<f64>().unwrap(), s.theta);
            assert_eq!(record[2].parse::<f64>().unwrap(), s.ci_low);
            assert_eq!(record[3].parse::<f64>().unwrap(), s.ci_high);
        }
        let ate = &records[5];
        assert_eq!(&ate[0], "ate");
        assert_eq!(ate[1].parse::<f64>().unwrap(), result.blp_beta1.theta);
        assert_eq!(ate[2].parse::<f64>().unwrap(), result.blp_beta1.ci_low);
        assert_eq!(ate[3].parse::<f64>().unwrap(), result.blp_beta1.ci_high);
    }

    #[test]
    fn fully_flagged_groups_are_not_plottable() {
        let mut result = generic_result(3);
        for g in &mut result.gates_groups {
            g.flagged_splits = result.n_splits_used;
        }
        let dir = tempfile::tempdir().unwrap();
        let err = emit_gates_plot_data(&result, &dir.path().join("p.csv")).unwrap_err();
        assert!(err.to_string().contains("no plottable groups"));
        // One rescued group puts that group plus the average back on the
        // plot.
        result.gates_groups[1].flagged_splits = 0;
        let path = dir.path().join("q.csv");
        emit_gates_plot_data(&result, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let records: Vec<csv::StringRecord> =
            reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 2);
        assert_eq!(&records[0][0], "group_2");
        assert_eq!(&records[1][0], "ate");
    }

    #[test]
    fn unwritable_plot_path_is_reported() {
        let result = generic_result(2);
        let err =
            emit_gates_plot_data(&result, Path::new("/nonexistent-dir/plot.csv")).unwrap_err();
        assert!(err.to_string().contains("cannot write"));
    }
}
