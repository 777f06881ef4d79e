//! Confusion matrices, classification reports and their CSV, text and SVG
//! renderings.
//!
//! Rows of a confusion matrix are true classes and columns are predictions.
//! A metric whose denominator is zero is reported as 0 and flagged.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>, class_names: Vec<String>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(Error::data("confusion matrix must be square and non-empty"));
        }
        if class_names.len() != k {
            return Err(Error::data(format!(
                "{} class names for a {k}×{k} confusion matrix",
                class_names.len()
            )));
        }
        Ok(ConfusionMatrix { counts, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(Error::data(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Relabels classes so that old class `perm[i]` becomes class `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_classes();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::data(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let counts = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| self.counts[i][j]).collect())
            .collect();
        let class_names = perm.iter().map(|&i| self.class_names[i].clone()).collect();
        Ok(ConfusionMatrix { counts, class_names })
    }
}

fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::data(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::data("confusion matrix needs at least one class"));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(Error::data(format!(
                "sample {i}: label pair ({t}, {p}) outside 0..{num_classes}"
            )));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::new(counts, default_class_names(num_classes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any of the three metrics came from a 0/0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl ClassificationReport {
    pub fn degenerate_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|c| c.degenerate)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> (f64, bool) {
    if p + r == 0.0 {
        (0.0, true)
    } else {
        (2.0 * p * r / (p + r), false)
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("confusion matrix holds no samples"));
    }
    let k = cm.num_classes();
    let classes: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let (precision, dp) = ratio(tp, cm.column_sum(c));
            let (recall, dr) = ratio(tp, cm.row_sum(c));
            let (f1, df) = harmonic(precision, recall);
            ClassMetrics {
                name: cm.class_names[c].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                degenerate: dp || dr || df,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: cm.trace() as f64 / total as f64,
        total,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "txt" => Ok(ReportFormat::Text),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::usage(format!(
                "unknown report format {other:?} (expected csv, text or svg)"
            ))),
        }
    }
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Text => "txt",
            ReportFormat::Svg => "svg",
        }
    }
}

/// Renders a report (or, for SVG, the matrix) as a document.
pub fn render_report(report: &ClassificationReport, cm: &ConfusionMatrix, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Text => render_text(report, cm),
        ReportFormat::Svg => render_svg(cm),
    }
}

/// Parses a format tag and renders in one step.
pub fn render_report_as(report: &ClassificationReport, cm: &ConfusionMatrix, format: &str) -> Result<String> {
    Ok(render_report(report, cm, format.parse()?))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `class,precision,recall,f1,support` per class, then a `macro` row and an
/// `accuracy` row whose value sits in the f1 column. Values use the shortest
/// representation that parses back to the same `f64`.
fn render_csv(report: &ClassificationReport) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for c in &report.classes {
        writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&c.name),
            c.precision,
            c.recall,
            c.f1,
            c.support
        )
        .expect("writing to a String");
    }
    writeln!(
        out,
        "macro,{},{},{},{}",
        report.macro_precision, report.macro_recall, report.macro_f1, report.total
    )
    .expect("writing to a String");
    writeln!(out, "accuracy,,,{},{}", report.accuracy, report.total).expect("writing to a String");
    out
}

/// Numeric content of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub classes: Vec<(String, f64, f64, f64, u64)>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl ReportTable {
    pub fn from_report(report: &ClassificationReport) -> Self {
        ReportTable {
            classes: report
                .classes
                .iter()
                .map(|c| (c.name.clone(), c.precision, c.recall, c.f1, c.support))
                .collect(),
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
            accuracy: report.accuracy,
            total: report.total,
        }
    }
}

pub fn parse_report_csv(text: &str) -> Result<ReportTable> {
    let bad = |msg: String| Error::data(format!("report csv: {msg}"));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["class", "precision", "recall", "f1", "support"] {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let count = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let mut classes = Vec::new();
    let mut macro_row = None;
    let mut accuracy_row = None;
    for record in reader.records() {
        let r = record.map_err(|e| bad(e.to_string()))?;
        match &r[0] {
            "macro" => macro_row = Some((num(&r[1])?, num(&r[2])?, num(&r[3])?, count(&r[4])?)),
            "accuracy" => accuracy_row = Some((num(&r[3])?, count(&r[4])?)),
            name => classes.push((name.to_string(), num(&r[1])?, num(&r[2])?, num(&r[3])?, count(&r[4])?)),
        }
    }
    let (macro_precision, macro_recall, macro_f1, _) = macro_row.ok_or_else(|| bad("missing macro row".into()))?;
    let (accuracy, total) = accuracy_row.ok_or_else(|| bad("missing accuracy row".into()))?;
    Ok(ReportTable {
        classes,
        macro_precision,
        macro_recall,
        macro_f1,
        accuracy,
        total,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn render_text(report: &ClassificationReport, cm: &ConfusionMatrix) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "class".into(),
        "precision %".into(),
        "recall %".into(),
        "f1 %".into(),
        "support".into(),
    ]];
    for c in &report.classes {
        let name = if c.degenerate { format!("{}*", c.name) } else { c.name.clone() };
        rows.push([name, pct(c.precision), pct(c.recall), pct(c.f1), c.support.to_string()]);
    }
    rows.push([
        "macro".into(),
        pct(report.macro_precision),
        pct(report.macro_recall),
        pct(report.macro_f1),
        report.total.to_string(),
    ]);
    rows.push([
        "accuracy".into(),
        String::new(),
        String::new(),
        pct(report.accuracy),
        report.total.to_string(),
    ]);
    let mut out = String::new();
    write_table(&mut out, &rows);
    if !report.degenerate_classes().is_empty() {
        out.push_str("* a metric of this class had a zero denominator and is reported as 0\n");
    }

    out.push_str("\nconfusion matrix (rows: true, columns: predicted)\n");
    let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new())
        .chain(cm.class_names.iter().cloned())
        .collect()];
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        grid.push(
            std::iter::once(name.clone())
                .chain(row.iter().map(u64::to_string))
                .collect(),
        );
    }
    write_table(&mut out, &grid);
    out
}

fn write_table<R: AsRef<[String]>>(out: &mut String, rows: &[R]) {
    let cols = rows[0].as_ref().len();
    let widths: Vec<usize> = (0..cols)
        .map(|j| rows.iter().map(|r| r.as_ref()[j].chars().count()).max().unwrap_or(0))
        .collect();
    for r in rows {
        let mut line = String::new();
        for (j, cell) in r.as_ref().iter().enumerate() {
            if j == 0 {
                write!(line, "{cell:<w$}", w = widths[j]).expect("writing to a String");
            } else {
                write!(line, "  {cell:>w$}", w = widths[j]).expect("writing to a String");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const CELL: usize = 80;
const MARGIN: usize = 120;

/// Heatmap with cell shade proportional to count over the largest count.
fn render_svg(cm: &ConfusionMatrix) -> String {
    let k = cm.num_classes();
    let side = MARGIN + k * CELL + 20;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    let mut w = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    w(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}" font-family="sans-serif" font-size="14">"#
    ));
    w(format!(r#"<rect width="{side}" height="{side}" fill="white"/>"#));
    w(format!(
        r#"<text x="{}" y="24" text-anchor="middle">predicted</text>"#,
        MARGIN + k * CELL / 2
    ));
    w(format!(
        r#"<text x="20" y="{y}" text-anchor="middle" transform="rotate(-90 20 {y})">true</text>"#,
        y = MARGIN + k * CELL / 2
    ));
    for (j, name) in cm.class_names.iter().enumerate() {
        w(format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN + j * CELL + CELL / 2,
            MARGIN - 10,
            xml_escape(name)
        ));
    }
    for (i, (name, row)) in cm.class_names.iter().zip(&cm.counts).enumerate() {
        let y = MARGIN + i * CELL;
        w(format!(
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 8,
            y + CELL / 2 + 5,
            xml_escape(name)
        ));
        for (j, &count) in row.iter().enumerate() {
            let x = MARGIN + j * CELL;
            // integer shading keeps the output byte-stable
            let level = (count * 255 / max) as u8;
            let shade = 255 - level;
            let text_fill = if level > 140 { "white" } else { "black" };
            w(format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#{shade:02x}{shade:02x}ff\" stroke=\"#333333\"/>"
            ));
            w(format!(
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text_fill}">{count}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 5
            ));
        }
    }
    w("</svg>".to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight from the label lists, no matrix involved.
    fn brute_force(y_true: &[usize], y_pred: &[usize], k: usize) -> (Vec<[f64; 3]>, [f64; 3], f64) {
        let mut per = Vec::new();
        for c in 0..k {
            let mut tp = 0;
            let mut predicted = 0;
            let mut actual = 0;
            for (&t, &p) in y_true.iter().zip(y_pred) {
                if p == c {
                    predicted += 1;
                }
                if t == c {
                    actual += 1;
                }
                if t == c && p == c {
                    tp += 1;
                }
            }
            let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            per.push([p, r, f]);
        }
        let mut macro_ = [0.0; 3];
        for m in &per {
            for j in 0..3 {
                macro_[j] += m[j] / k as f64;
            }
        }
        let correct = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
        (per, macro_, correct as f64 / y_true.len() as f64)
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..k)).collect()
    }

    #[test]
    fn identical_labels_give_diagonal() {
        let y = vec![0, 1, 1, 0, 1];
        let cm = confusion_matrix(&y, &y, 2).unwrap();
        assert_eq!(cm.counts(), &[vec![2, 0], vec![0, 3]]);
        assert_eq!(cm.trace(), 5);
    }

    #[test]
    fn all_correct_on_364_test_images() {
        let y: Vec<usize> = (0..364).map(|i| i % 2).collect();
        let cm = confusion_matrix(&y, &y, 2).unwrap();
        assert_eq!(cm.trace(), 364);
        assert_eq!(cm.counts()[0][1] + cm.counts()[1][0], 0);
        assert_eq!(classification_report(&cm).unwrap().accuracy, 1.0);
    }

    #[test]
    fn counting_oracle_on_200_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let t = random_labels(&mut rng, 200, 2);
        let p = random_labels(&mut rng, 200, 2);
        let cm = confusion_matrix(&t, &p, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let n = t.iter().zip(&p).filter(|&(&a, &b)| a == i && b == j).count() as u64;
                assert_eq!(cm.counts()[i][j], n);
            }
        }
        assert_eq!(cm.total(), 200);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        assert!(matches!(confusion_matrix(&[0, 2], &[0, 1], 2), Err(Error::Data(_))));
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_matrix_is_all_ones() {
        let cm = ConfusionMatrix::new(vec![vec![182, 0], vec![0, 182]], default_class_names(2)).unwrap();
        let r = classification_report(&cm).unwrap();
        for v in [r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy] {
            assert_eq!(v, 1.0);
        }
        let csv = render_report(&r, &cm, ReportFormat::Csv);
        assert!(csv.contains("macro,1,1,1,364\n"));
        assert!(csv.ends_with("accuracy,,,1,364\n"));
        let text = render_report(&r, &cm, ReportFormat::Text);
        let macro_line = text.lines().find(|l| l.starts_with("macro")).unwrap();
        assert_eq!(macro_line.matches("100.00").count(), 3);
    }

    #[test]
    fn hand_evaluated_50_50_0_100() {
        let cm = ConfusionMatrix::new(vec![vec![50, 50], vec![0, 100]], default_class_names(2)).unwrap();
        let r = classification_report(&cm).unwrap();
        assert_eq!(r.classes[0].recall, 0.5);
        assert_eq!(r.classes[0].precision, 1.0);
        assert!((r.classes[1].precision - 0.6667).abs() < 1e-4);
        assert_eq!(r.accuracy, 0.75);
        assert!(!r.classes[0].degenerate);
    }

    #[test]
    fn empty_class_is_flagged_zero() {
        let cm = ConfusionMatrix::new(
            vec![vec![5, 0, 1], vec![0, 0, 0], vec![2, 0, 4]],
            default_class_names(3),
        )
        .unwrap();
        let r = classification_report(&cm).unwrap();
        let c = &r.classes[1];
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        assert!(c.degenerate);
        assert_eq!(r.degenerate_classes(), vec!["class1"]);
        assert!(render_report(&r, &cm, ReportFormat::Text).contains("class1*"));
    }

    #[test]
    fn zero_total_is_data_error() {
        let cm = ConfusionMatrix::new(vec![vec![0, 0], vec![0, 0]], default_class_names(2)).unwrap();
        assert!(matches!(classification_report(&cm), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_format_is_usage_error() {
        assert!(matches!("pdf".parse::<ReportFormat>(), Err(Error::Usage(_))));
        let cm = ConfusionMatrix::new(vec![vec![1]], vec!["a".into()]).unwrap();
        let r = classification_report(&cm).unwrap();
        assert!(matches!(render_report_as(&r, &cm, "html"), Err(Error::Usage(_))));
        assert!(render_report_as(&r, &cm, "svg").is_ok());
    }

    #[test]
    fn fuzzed_reports_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..1000 {
            let k = rng.random_range(2..=4);
            let n = rng.random_range(1..=300);
            let t = random_labels(&mut rng, n, k);
            // bias predictions toward the truth so matrices are not uniform
            let p: Vec<usize> = t
                .iter()
                .map(|&y| if rng.random_bool(0.6) { y } else { rng.random_range(0..k) })
                .collect();
            let cm = confusion_matrix(&t, &p, k).unwrap();
            let r = classification_report(&cm).unwrap();
            let (per, macro_, acc) = brute_force(&t, &p, k);
            for (c, m) in r.classes.iter().zip(&per) {
                assert!((c.precision - m[0]).abs() <= 1e-12, "case {case}");
                assert!((c.recall - m[1]).abs() <= 1e-12, "case {case}");
                assert!((c.f1 - m[2]).abs() <= 1e-12, "case {case}");
            }
            assert!((r.macro_precision - macro_[0]).abs() <= 1e-12);
            assert!((r.macro_recall - macro_[1]).abs() <= 1e-12);
            assert!((r.macro_f1 - macro_[2]).abs() <= 1e-12);
            assert!((r.accuracy - acc).abs() <= 1e-12);
            // accuracy is exactly trace/total
            assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cm = ConfusionMatrix::new(
            vec![vec![31, 7, 2], vec![3, 0, 11], vec![1, 1, 29]],
            vec!["a,b".into(), "plain".into(), "q\"uote".into()],
        )
        .unwrap();
        let r = classification_report(&cm).unwrap();
        let parsed = parse_report_csv(&render_report(&r, &cm, ReportFormat::Csv)).unwrap();
        assert_eq!(parsed, ReportTable::from_report(&r));
    }

    #[test]
    fn svg_parses_and_is_stable() {
        let cm = ConfusionMatrix::new(
            vec![vec![180, 2], vec![1, 181]],
            vec!["covid <&>".into(), "non-covid".into()],
        )
        .unwrap();
        let r = classification_report(&cm).unwrap();
        let a = render_report(&r, &cm, ReportFormat::Svg);
        let b = render_report(&r, &cm, ReportFormat::Svg);
        assert_eq!(a, b);
        let doc = roxmltree::Document::parse(&a).unwrap();
        let texts: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("text"))
            .filter_map(|n| n.text())
            .collect();
        for needle in ["180", "2", "1", "181", "covid <&>", "non-covid"] {
            assert!(texts.contains(&needle), "{needle} missing from {texts:?}");
        }
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("rect")).count(), 5);
    }

    #[test]
    fn permutation_must_be_valid() {
        let cm = ConfusionMatrix::new(vec![vec![1, 2], vec![3, 4]], default_class_names(2)).unwrap();
        assert!(cm.permuted(&[0, 0]).is_err());
        assert!(cm.permuted(&[0]).is_err());
        assert_eq!(cm.permuted(&[1, 0]).unwrap().counts(), &[vec![4, 3], vec![2, 1]]);
    }

    fn matrix_strategy() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..=4)
            .prop_flat_map(|k| proptest::collection::vec(proptest::collection::vec(0u64..50, k), k))
            .prop_filter("non-empty", |c| c.iter().flatten().sum::<u64>() > 0)
            .prop_map(|c| {
                let k = c.len();
                ConfusionMatrix::new(c, default_class_names(k)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(cm in matrix_strategy()) {
            let r = classification_report(&cm).unwrap();
            for c in &r.classes {
                for v in [c.precision, c.recall, c.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if c.precision > 0.0 && c.recall > 0.0 {
                    prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-15);
                    prop_assert!(c.f1 >= c.precision.min(c.recall) - 1e-15);
                }
            }
            prop_assert_eq!(r.total, cm.total());
        }

        #[test]
        fn relabeling_is_equivariant(cm in matrix_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let k = cm.num_classes();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let r = classification_report(&cm).unwrap();
            let rp = classification_report(&cm.permuted(&perm).unwrap()).unwrap();
            for (i, &old) in perm.iter().enumerate() {
                prop_assert_eq!(&rp.classes[i], &r.classes[old]);
            }
            prop_assert_eq!(rp.accuracy, r.accuracy);
            prop_assert!((rp.macro_f1 - r.macro_f1).abs() <= 1e-15);
        }
    }
}
