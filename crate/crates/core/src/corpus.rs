//! Usage-pair corpus and prediction files (UTF-8 TSV, `\n` newlines).
//!
//! Corpus columns, located by header name:
//!
//! ```text
//! instance_id lemma language context_1 start_1 end_1 context_2 start_2 end_2 judgments median_label disagreement
//! ```
//!
//! `judgments` is a comma-separated list; tokens outside 1..=4 (for example
//! a "cannot decide" 0) are dropped. Empty gold cells are derived from the
//! surviving judgments. The two gold columns may be omitted entirely.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{GoldLabels, Span, UsagePair};

const REQUIRED: [&str; 10] = [
    "instance_id",
    "lemma",
    "language",
    "context_1",
    "start_1",
    "end_1",
    "context_2",
    "start_2",
    "end_2",
    "judgments",
];
const OPTIONAL: [&str; 2] = ["median_label", "disagreement"];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub rows: Vec<UsagePair>,
    /// Rows skipped in lenient mode.
    pub skipped: usize,
}

impl CorpusFile {
    pub fn by_id(&self) -> BTreeMap<&str, &UsagePair> {
        self.rows.iter().map(|p| (p.instance_id.as_str(), p)).collect()
    }

    /// Median gold label per instance, where available.
    pub fn gold_labels(&self) -> BTreeMap<String, u8> {
        self.rows
            .iter()
            .filter_map(|p| p.gold.median_label.map(|l| (p.instance_id.clone(), l)))
            .collect()
    }

    pub fn gold_disagreement(&self) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter_map(|p| p.gold.disagreement.map(|d| (p.instance_id.clone(), d)))
            .collect()
    }
}

fn parse_judgments(cell: &str) -> std::result::Result<Vec<u8>, String> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for tok in cell.split(',') {
        let tok = tok.trim();
        // "1.0"-style tokens occur in some releases
        let value: f64 = tok
            .parse()
            .map_err(|_| format!("judgment token {tok:?} is not a number"))?;
        if value.fract() != 0.0 {
            return Err(format!("judgment token {tok:?} is not integral"));
        }
        if (1.0..=4.0).contains(&value) {
            out.push(value as u8);
        }
    }
    Ok(out)
}

fn parse_row(fields: &csv::StringRecord, cols: &Columns) -> std::result::Result<UsagePair, String> {
    let get = |i: usize| fields.get(i).unwrap_or("");
    let num = |i: usize, name: &str| -> std::result::Result<usize, String> {
        get(i)
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("{name} {:?} is not a non-negative integer", get(i)))
    };
    if fields.len() < cols.min_fields {
        return Err(format!(
            "expected at least {} fields, found {}",
            cols.min_fields,
            fields.len()
        ));
    }
    let judgments = parse_judgments(get(cols.idx[9]))?;
    let mut gold = GoldLabels::from_judgments(&judgments).map_err(|e| e.to_string())?;
    if let Some(i) = cols.median {
        let cell = get(i).trim();
        if !cell.is_empty() {
            let v: f64 = cell
                .parse()
                .map_err(|_| format!("median_label {cell:?} is not a number"))?;
            if v.fract() != 0.0 || !(1.0..=4.0).contains(&v) {
                return Err(format!("median_label {cell:?} outside 1..=4"));
            }
            gold.median_label = Some(v as u8);
        }
    }
    if let Some(i) = cols.disagreement {
        let cell = get(i).trim();
        if !cell.is_empty() {
            let v: f64 = cell
                .parse()
                .map_err(|_| format!("disagreement {cell:?} is not a number"))?;
            gold.disagreement = Some(v);
        }
    }
    let pair = UsagePair {
        instance_id: get(cols.idx[0]).to_string(),
        lemma: get(cols.idx[1]).to_string(),
        language: get(cols.idx[2]).to_string(),
        context_1: get(cols.idx[3]).to_string(),
        span_1: Span::new(num(cols.idx[4], "start_1")?, num(cols.idx[5], "end_1")?),
        context_2: get(cols.idx[6]).to_string(),
        span_2: Span::new(num(cols.idx[7], "start_2")?, num(cols.idx[8], "end_2")?),
        judgments,
        gold,
    };
    pair.validate().map_err(|e| e.to_string())?;
    Ok(pair)
}

struct Columns {
    idx: [usize; 10],
    median: Option<usize>,
    disagreement: Option<usize>,
    min_fields: usize,
}

/// Reads a corpus TSV. Strict mode aborts on the first malformed row;
/// lenient mode skips and counts malformed or duplicate rows.
pub fn read_corpus(path: impl AsRef<Path>, strict: bool) -> Result<CorpusFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 10];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = find(name).ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })?;
    }
    let cols = Columns {
        median: find(OPTIONAL[0]),
        disagreement: find(OPTIONAL[1]),
        min_fields: idx.iter().copied().max().unwrap_or(0) + 1,
        idx,
    };

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for record in reader.records() {
        let (line, parsed) = match record {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                (line, parse_row(&rec, &cols))
            }
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                (line, Err(e.to_string()))
            }
        };
        match parsed {
            Ok(pair) => {
                if !seen.insert(pair.instance_id.clone()) {
                    if strict {
                        return Err(Error::DuplicateId {
                            line,
                            id: pair.instance_id,
                        });
                    }
                    log::warn!("line {line}: duplicate instance_id {:?} skipped", pair.instance_id);
                    skipped += 1;
                    continue;
                }
                rows.push(pair);
            }
            Err(reason) => {
                if strict {
                    return Err(Error::MalformedRow { line, reason });
                }
                log::warn!("line {line}: skipped malformed row: {reason}");
                skipped += 1;
            }
        }
    }
    Ok(CorpusFile {
        path: path.to_path_buf(),
        rows,
        skipped,
    })
}

fn check_cell(cell: &str, what: &str, id: &str) -> Result<()> {
    if cell.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidPair {
            instance_id: id.to_string(),
            reason: format!("{what} contains a tab or newline"),
        });
    }
    Ok(())
}

/// Writes a corpus TSV with all twelve columns.
pub fn write_corpus(rows: &[UsagePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = String::new();
    out.push_str(&REQUIRED.join("\t"));
    out.push('\t');
    out.push_str(&OPTIONAL.join("\t"));
    out.push('\n');
    for p in rows {
        for (cell, what) in [
            (&p.instance_id, "instance_id"),
            (&p.lemma, "lemma"),
            (&p.context_1, "context_1"),
            (&p.context_2, "context_2"),
        ] {
            check_cell(cell, what, &p.instance_id)?;
        }
        let judgments: Vec<String> = p.judgments.iter().map(|j| j.to_string()).collect();
        let median = p.gold.median_label.map(|m| m.to_string()).unwrap_or_default();
        let disagreement = p.gold.disagreement.map(|d| format!("{d:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.instance_id,
            p.lemma,
            p.language,
            p.context_1,
            p.span_1.start,
            p.span_1.end,
            p.context_2,
            p.span_2.start,
            p.span_2.end,
            judgments.join(","),
            median,
            disagreement
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// A single prediction value: a Subtask 1 label or a Subtask 2 score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Label(u8),
    Score(f64),
}

impl Prediction {
    pub fn as_f64(self) -> f64 {
        match self {
            Prediction::Label(l) => l as f64,
            Prediction::Score(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub instance_id: String,
    pub value: Prediction,
}

impl PredictionRow {
    pub fn label(id: impl Into<String>, label: u8) -> Self {
        PredictionRow {
            instance_id: id.into(),
            value: Prediction::Label(label),
        }
    }

    pub fn score(id: impl Into<String>, score: f64) -> Self {
        PredictionRow {
            instance_id: id.into(),
            value: Prediction::Score(score),
        }
    }
}

/// Renders prediction rows; labels as integers, scores with six decimals.
pub fn format_predictions(rows: &[PredictionRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyData("no prediction rows to write".into()));
    }
    let mut out = String::from("instance_id\tprediction\n");
    let mut seen = HashSet::new();
    for (i, row) in rows.iter().enumerate() {
        check_cell(&row.instance_id, "instance_id", &row.instance_id)?;
        if !seen.insert(row.instance_id.as_str()) {
            return Err(Error::DuplicateId {
                line: i + 2,
                id: row.instance_id.clone(),
            });
        }
        match row.value {
            Prediction::Label(l) => out.push_str(&format!("{}\t{}\n", row.instance_id, l)),
            Prediction::Score(s) => {
                if !s.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "non-finite prediction for {}",
                        row.instance_id
                    )));
                }
                out.push_str(&format!("{}\t{:.6}\n", row.instance_id, s))
            }
        }
    }
    Ok(out)
}

pub fn write_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_predictions(rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a prediction TSV. Values containing `.`, `e` or `E` are scores;
/// plain integers are labels.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.split('\t').next() == Some("instance_id") => {}
        _ => {
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: "instance_id".into(),
            })
        }
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::MalformedRow {
                line: lineno,
                reason: "expected 2 fields".into(),
            });
        };
        let bad = || Error::MalformedRow {
            line: lineno,
            reason: format!("unparseable prediction {value:?}"),
        };
        let value = if value.contains(['.', 'e', 'E']) {
            Prediction::Score(value.parse().map_err(|_| bad())?)
        } else {
            Prediction::Label(value.parse().map_err(|_| bad())?)
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId {
                line: lineno,
                id: id.to_string(),
            });
        }
        rows.push(PredictionRow {
            instance_id: id.to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Reads a `instance_id<TAB>value` table (predictions, scores, truth
/// columns) into a map of reals.
pub fn read_score_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    Ok(read_predictions(path)?
        .into_iter()
        .map(|r| (r.instance_id, r.value.as_f64()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "instance_id\tlemma\tlanguage\tcontext_1\tstart_1\tend_1\tcontext_2\tstart_2\tend_2\tjudgments\tmedian_label\tdisagreement\n";

    fn write_tmp(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("corpus.tsv");
        std::fs::write(&p, format!("{HEADER}{body}")).unwrap();
        p
    }

    #[test]
    fn parses_example_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t1,1,2\t\t\n");
        let c = read_corpus(&p, true).unwrap();
        assert_eq!(c.rows.len(), 1);
        let r = &c.rows[0];
        assert_eq!(r.judgments, vec![1, 1, 2]);
        assert_eq!(r.gold.majority_label, Some(1));
        assert!((r.gold.disagreement.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.target(1), "bank");
        assert_eq!(r.target(2), "bank");
    }

    #[test]
    fn drops_out_of_range_judgments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t0,2,2\t\t\n");
        let c = read_corpus(&p, true).unwrap();
        assert_eq!(c.rows[0].judgments, vec![2, 2]);
        assert_eq!(c.rows[0].gold.disagreement, Some(0.0));
    }

    #[test]
    fn explicit_gold_overrides_derivation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t1,1,2\t3\t0.25\n",
        );
        let c = read_corpus(&p, true).unwrap();
        assert_eq!(c.rows[0].gold.median_label, Some(3));
        assert_eq!(c.rows[0].gold.disagreement, Some(0.25));
        assert_eq!(c.rows[0].gold.majority_label, Some(1));
    }

    #[test]
    fn duplicate_id_strict_and_lenient() {
        let dir = tempfile::tempdir().unwrap();
        let row = "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t1,1,2\t\t\n";
        let p = write_tmp(&dir, &format!("{row}{row}"));
        assert!(matches!(read_corpus(&p, true), Err(Error::DuplicateId { line: 3, .. })));
        let c = read_corpus(&p, false).unwrap();
        assert_eq!((c.rows.len(), c.skipped), (1, 1));
    }

    #[test]
    fn lenient_counts_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let body = "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t1,1,2\t\t\n\
                    p2\tbank\ten\triver bank\t6\t99\tbank loan\t0\t4\t1\t\t\n\
                    p3\tbank\txx\triver bank\t6\t10\tbank loan\t0\t4\t1\t\t\n\
                    p4\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\tfoo\t\t\n\
                    p5\tbank\ten\triver bank\t6\n\
                    p6\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t\t\t\n";
        let p = write_tmp(&dir, body);
        let c = read_corpus(&p, false).unwrap();
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.skipped, 4);
        assert!(c.rows[1].judgments.is_empty());
        assert_eq!(c.rows[1].gold, GoldLabels::default());
        match read_corpus(&p, true) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spans_count_characters_not_bytes() {
        let dir = tempfile::tempdir().unwrap();
        // "银行" is 2 chars / 6 bytes
        let p = write_tmp(&dir, "z1\t银行\tzh\t去银行\t1\t3\t银行存款\t0\t2\t3,4\t\t\n");
        let c = read_corpus(&p, true).unwrap();
        assert_eq!(c.rows[0].target(1), "银行");
    }

    #[test]
    fn missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        std::fs::write(&p, "instance_id\tlemma\n").unwrap();
        assert!(matches!(read_corpus(&p, true), Err(Error::MissingColumn { .. })));
        assert!(matches!(
            read_corpus(dir.path().join("nope.tsv"), true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corpus_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "p1\tbank\ten\triver bank\t6\t10\tbank loan\t0\t4\t1,1,2\t\t\n");
        let c = read_corpus(&p, true).unwrap();
        let out = dir.path().join("out.tsv");
        write_corpus(&c.rows, &out).unwrap();
        let back = read_corpus(&out, true).unwrap();
        assert_eq!(back.rows[0].judgments, c.rows[0].judgments);
        assert_eq!(back.rows[0].gold.median_label, c.rows[0].gold.median_label);
        assert!((back.rows[0].gold.disagreement.unwrap() - 2.0 / 3.0).abs() < 5e-7);
    }

    #[test]
    fn prediction_format() {
        assert_eq!(
            format_predictions(&[PredictionRow::label("p1", 3)]).unwrap(),
            "instance_id\tprediction\np1\t3\n"
        );
        assert_eq!(
            format_predictions(&[PredictionRow::score("p1", 0.5)]).unwrap(),
            "instance_id\tprediction\np1\t0.500000\n"
        );
        assert!(format_predictions(&[]).is_err());
        assert!(format_predictions(&[PredictionRow::score("p1", f64::NAN)]).is_err());
    }

    proptest! {
        #[test]
        fn predictions_round_trip(values in prop::collection::vec(prop_oneof![
            (1u8..=4).prop_map(Prediction::Label),
            (-1e3f64..1e3).prop_map(Prediction::Score),
        ], 1..100)) {
            let rows: Vec<PredictionRow> = values.iter().enumerate()
                .map(|(i, v)| PredictionRow { instance_id: format!("id{i}"), value: *v })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("pred.tsv");
            write_predictions(&rows, &p).unwrap();
            let back = read_predictions(&p).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            for (a, b) in rows.iter().zip(&back) {
                prop_assert_eq!(&a.instance_id, &b.instance_id);
                match (a.value, b.value) {
                    (Prediction::Label(x), Prediction::Label(y)) => prop_assert_eq!(x, y),
                    (Prediction::Score(x), Prediction::Score(y)) => prop_assert!((x - y).abs() <= 5e-7),
                    _ => prop_assert!(false, "kind changed"),
                }
            }
        }
    }
}
