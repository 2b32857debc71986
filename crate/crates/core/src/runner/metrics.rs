//! Corpus metrics and the append-only metrics log.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn check_corpus(hyps: &[&str], refs: &[&str]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 on whitespace tokens, in `[0, 100]`: clipped n-gram
/// precisions summed over the corpus, uniform weights, brevity penalty
/// `min(1, e^(1 − r/c))`, and 0 when any precision is 0. No smoothing.
pub fn bleu4(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if (0..4).any(|i| matches[i] == 0 || totals[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate in percent: total word edits over total reference words.
pub fn wer(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut edits = 0usize;
    let mut words = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::InvalidArgument("references contain no words".into()));
    }
    Ok(100.0 * edits as f64 / words as f64)
}

pub const CSV_HEADER: &str =
    "step,epoch,split,loss,lr,loss_scale,grad_norm,skipped,tokens_per_sec,metric_name,metric_value";

/// One metrics event. `None` fields are written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub loss_scale: Option<f64>,
    pub grad_norm: Option<f64>,
    pub skipped: Option<bool>,
    pub tokens_per_sec: Option<f64>,
    pub metric_name: String,
    pub metric_value: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.split,
            cell(self.loss),
            cell(self.lr),
            cell(self.loss_scale),
            cell(self.grad_norm),
            self.skipped
                .map(|s| if s { "1" } else { "0" })
                .unwrap_or(""),
            cell(self.tokens_per_sec),
            self.metric_name,
            cell(self.metric_value),
        )
    }
}

/// Append-only rows, optionally mirrored to a CSV file as they arrive.
#[derive(Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Log that also writes `path` (header first, then one line per row).
    pub fn with_file(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
        Ok(Self {
            rows: Vec::new(),
            sink: Some(w),
        })
    }

    /// Like [`MetricsLog::with_file`], but keeps an existing file's rows and
    /// appends after them.
    pub fn append_to(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut w = BufWriter::new(f);
        if fresh {
            writeln!(w, "{CSV_HEADER}")?;
            w.flush()?;
        }
        Ok(Self {
            rows: Vec::new(),
            sink: Some(w),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.sink {
            writeln!(w, "{}", row.to_csv())?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Writes the whole log as CSV.
    pub fn emit(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identities() {
        let c = ["the cat sat on the mat", "a b c d e"];
        assert!((bleu4(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu4(&["the the the the"], &["the cat sat"]).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
        assert!(bleu4(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Every n-gram of the hypothesis matches; only length differs.
        let h = ["a b c d e f"];
        let r = ["a b c d e f g h"];
        let expected = 100.0 * (1.0f64 - 8.0 / 6.0).exp();
        assert!((bleu4(&h, &r).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap(), 0.0);
        assert!((wer(&["a x c"], &["a b c"]).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(wer(&[""], &["a b c"]).unwrap(), 100.0);
        assert_eq!(wer(&["a b c d"], &["a b"]).unwrap(), 100.0);
        assert!(wer(&["a"], &[""]).is_err());
    }

    #[test]
    fn csv_rows_render_empty_cells() {
        let row = MetricsRow {
            step: 3,
            epoch: 0,
            split: "train".into(),
            loss: Some(1.5),
            lr: None,
            loss_scale: Some(1024.0),
            grad_norm: None,
            skipped: Some(true),
            tokens_per_sec: Some(10.0),
            metric_name: "token_accuracy".into(),
            metric_value: Some(0.25),
        };
        assert_eq!(
            row.to_csv(),
            "3,0,train,1.5,,1024,,1,10,token_accuracy,0.25"
        );
    }

    #[test]
    fn empty_log_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        MetricsLog::new().emit(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{CSV_HEADER}\n")
        );
    }
}
