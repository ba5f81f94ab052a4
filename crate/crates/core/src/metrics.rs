//! Token edit distance, WER, expression recognition rate and report export.
//!
//! Edit operations always transform the prediction into the label, and WER
//! divides by the label length.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditOps {
    pub distance: usize,
    pub n_insert: usize,
    pub n_delete: usize,
    pub n_replace: usize,
}

/// Unit-cost Levenshtein distance from `pred` to `label`.
///
/// Operation counts come from a backtrack that, among equal-cost moves,
/// prefers replace (or match), then delete, then insert.
pub fn edit_distance<T: PartialEq>(pred: &[T], label: &[T]) -> EditOps {
    let (n, m) = (pred.len(), label.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(pred[i - 1] != label[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps {
        distance: d[n * w + m],
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let differ = pred[i - 1] != label[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(differ) == here {
                ops.n_replace += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.n_delete += 1;
            i -= 1;
        } else {
            ops.n_insert += 1;
            j -= 1;
        }
    }
    ops
}

/// `(insertions + deletions + replacements) / |label|`.
pub fn wer<T: PartialEq>(pred: &[T], label: &[T]) -> Result<f64> {
    if label.is_empty() {
        return Err(Error::EmptyLabel);
    }
    Ok(edit_distance(pred, label).distance as f64 / label.len() as f64)
}

/// Drops one trailing `<eol>` if present.
pub fn strip_eol<S: AsRef<str>>(tokens: &[S]) -> &[S] {
    match tokens.last() {
        Some(t) if t.as_ref() == "<eol>" => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub ops: EditOps,
    pub wer: f64,
    pub label_len: usize,
}

impl SampleScore {
    pub fn correct(&self) -> bool {
        self.ops.distance == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub samples: Vec<SampleScore>,
    pub n_all: usize,
    pub n_correct: usize,
    pub exprate: f64,
    /// Fraction within 1, 2 and 3 edits.
    pub leq: [f64; 3],
    /// Mean per-sample WER.
    pub wer: f64,
    pub total_insert: usize,
    pub total_delete: usize,
    pub total_replace: usize,
}

impl CorpusReport {
    pub fn leq_k(&self, k: usize) -> f64 {
        self.leq[k - 1]
    }

    /// Per-sample CSV: `sample_id,distance,ins,del,rep,wer,correct`.
    pub fn to_csv<S: AsRef<str>>(&self, ids: &[S]) -> Result<String> {
        if ids.len() != self.samples.len() {
            return Err(Error::Pairing {
                pred: self.samples.len(),
                label: ids.len(),
            });
        }
        let mut out = String::from("sample_id,distance,ins,del,rep,wer,correct\n");
        for (id, s) in ids.iter().zip(&self.samples) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{}",
                id.as_ref(),
                s.ops.distance,
                s.ops.n_insert,
                s.ops.n_delete,
                s.ops.n_replace,
                s.wer,
                u8::from(s.correct())
            );
        }
        Ok(out)
    }

    /// Aligned text block with ExpRate, ≤k, WER and the Del/Ins/Rep totals.
    pub fn summary(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>10} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}",
            "ExpRate(%)", "≤1(%)", "≤2(%)", "≤3(%)", "WER", "Del", "Ins", "Rep", "N"
        );
        let _ = writeln!(
            out,
            "{:>10} {:>8} {:>8} {:>8} {:>8.4} {:>6} {:>6} {:>6} {:>6}",
            pct(self.exprate),
            pct(self.leq[0]),
            pct(self.leq[1]),
            pct(self.leq[2]),
            self.wer,
            self.total_delete,
            self.total_insert,
            self.total_replace,
            self.n_all
        );
        out
    }
}

/// Scores paired prediction/label sequences (already stripped of `<eol>`).
pub fn corpus_eval<T: PartialEq, P: AsRef<[T]>, L: AsRef<[T]>>(
    predictions: &[P],
    labels: &[L],
) -> Result<CorpusReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Pairing {
            pred: predictions.len(),
            label: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Argument("corpus_eval needs at least one pair".into()));
    }
    let mut samples = Vec::with_capacity(labels.len());
    for (p, l) in predictions.iter().zip(labels) {
        let (p, l) = (p.as_ref(), l.as_ref());
        samples.push(SampleScore {
            ops: edit_distance(p, l),
            wer: wer(p, l)?,
            label_len: l.len(),
        });
    }
    Ok(report_from(samples))
}

fn report_from(samples: Vec<SampleScore>) -> CorpusReport {
    let n = samples.len();
    let frac = |k: usize| samples.iter().filter(|s| s.ops.distance <= k).count() as f64 / n as f64;
    let n_correct = samples.iter().filter(|s| s.correct()).count();
    CorpusReport {
        n_all: n,
        n_correct,
        exprate: n_correct as f64 / n as f64,
        leq: [frac(1), frac(2), frac(3)],
        wer: samples.iter().map(|s| s.wer).sum::<f64>() / n as f64,
        total_insert: samples.iter().map(|s| s.ops.n_insert).sum(),
        total_delete: samples.iter().map(|s| s.ops.n_delete).sum(),
        total_replace: samples.iter().map(|s| s.ops.n_replace).sum(),
        samples,
    }
}

/// Scores for labels whose length lies in `[lo, hi)`; `hi = None` is unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub lo: usize,
    pub hi: Option<usize>,
    pub n_all: usize,
    pub exprate: Option<f64>,
    pub wer: Option<f64>,
}

/// Groups pairs by label length into buckets starting at each edge.
///
/// Labels shorter than the first edge are counted in the first bucket so the
/// buckets always partition the corpus.
pub fn length_bucket_report<T: PartialEq, P: AsRef<[T]>, L: AsRef<[T]>>(
    predictions: &[P],
    labels: &[L],
    bucket_edges: &[usize],
) -> Result<Vec<BucketReport>> {
    if bucket_edges.is_empty() || bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "bucket edges must be non-empty and strictly increasing, got {bucket_edges:?}"
        )));
    }
    let full = corpus_eval(predictions, labels)?;
    let mut groups: Vec<Vec<SampleScore>> = vec![Vec::new(); bucket_edges.len()];
    for s in &full.samples {
        let idx = bucket_edges
            .iter()
            .rposition(|&e| e <= s.label_len)
            .unwrap_or(0);
        groups[idx].push(*s);
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let n_all = g.len();
            let (exprate, wer) = if n_all == 0 {
                (None, None)
            } else {
                let r = report_from(g);
                (Some(r.exprate), Some(r.wer))
            };
            BucketReport {
                lo: bucket_edges[i],
                hi: bucket_edges.get(i + 1).copied(),
                n_all,
                exprate,
                wer,
            }
        })
        .collect())
}
