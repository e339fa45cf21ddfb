//! Occurrence-level caption evaluation: alignment of ground-truth and
//! predicted labeled lines, zero scoring of unmatched lines, figure-then-
//! dataset averaging, and the sentence-level caption metrics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rewards::{TextScorer, UnigramF1};
use crate::structured::{PanelLabel, StructuredOutput};
use crate::{Error, Result};

/// Lowercases, drops punctuation (hyphens survive only between two
/// alphanumerics) and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let chars: Vec<char> = raw.chars().collect();
            let mut out = String::new();
            for (i, &c) in chars.iter().enumerate() {
                if c.is_alphanumeric() {
                    out.extend(c.to_lowercase());
                } else if c == '-'
                    && i > 0
                    && chars[i - 1].is_alphanumeric()
                    && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
                {
                    out.push('-');
                }
            }
            (!out.is_empty()).then_some(out)
        })
        .collect()
}

const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with uniform weights, brevity penalty and add-epsilon
/// smoothing of zero n-gram precisions. A candidate sharing no unigram with
/// the reference scores 0.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(&c, n);
        let refs = ngram_counts(&r, n);
        let clipped: usize = hyp.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = c.len().saturating_sub(n - 1).max(1);
        if n == 1 && clipped == 0 {
            return 0.0;
        }
        let p = if clipped == 0 {
            BLEU_EPSILON / total as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += 0.25 * libm::log(p);
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        libm::exp(1.0 - r.len() as f64 / c.len() as f64)
    };
    100.0 * bp * libm::exp(log_sum)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure, recall weighted by `ROUGE_BETA`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Exact-match METEOR: greedy left-to-right one-to-one alignment, recall
/// weighted 9:1, fragmentation penalty `0.5 (chunks / matches)^3`.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let mut used = vec![false; r.len()];
    let mut align = Vec::new();
    for (i, w) in c.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *w) {
            used[j] = true;
            align.push((i, j));
        }
    }
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + align.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let frag = chunks as f64 / m as f64;
    100.0 * fmean * (1.0 - 0.5 * frag * frag * frag)
}

/// `100 ×` the text scorer F-value.
pub fn bertscore_with(scorer: &dyn TextScorer, candidate: &str, reference: &str) -> f64 {
    100.0 * scorer.score(candidate, reference)
}

pub fn bertscore_proxy(candidate: &str, reference: &str) -> f64 {
    bertscore_with(&UnigramF1, candidate, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Bleu4,
    RougeL,
    Meteor,
    BertScore,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Self::Bleu4, Self::RougeL, Self::Meteor, Self::BertScore];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bleu4 => "bleu4",
            Self::RougeL => "rougeL",
            Self::Meteor => "meteor",
            Self::BertScore => "bertscore",
        }
    }

    pub fn score(self, candidate: &str, reference: &str) -> f64 {
        match self {
            Self::Bleu4 => bleu4(candidate, reference),
            Self::RougeL => rouge_l(candidate, reference),
            Self::Meteor => meteor_lite(candidate, reference),
            Self::BertScore => bertscore_proxy(candidate, reference),
        }
    }
}

/// Per-metric values in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

impl MetricScores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Bleu4 => self.bleu4,
            Metric::RougeL => self.rouge_l,
            Metric::Meteor => self.meteor,
            Metric::BertScore => self.bertscore,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Bleu4 => self.bleu4 = v,
            Metric::RougeL => self.rouge_l = v,
            Metric::Meteor => self.meteor = v,
            Metric::BertScore => self.bertscore = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRole {
    Full,
    ReferenceOnly,
    Extra,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub label: PanelLabel,
    /// 1-based occurrence index within the label.
    pub occurrence: usize,
    pub reference: Option<String>,
    pub prediction: Option<String>,
}

impl EvalPair {
    pub fn role(&self) -> PairRole {
        match (&self.reference, &self.prediction) {
            (Some(_), Some(_)) => PairRole::Full,
            (Some(_), None) => PairRole::ReferenceOnly,
            _ => PairRole::Extra,
        }
    }

    /// Unmatched pairs score 0.
    pub fn score(&self, metric: Metric) -> f64 {
        match (&self.reference, &self.prediction) {
            (Some(r), Some(p)) => metric.score(p, r),
            _ => 0.0,
        }
    }
}

/// Pairs the k-th ground-truth occurrence of each label with its k-th
/// predicted occurrence. Output is ordered by label, then occurrence.
pub fn align_occurrences<S: AsRef<str>>(gt: &[(PanelLabel, S)], pred: &StructuredOutput) -> Vec<EvalPair> {
    let mut by_label: BTreeMap<PanelLabel, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for (l, c) in gt {
        by_label.entry(*l).or_default().0.push(c.as_ref());
    }
    for line in &pred.lines {
        by_label.entry(line.label).or_default().1.push(line.text());
    }
    let mut out = Vec::new();
    for (label, (refs, preds)) in by_label {
        for k in 0..refs.len().max(preds.len()) {
            out.push(EvalPair {
                label,
                occurrence: k + 1,
                reference: refs.get(k).map(|s| String::from(*s)),
                prediction: preds.get(k).map(|s| String::from(*s)),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureEvalRecord {
    pub figure_id: String,
    pub pairs: Vec<EvalPair>,
    /// Mean over pairs; all zero when there are no pairs.
    pub scores: MetricScores,
}

impl FigureEvalRecord {
    pub fn new(figure_id: &str, pairs: Vec<EvalPair>) -> Self {
        let mut scores = MetricScores::default();
        for m in Metric::ALL {
            scores.set(m, score_figure(&pairs, m).unwrap_or(0.0));
        }
        Self {
            figure_id: figure_id.into(),
            pairs,
            scores,
        }
    }

    /// Figures without any ground-truth line do not enter the dataset mean.
    pub fn counts(&self) -> bool {
        self.pairs.iter().any(|p| p.reference.is_some())
    }
}

/// Mean metric value over the pairs of one figure; `None` without pairs.
pub fn score_figure(pairs: &[EvalPair], metric: Metric) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(|p| p.score(metric)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateReport {
    pub scores: MetricScores,
    pub figures: usize,
    pub skipped: usize,
}

/// Unweighted mean of figure scores over figures that have ground truth.
pub fn aggregate(records: &[FigureEvalRecord]) -> Result<AggregateReport> {
    let kept: Vec<&FigureEvalRecord> = records.iter().filter(|r| r.counts()).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("no figures with ground-truth panels to aggregate".into()));
    }
    let mut scores = MetricScores::default();
    for m in Metric::ALL {
        scores.set(m, kept.iter().map(|r| r.scores.get(m)).sum::<f64>() / kept.len() as f64);
    }
    Ok(AggregateReport {
        scores,
        figures: kept.len(),
        skipped: records.len() - kept.len(),
    })
}
