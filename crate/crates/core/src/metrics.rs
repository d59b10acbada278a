//! Sentence-level, multi-reference text-overlap scores and their aggregation.
//!
//! Inputs are token sequences; [`tokenize`] lowercases and splits on
//! whitespace. Every metric returns 0 for an empty candidate.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedRecord;
use crate::generator::GenerationRecord;

pub const MAX_ORDER: usize = 4;
pub const HISTOGRAM_BINS: usize = 20;

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_THETA: f64 = 3.0;
/// Search nodes explored when minimising chunks before settling for the
/// best alignment found so far.
const METEOR_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("document-frequency file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("document-frequency table needs at least one document")]
    NoDocuments,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        let key = w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        *out.entry(key).or_default() += 1;
    }
    out
}

/// Clipped n-gram precision against all references.
fn modified_precision<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> f64 {
    let cand = ngrams(candidate, n);
    let total: usize = cand.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    let ref_counts: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
    for counts in &ref_counts {
        for (g, &c) in counts {
            let e = max_ref.entry(g.as_str()).or_default();
            *e = (*e).max(c);
        }
    }
    let clipped: usize = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g.as_str()).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / total as f64
}

/// `exp(1 - r/c)` when the candidate is no longer than the closest reference
/// length `r` (ties go to the shorter reference), otherwise 1.
pub fn brevity_penalty<S>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    let c = candidate.len();
    if c == 0 {
        return 0.0;
    }
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Cumulative BLEU-`max_n`: brevity penalty times the geometric mean of the
/// clipped precisions of orders `1..=max_n`. No smoothing, so any zero
/// precision gives 0.
pub fn bleu<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = modified_precision(candidate, references, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    brevity_penalty(candidate, references) * (log_sum / max_n as f64).exp()
}

/// `BLEU-1 + BLEU-2 + BLEU-3 + BLEU-4`, each cumulative; range `[0, 4]`.
pub fn bleu_sum<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    (1..=MAX_ORDER).map(|n| bleu(candidate, references, n)).sum()
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best F1 of longest-common-subsequence precision and recall over references.
pub fn rouge_l<S: PartialEq>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .fold(0.0, f64::max)
}

/// Size of the largest one-to-one exact-match alignment and the fewest
/// chunks (maximal runs adjacent in both sequences) any such alignment has.
pub fn meteor_alignment<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> (usize, usize) {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        positions.entry(w.as_ref()).or_default().push(j);
    }
    let options: Vec<Vec<usize>> = candidate
        .iter()
        .map(|w| positions.get(w.as_ref()).cloned().unwrap_or_default())
        .collect();
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in candidate {
        *cand_counts.entry(w.as_ref()).or_default() += 1;
    }
    let matches: usize = cand_counts
        .iter()
        .map(|(w, &c)| c.min(positions.get(w).map_or(0, Vec::len)))
        .sum();
    if matches == 0 {
        return (0, 0);
    }
    // Matchable words still available to the right of each position, per word.
    let mut search = ChunkSearch {
        options: &options,
        words: candidate.iter().map(AsRef::as_ref).collect(),
        used: vec![false; reference.len()],
        remaining: cand_counts
            .iter()
            .map(|(w, &c)| (*w, c.min(positions.get(w).map_or(0, Vec::len))))
            .collect(),
        cand_left: cand_counts,
        best: usize::MAX,
        nodes: 0,
    };
    search.visit(0, None, 0);
    (matches, search.best)
}

struct ChunkSearch<'a> {
    options: &'a [Vec<usize>],
    words: Vec<&'a str>,
    used: Vec<bool>,
    /// Matches each word still has to make.
    remaining: HashMap<&'a str, usize>,
    /// Occurrences of each word at or after the current position.
    cand_left: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn visit(&mut self, i: usize, prev_ref: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best {
            return;
        }
        if i == self.options.len() {
            self.best = chunks;
            return;
        }
        if self.nodes > METEOR_NODE_BUDGET && self.best != usize::MAX {
            return;
        }
        let w = self.words[i];
        let need = self.remaining.get(w).copied().unwrap_or(0);
        *self.cand_left.get_mut(w).expect("counted") -= 1;
        if need > 0 {
            // Prefer continuing the current chunk.
            let mut order: Vec<usize> = self.options[i].iter().copied().filter(|&j| !self.used[j]).collect();
            order.sort_by_key(|&j| (Some(j) != prev_ref.map(|p| p + 1), j));
            for j in order {
                let cont = prev_ref.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                *self.remaining.get_mut(w).expect("counted") -= 1;
                self.visit(i + 1, Some(j), chunks + usize::from(!cont));
                *self.remaining.get_mut(w).expect("counted") += 1;
                self.used[j] = false;
            }
        }
        // Skipping keeps the alignment maximal only if later copies can still
        // supply this word's remaining matches.
        if need <= self.cand_left[w] {
            self.visit(i + 1, None, chunks);
        }
        *self.cand_left.get_mut(w).expect("counted") += 1;
    }
}

/// Exact-match METEOR against the best reference:
/// `Fmean · (1 − γ (chunks/matches)^θ)` with `Fmean = PR / (αP + (1−α)R)`.
pub fn meteor<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let (m, chunks) = meteor_alignment(candidate, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / candidate.len() as f64;
            let rc = m as f64 / r.len() as f64;
            let fmean = p * rc / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rc);
            let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_THETA);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of n-grams of orders 1 to 4.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DfCorpus {
    documents: usize,
    df: [HashMap<String, usize>; MAX_ORDER],
}

impl DfCorpus {
    pub fn build<S: AsRef<str>>(documents: &[Vec<S>]) -> Result<Self, MetricsError> {
        if documents.is_empty() {
            return Err(MetricsError::NoDocuments);
        }
        let mut out = Self {
            documents: documents.len(),
            ..Default::default()
        };
        for doc in documents {
            for n in 1..=MAX_ORDER {
                for g in ngrams(doc, n).into_keys() {
                    *out.df[n - 1].entry(g).or_default() += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    /// Document frequency; unseen n-grams count as appearing once.
    pub fn df(&self, n: usize, gram: &str) -> usize {
        self.df[n - 1].get(gram).copied().unwrap_or(1).max(1)
    }

    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        (self.documents as f64 / self.df(n, gram) as f64).ln()
    }

    /// `#documents \t N`, then for each order a `#order \t n` line followed
    /// by sorted `ngram \t df` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#documents\t{}\n", self.documents);
        for (i, map) in self.df.iter().enumerate() {
            writeln!(out, "#order\t{}", i + 1).unwrap();
            let sorted: BTreeMap<_, _> = map.iter().collect();
            for (g, d) in sorted {
                writeln!(out, "{g}\t{d}").unwrap();
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, MetricsError> {
        let mut out = Self::default();
        let mut order = 0usize;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| MetricsError::Format { line: i + 1, msg };
            let (key, value) = line
                .rsplit_once('\t')
                .ok_or_else(|| err("expected key<TAB>value".into()))?;
            let value: usize = value.parse().map_err(|e| err(format!("bad count: {e}")))?;
            match key {
                "#documents" => out.documents = value,
                "#order" if (1..=MAX_ORDER).contains(&value) => order = value,
                _ if order == 0 || key.starts_with('#') => {
                    return Err(err(format!("unexpected line {line:?}")))
                }
                _ => {
                    if value == 0 || key.split(' ').count() != order {
                        return Err(err(format!("invalid entry {line:?}")));
                    }
                    out.df[order - 1].insert(key.to_string(), value);
                }
            }
        }
        if out.documents == 0 {
            return Err(MetricsError::NoDocuments);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

fn tfidf<S: AsRef<str>>(tokens: &[S], n: usize, df: &DfCorpus, masked: &HashSet<String>) -> HashMap<String, f64> {
    ngrams(tokens, n)
        .into_iter()
        .filter(|(g, _)| !masked.contains(g))
        .map(|(g, c)| {
            let w = c as f64 * df.idf(n, &g);
            (g, w)
        })
        .collect()
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn cider_masked<S: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<S>],
    df: &DfCorpus,
    title: &[S],
) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let masked: HashSet<String> = ngrams(title, n).into_keys().collect();
        let c = tfidf(candidate, n, df, &masked);
        let mean: f64 = references
            .iter()
            .map(|r| cosine(&c, &tfidf(r, n, df, &masked)))
            .sum::<f64>()
            / references.len() as f64;
        total += mean;
    }
    10.0 / MAX_ORDER as f64 * total
}

/// `(10/4) Σₙ mean_r cos(tfidfₙ(c), tfidfₙ(r))` with `idf = ln(N / df)`.
pub fn cider<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], df: &DfCorpus) -> f64 {
    cider_masked(candidate, references, df, &[])
}

/// CIDEr with every n-gram that occurs in the title removed from both the
/// candidate and reference vectors before the cosine.
pub fn cider_title<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], title: &[S], df: &DfCorpus) -> f64 {
    cider_masked(candidate, references, df, title)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu1,
    BleuSum,
    Bleu4,
    RougeL,
    Meteor,
    Cider,
    CiderTitle,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Bleu1,
        Metric::BleuSum,
        Metric::Bleu4,
        Metric::RougeL,
        Metric::Meteor,
        Metric::Cider,
        Metric::CiderTitle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu1 => "bleu_1",
            Metric::BleuSum => "bleu_sum",
            Metric::Bleu4 => "bleu_4",
            Metric::RougeL => "rouge_l",
            Metric::Meteor => "meteor",
            Metric::Cider => "cider",
            Metric::CiderTitle => "cider_title",
        }
    }

    /// Upper end of the metric's range.
    pub fn max(self) -> f64 {
        match self {
            Metric::BleuSum => 4.0,
            Metric::Cider | Metric::CiderTitle => 10.0,
            _ => 1.0,
        }
    }
}

/// All scores of one candidate sentence.
pub fn score_sentence<S: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<S>],
    title: &[S],
    df: &DfCorpus,
) -> BTreeMap<Metric, f64> {
    BTreeMap::from([
        (Metric::Bleu1, bleu(candidate, references, 1)),
        (Metric::BleuSum, bleu_sum(candidate, references)),
        (Metric::Bleu4, bleu(candidate, references, 4)),
        (
            Metric::RougeL,
            rouge_l(
                &candidate.iter().map(AsRef::as_ref).collect::<Vec<_>>(),
                &references
                    .iter()
                    .map(|r| r.iter().map(AsRef::as_ref).collect())
                    .collect::<Vec<_>>(),
            ),
        ),
        (Metric::Meteor, meteor(candidate, references)),
        (Metric::Cider, cider(candidate, references, df)),
        (Metric::CiderTitle, cider_title(candidate, references, title, df)),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    /// Share of scores per bin; sums to 1 when there is at least one score.
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn new(scores: &[f64], max: f64, bins: usize) -> Self {
        let edges = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &s in scores {
            let b = ((s / max) * bins as f64).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        let total = scores.len().max(1) as f64;
        Self {
            edges,
            masses: counts.into_iter().map(|c| c as f64 / total).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    pub mean: f64,
    pub scores: Vec<f64>,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub generations: usize,
    pub sentences: usize,
    pub unmatched_ids: Vec<String>,
    /// How the brevity penalty picks its reference length.
    pub brevity_penalty: String,
    /// `bleu_sum` adds cumulative BLEU-1..4; `bleu_4` is the conventional
    /// geometric-mean reading.
    pub bleu_sum_reading: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricReport {
    pub fn from_scores(
        generations: usize,
        unmatched_ids: Vec<String>,
        per_sentence: &[BTreeMap<Metric, f64>],
    ) -> Self {
        let metrics = Metric::ALL
            .iter()
            .map(|&m| {
                let scores: Vec<f64> = per_sentence.iter().map(|s| s[&m]).collect();
                let mean = if scores.is_empty() {
                    0.0
                } else {
                    scores.iter().sum::<f64>() / scores.len() as f64
                };
                let histogram = Histogram::new(&scores, m.max(), HISTOGRAM_BINS);
                (m.name().to_string(), MetricSummary { mean, scores, histogram })
            })
            .collect();
        Self {
            generations,
            sentences: per_sentence.len(),
            unmatched_ids,
            brevity_penalty: "closest_reference_length".into(),
            bleu_sum_reading: "sum of cumulative bleu_1..bleu_4; bleu_4 is the geometric-mean reading".into(),
            metrics,
        }
    }

    pub fn mean(&self, m: Metric) -> f64 {
        self.metrics[m.name()].mean
    }
}

/// The reference sentences and title of one test record, tokenized.
pub struct ReferenceSet {
    pub sentences: Vec<Vec<String>>,
    pub title: Vec<String>,
}

impl ReferenceSet {
    pub fn from_record(r: &AnnotatedRecord) -> Self {
        Self {
            sentences: r.sentence_texts().iter().map(|s| tokenize(s)).collect(),
            title: tokenize(&r.title_text()),
        }
    }
}

/// Matches generations to references by id. Returns, per matched
/// generation, its sentences paired with the reference set, plus the ids
/// that matched nothing.
pub fn pair_generations<'g>(
    generations: &'g [GenerationRecord],
    references: &[AnnotatedRecord],
) -> (Vec<(&'g GenerationRecord, ReferenceSet)>, Vec<String>) {
    let by_id: HashMap<&str, &AnnotatedRecord> = references.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for g in generations {
        match by_id.get(g.id.as_str()) {
            Some(r) => matched.push((g, ReferenceSet::from_record(r))),
            None => {
                log::warn!("generation {} has no reference record", g.id);
                unmatched.push(g.id.clone());
            }
        }
    }
    (matched, unmatched)
}

/// Scores every generated sentence against all sentences of its reference abstract.
pub fn evaluate(generations: &[GenerationRecord], references: &[AnnotatedRecord], df: &DfCorpus) -> MetricReport {
    let (matched, unmatched) = pair_generations(generations, references);
    let mut scores = Vec::new();
    for (g, refs) in &matched {
        for s in &g.sentences {
            scores.push(score_sentence(&tokenize(s), &refs.sentences, &refs.title, df));
        }
    }
    MetricReport::from_scores(generations.len(), unmatched, &scores)
}
