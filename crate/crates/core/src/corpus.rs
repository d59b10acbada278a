//! Annotated abstract records: ingestion, filtering, label alignment and
//! training windows.
//!
//! A record's training stream is `start`, the title, every sentence, `end`.
//! The title counts as the first sentence, so a window that starts there
//! also carries the start token and the model learns the continuation from a
//! title prompt to its abstract.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::condition_vocab::{ConditionError, ConditionVocab};
use crate::tokenizer::{TokenizerError, TokenizerModel, END_ID, START_ID};

/// Label reserved for special tokens and unknown tags in every label set.
pub const NO_LABEL: &str = "<none>";
pub const NO_LABEL_ID: u32 = 0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("window length must be at least 2, got {0}")]
    WindowLength(usize),
    #[error("record {id} has {subwords} subwords; at least 2 are needed")]
    TooShort { id: String, subwords: usize },
    #[error("cannot batch zero windows")]
    EmptyBatch,
    #[error("label file line {line}: {msg}")]
    LabelFormat { line: usize, msg: String },
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// One word with its part-of-speech, dependency and entity labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, String, String, String)", into = "(String, String, String, String)")]
pub struct AnnotatedToken {
    pub surface: String,
    pub pos: String,
    pub dep: String,
    pub ent: String,
}

impl From<(String, String, String, String)> for AnnotatedToken {
    fn from((surface, pos, dep, ent): (String, String, String, String)) -> Self {
        Self {
            surface: surface.to_lowercase(),
            pos,
            dep,
            ent,
        }
    }
}

impl From<AnnotatedToken> for (String, String, String, String) {
    fn from(t: AnnotatedToken) -> Self {
        (t.surface, t.pos, t.dep, t.ent)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub id: String,
    pub year: i32,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub title: Vec<AnnotatedToken>,
    pub sentences: Vec<Vec<AnnotatedToken>>,
}

impl AnnotatedRecord {
    fn tokens(&self) -> impl Iterator<Item = &AnnotatedToken> {
        self.title.iter().chain(self.sentences.iter().flatten())
    }

    pub fn title_text(&self) -> String {
        join_surfaces(&self.title)
    }

    /// Abstract sentences as space-joined surfaces.
    pub fn sentence_texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| join_surfaces(s)).collect()
    }

    pub fn abstract_text(&self) -> String {
        self.sentence_texts().join(" ")
    }
}

fn join_surfaces(tokens: &[AnnotatedToken]) -> String {
    tokens
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub records: Vec<AnnotatedRecord>,
    pub skipped: usize,
}

/// Parses line-delimited records, skipping (and counting) malformed lines.
pub fn parse_records(reader: impl BufRead) -> Result<LoadReport, std::io::Error> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotatedRecord>(&line) {
            Ok(r) if r.tokens().all(|t| !t.surface.trim().is_empty()) => report.records.push(r),
            Ok(r) => {
                log::warn!("line {}: record {} has an empty surface; skipped", i + 1, r.id);
                report.skipped += 1;
            }
            Err(e) => {
                log::warn!("line {}: malformed record skipped: {e}", i + 1);
                report.skipped += 1;
            }
        }
    }
    Ok(report)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<LoadReport, CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    parse_records(std::io::BufReader::new(file)).map_err(io)
}

pub fn write_records<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a AnnotatedRecord>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Position of a document id in `[0, 1)` under the given seed.
pub fn split_key(id: &str, seed: u64) -> f64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    let head: [u8; 8] = digest[..8].try_into().expect("digest is 32 bytes");
    u64::from_be_bytes(head) as f64 / 18_446_744_073_709_551_616.0
}

/// Drops records without abstract sentences, then assigns each remaining
/// record to train when its seeded id hash falls below `train_fraction`.
pub fn filter_and_split(
    records: Vec<AnnotatedRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedRecord>, Vec<AnnotatedRecord>), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::Fraction(train_fraction));
    }
    Ok(records
        .into_iter()
        .filter(|r| r.sentences.iter().any(|s| !s.is_empty()))
        .partition(|r| split_key(&r.id, seed) < train_fraction))
}

/// A closed set of labels with [`NO_LABEL`] at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        let mut all = vec![NO_LABEL.to_string()];
        for l in labels {
            let l = l.into();
            if !all.contains(&l) {
                all.push(l);
            }
        }
        let index = all.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect();
        Self { labels: all, index }
    }

    /// Unknown labels map to [`NO_LABEL_ID`].
    pub fn id(&self, label: &str) -> u32 {
        self.index.get(label).copied().unwrap_or(NO_LABEL_ID)
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Part-of-speech, dependency and entity label sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabs {
    pub pos: LabelSet,
    pub dep: LabelSet,
    pub ent: LabelSet,
}

impl LabelVocabs {
    pub fn build(records: &[AnnotatedRecord]) -> Self {
        let mut pos = BTreeSet::new();
        let mut dep = BTreeSet::new();
        let mut ent = BTreeSet::new();
        for t in records.iter().flat_map(AnnotatedRecord::tokens) {
            pos.insert(t.pos.as_str());
            dep.insert(t.dep.as_str());
            ent.insert(t.ent.as_str());
        }
        Self {
            pos: LabelSet::new(pos),
            dep: LabelSet::new(dep),
            ent: LabelSet::new(ent),
        }
    }

    fn tasks(&self) -> [(&'static str, &LabelSet); 3] {
        [("pos", &self.pos), ("dep", &self.dep), ("ent", &self.ent)]
    }

    /// TSV lines of `task \t label \t id`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (task, set) in self.tasks() {
            for (i, l) in set.labels.iter().enumerate() {
                writeln!(out, "{task}\t{l}\t{i}").unwrap();
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut sets: HashMap<&str, Vec<String>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| CorpusError::LabelFormat { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            let [task, label, id] = fields[..] else {
                return Err(err("expected task<TAB>label<TAB>id".into()));
            };
            let id: usize = id.parse().map_err(|e| err(format!("bad id: {e}")))?;
            let list = match task {
                "pos" | "dep" | "ent" => sets.entry(task).or_default(),
                _ => return Err(err(format!("unknown task {task:?}"))),
            };
            if id != list.len() || (id == 0) != (label == NO_LABEL) {
                return Err(err(format!("label {label:?} has unexpected id {id}")));
            }
            list.push(label.to_string());
        }
        let mut take = |task: &str| LabelSet::new(sets.remove(task).unwrap_or_default().into_iter().skip(1));
        Ok(Self {
            pos: take("pos"),
            dep: take("dep"),
            ent: take("ent"),
        })
    }
}

/// How words are split into subwords when building training streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segmentation {
    Viterbi,
    Sampled { temperature: f64 },
}

/// A record's full subword stream with inherited labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedStream {
    pub ids: Vec<u32>,
    pub pos: Vec<u32>,
    pub dep: Vec<u32>,
    pub ent: Vec<u32>,
    /// Index of the first subword of the title and of every sentence.
    pub sentence_starts: Vec<usize>,
}

impl AlignedStream {
    fn push(&mut self, id: u32, pos: u32, dep: u32, ent: u32) {
        self.ids.push(id);
        self.pos.push(pos);
        self.dep.push(dep);
        self.ent.push(ent);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes each word separately; every subword inherits its word's labels
/// and the start and end tokens carry [`NO_LABEL_ID`].
pub fn align_labels<R: Rng + ?Sized>(
    record: &AnnotatedRecord,
    tok: &TokenizerModel,
    labels: &LabelVocabs,
    segmentation: Segmentation,
    rng: &mut R,
) -> Result<AlignedStream, CorpusError> {
    let mut out = AlignedStream {
        ids: Vec::new(),
        pos: Vec::new(),
        dep: Vec::new(),
        ent: Vec::new(),
        sentence_starts: Vec::new(),
    };
    out.push(START_ID, NO_LABEL_ID, NO_LABEL_ID, NO_LABEL_ID);
    for sentence in std::iter::once(&record.title).chain(&record.sentences) {
        let before = out.len();
        for word in sentence {
            let pieces = match segmentation {
                Segmentation::Viterbi => tok.encode_viterbi(&word.surface),
                Segmentation::Sampled { temperature } => {
                    tok.encode_sampled(&word.surface, temperature, rng)?
                }
            };
            let (p, d, e) = (
                labels.pos.id(&word.pos),
                labels.dep.id(&word.dep),
                labels.ent.id(&word.ent),
            );
            for id in pieces {
                out.push(id, p, d, e);
            }
        }
        if out.len() > before {
            out.sentence_starts.push(before);
        }
    }
    out.push(END_ID, NO_LABEL_ID, NO_LABEL_ID, NO_LABEL_ID);
    Ok(out)
}

/// One training sample: inputs and next-position targets of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingWindow {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub target_pos: Vec<u32>,
    pub target_dep: Vec<u32>,
    pub target_ent: Vec<u32>,
    pub condition_ids: Vec<u32>,
    /// Offset of `input_ids[0]` in the record's stream.
    pub start: usize,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Cuts the window of at most `n` inputs that begins at sentence `k` of the
/// stream. The first sentence's window also includes the start token.
pub fn window_at(stream: &AlignedStream, k: usize, n: usize, condition_ids: Vec<u32>) -> TrainingWindow {
    let start = if k == 0 { 0 } else { stream.sentence_starts[k] };
    let end = (start + n + 1).min(stream.len());
    let shifted = |v: &[u32]| v[start + 1..end].to_vec();
    TrainingWindow {
        input_ids: stream.ids[start..end - 1].to_vec(),
        target_ids: shifted(&stream.ids),
        target_pos: shifted(&stream.pos),
        target_dep: shifted(&stream.dep),
        target_ent: shifted(&stream.ent),
        condition_ids,
        start,
    }
}

/// Everything needed to turn records into windows.
#[derive(Clone, Copy)]
pub struct WindowContext<'a> {
    pub tokenizer: &'a TokenizerModel,
    pub labels: &'a LabelVocabs,
    pub conditions: &'a ConditionVocab,
    pub n: usize,
    pub segmentation: Segmentation,
}

/// Tokenizes the record and picks a sentence start uniformly at random.
pub fn sample_window<R: Rng + ?Sized>(
    record: &AnnotatedRecord,
    ctx: &WindowContext<'_>,
    rng: &mut R,
) -> Result<TrainingWindow, CorpusError> {
    if ctx.n < 2 {
        return Err(CorpusError::WindowLength(ctx.n));
    }
    let stream = align_labels(record, ctx.tokenizer, ctx.labels, ctx.segmentation, rng)?;
    let content = stream.len() - 2;
    if content < 2 {
        return Err(CorpusError::TooShort {
            id: record.id.clone(),
            subwords: content,
        });
    }
    let conditions = ctx.conditions.lookup(record.year, &record.keywords)?;
    let k = rng.random_range(0..stream.sentence_starts.len());
    Ok(window_at(&stream, k, ctx.n, conditions))
}

/// Right-padded, row-major batch of windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub target_pos: Vec<u32>,
    pub target_dep: Vec<u32>,
    pub target_ent: Vec<u32>,
    /// `true` at real positions.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub condition_ids: Vec<Vec<u32>>,
}

pub fn build_batch(windows: &[TrainingWindow], pad_id: u32) -> Result<Batch, CorpusError> {
    let seq_len = windows.iter().map(TrainingWindow::len).max().ok_or(CorpusError::EmptyBatch)?;
    let mut batch = Batch {
        batch_size: windows.len(),
        seq_len,
        input_ids: Vec::with_capacity(windows.len() * seq_len),
        target_ids: Vec::new(),
        target_pos: Vec::new(),
        target_dep: Vec::new(),
        target_ent: Vec::new(),
        mask: Vec::new(),
        lengths: Vec::new(),
        condition_ids: Vec::new(),
    };
    for w in windows {
        let pad = seq_len - w.len();
        let fill = |dst: &mut Vec<u32>, src: &[u32], with: u32| {
            dst.extend_from_slice(src);
            dst.extend(std::iter::repeat_n(with, pad));
        };
        fill(&mut batch.input_ids, &w.input_ids, pad_id);
        fill(&mut batch.target_ids, &w.target_ids, pad_id);
        fill(&mut batch.target_pos, &w.target_pos, NO_LABEL_ID);
        fill(&mut batch.target_dep, &w.target_dep, NO_LABEL_ID);
        fill(&mut batch.target_ent, &w.target_ent, NO_LABEL_ID);
        batch.mask.extend((0..seq_len).map(|i| i < w.len()));
        batch.lengths.push(w.len());
        batch.condition_ids.push(w.condition_ids.clone());
    }
    Ok(batch)
}

/// Sentences used to train the tokenizer: each title and abstract sentence.
pub fn tokenizer_sentences(records: &[AnnotatedRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| std::iter::once(r.title_text()).chain(r.sentence_texts()))
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn word(s: &str, ent: &str) -> AnnotatedToken {
        AnnotatedToken {
            surface: s.into(),
            pos: "NOUN".into(),
            dep: "nsubj".into(),
            ent: ent.into(),
        }
    }

    fn record(id: &str, title: &[&str], sentences: &[&[&str]]) -> AnnotatedRecord {
        AnnotatedRecord {
            id: id.into(),
            year: 2000,
            keywords: vec![],
            title: title.iter().map(|w| word(w, "O")).collect(),
            sentences: sentences
                .iter()
                .map(|s| s.iter().map(|w| word(w, "O")).collect())
                .collect(),
        }
    }

    fn char_tokenizer() -> TokenizerModel {
        let mut pieces: Vec<(String, f64)> = ('a'..='z').map(|c| (c.to_string(), -3.0)).collect();
        pieces.push((crate::tokenizer::WORD_MARKER.to_string(), -3.0));
        pieces.push(("▁nano".into(), -1.0));
        pieces.push(("particle".into(), -1.0));
        TokenizerModel::from_pieces(pieces)
    }

    #[test]
    fn load_counts_skips() {
        let good = r#"{"id":"a","year":2000,"keywords":[],"title":[["T","NN","root","O"]],"sentences":[[["x","NN","root","O"]]]}"#;
        let text = format!("{good}\n{good}\n{}\n", &good[..good.len() - 9]);
        let r = parse_records(text.as_bytes()).unwrap();
        assert_eq!((r.records.len(), r.skipped), (2, 1));
        assert_eq!(r.records[0].title[0].surface, "t");
        let empty = parse_records("".as_bytes()).unwrap();
        assert_eq!((empty.records.len(), empty.skipped), (0, 0));
        assert!(load_records("/nonexistent/records.jsonl").is_err());
    }

    #[test]
    fn split_matches_hash_oracle() {
        let records: Vec<_> = (0..1000).map(|i| record(&format!("doc-{i}"), &["t"], &[&["w"]])).collect();
        let (train, test) = filter_and_split(records.clone(), 0.7, 42).unwrap();
        // Count from an independent hashlib implementation of the same rule.
        assert_eq!(train.len(), 689);
        assert_eq!(train.len() + test.len(), 1000);
        let first: Vec<&str> = train.iter().take(8).map(|r| r.id.as_str()).collect();
        assert_eq!(first, ["doc-0", "doc-2", "doc-3", "doc-4", "doc-5", "doc-6", "doc-8", "doc-9"]);
        let (again, _) = filter_and_split(records, 0.7, 42).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn split_drops_sentenceless_and_checks_fraction() {
        let records = vec![record("a", &["t"], &[]), record("b", &["t"], &[&["w"]])];
        let (train, test) = filter_and_split(records.clone(), 0.5, 0).unwrap();
        assert_eq!(train.len() + test.len(), 1);
        assert!(filter_and_split(records.clone(), 1.0, 0).is_err());
        assert!(filter_and_split(records, 0.0, 0).is_err());
    }

    #[test]
    fn subwords_inherit_word_labels() {
        let tok = char_tokenizer();
        let mut r = record("a", &["x"], &[&["nanoparticles"]]);
        r.sentences[0][0].ent = "Simple_chemical".into();
        let labels = LabelVocabs::build(std::slice::from_ref(&r));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = align_labels(&r, &tok, &labels, Segmentation::Viterbi, &mut rng).unwrap();
        let chem = labels.ent.id("Simple_chemical");
        assert_ne!(chem, NO_LABEL_ID);
        let word_pieces = &s.ent[s.sentence_starts[1]..s.len() - 1];
        assert_eq!(word_pieces.len(), 3);
        assert!(word_pieces.iter().all(|&e| e == chem));
        assert_eq!((s.ids[0], s.pos[0], s.ent[0]), (START_ID, NO_LABEL_ID, NO_LABEL_ID));
        assert_eq!(*s.ids.last().unwrap(), END_ID);
    }

    #[test]
    fn ten_subword_document_window() {
        // Title of 4 single-letter words, sentence of 6: ten subwords when
        // every word is one piece.
        let tok = TokenizerModel::from_pieces((b'a'..=b'j').map(|c| (format!("▁{}", c as char), -1.0)));
        let r = record("d", &["a", "b", "c", "d"], &[&["e", "f", "g", "h", "i", "j"]]);
        let labels = LabelVocabs::build(std::slice::from_ref(&r));
        let cv = ConditionVocab::build(std::slice::from_ref(&r), 1, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = align_labels(&r, &tok, &labels, Segmentation::Viterbi, &mut rng).unwrap();
        assert_eq!(s.len(), 12);
        let w = window_at(&s, 0, 128, vec![0]);
        assert_eq!(w.len(), 11);
        assert_eq!(w.target_ids.len(), 11);
        assert_eq!(w.input_ids[0], START_ID);
        assert_eq!(*w.target_ids.last().unwrap(), END_ID);
        for i in 0..w.len() {
            assert_eq!(w.target_ids[i], s.ids[w.start + i + 1]);
        }
        let w = window_at(&s, 1, 3, vec![0]);
        assert_eq!(w.input_ids, &s.ids[5..8]);
        assert_eq!(w.target_ids, &s.ids[6..9]);

        let ctx = WindowContext {
            tokenizer: &tok,
            labels: &labels,
            conditions: &cv,
            n: 128,
            segmentation: Segmentation::Viterbi,
        };
        let starts: BTreeSet<usize> = (0..50)
            .map(|_| sample_window(&r, &ctx, &mut rng).unwrap().start)
            .collect();
        assert_eq!(starts, BTreeSet::from([0, 5]));
        assert_eq!(sample_window(&r, &ctx, &mut rng).unwrap().condition_ids, vec![0]);
    }

    #[test]
    fn short_record_is_rejected() {
        let tok = TokenizerModel::from_pieces([("▁a", -1.0)]);
        let r = record("s", &[], &[&["a"]]);
        let labels = LabelVocabs::build(std::slice::from_ref(&r));
        let cv = ConditionVocab::build(std::slice::from_ref(&r), 1, None).unwrap();
        let ctx = WindowContext {
            tokenizer: &tok,
            labels: &labels,
            conditions: &cv,
            n: 8,
            segmentation: Segmentation::Viterbi,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_window(&r, &ctx, &mut rng),
            Err(CorpusError::TooShort { subwords: 1, .. })
        ));
    }

    fn window(len: usize) -> TrainingWindow {
        TrainingWindow {
            input_ids: vec![7; len],
            target_ids: vec![8; len],
            target_pos: vec![1; len],
            target_dep: vec![1; len],
            target_ent: vec![1; len],
            condition_ids: vec![0],
            start: 0,
        }
    }

    #[test]
    fn batch_padding() {
        let b = build_batch(&[window(5), window(8)], PAD_ID).unwrap();
        assert_eq!((b.batch_size, b.seq_len), (2, 8));
        assert_eq!(b.mask.iter().filter(|m| !**m).count(), 3);
        assert_eq!(b.input_ids[5], PAD_ID);
        let b = build_batch(&[window(4)], PAD_ID).unwrap();
        assert!(b.mask.iter().all(|&m| m));
        let b = build_batch(&[window(4), window(4)], PAD_ID).unwrap();
        assert!(b.mask.iter().all(|&m| m));
        assert!(matches!(build_batch(&[], PAD_ID), Err(CorpusError::EmptyBatch)));
    }

    #[test]
    fn label_tsv_round_trip() {
        let r = record("a", &["x"], &[&["y"]]);
        let labels = LabelVocabs::build(&[r]);
        assert_eq!(LabelVocabs::from_tsv(&labels.to_tsv()).unwrap(), labels);
        assert_eq!(labels.pos.len(), 2);
        assert_eq!(labels.pos.id("unseen"), NO_LABEL_ID);
        assert!(LabelVocabs::from_tsv("pos\tNOUN\t0\n").is_err());
    }
}
