//! Unigram subword model: training by EM with iterative pruning, Viterbi
//! and sampled segmentation, and a plain-text model file.
//!
//! Text is lowercased and split on whitespace; every word is segmented on its
//! own, prefixed with [`WORD_MARKER`], so pieces never straddle two words.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Prefix marking word-initial pieces; decodes to a space.
pub const WORD_MARKER: char = '\u{2581}';
pub const FORMAT_VERSION: u32 = 1;

pub const START_ID: u32 = 0;
pub const END_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNKNOWN_ID: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

const SPECIAL_NAMES: [&str; 4] = ["start", "end", "pad", "unknown"];

/// Vocabulary size used for full-corpus runs.
pub const DEFAULT_VOCAB_SIZE: usize = 16_000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary size {requested} is smaller than the alphabet ({alphabet} characters)")]
    VocabTooSmall { requested: usize, alphabet: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("tokenizer file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ids of the reserved tokens. They precede every piece id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: u32,
    pub end: u32,
    pub pad: u32,
    pub unknown: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            start: START_ID,
            end: END_ID,
            pad: PAD_ID,
            unknown: UNKNOWN_ID,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    pieces: Vec<String>,
    log_probs: Vec<f64>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    unknown_score: f64,
}

#[derive(Clone, Copy)]
struct Edge {
    start: usize,
    end: usize,
    id: u32,
    score: f64,
}

impl TokenizerModel {
    /// Builds a model from explicit `(piece, log_prob)` pairs, in id order.
    pub fn from_pieces<S: Into<String>>(pieces: impl IntoIterator<Item = (S, f64)>) -> Self {
        let (pieces, log_probs): (Vec<String>, Vec<f64>) =
            pieces.into_iter().map(|(p, s)| (p.into(), s)).unzip();
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32 + NUM_SPECIALS))
            .collect();
        let max_piece_chars = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        let min = log_probs.iter().copied().fold(0.0f64, f64::min);
        Self {
            pieces,
            log_probs,
            index,
            max_piece_chars,
            unknown_score: min - 10.0,
        }
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::default()
    }

    /// Total id count, specials included.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + NUM_SPECIALS as usize
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// The piece string for a regular id, `None` for specials and out-of-range ids.
    pub fn piece(&self, id: u32) -> Option<&str> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.pieces.get(i as usize))
            .map(String::as_str)
    }

    pub fn log_prob(&self, id: u32) -> Option<f64> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.log_probs.get(i as usize))
            .copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIALS
    }

    fn edges(&self, word: &str) -> (usize, Vec<Edge>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut edges = Vec::new();
        for s in 0..n {
            let mut has_single = false;
            for e in s + 1..=(s + self.max_piece_chars).min(n) {
                if let Some(&id) = self.index.get(&word[bounds[s]..bounds[e]]) {
                    has_single |= e == s + 1;
                    edges.push(Edge {
                        start: s,
                        end: e,
                        id,
                        score: self.log_probs[(id - NUM_SPECIALS) as usize],
                    });
                }
            }
            if !has_single {
                edges.push(Edge {
                    start: s,
                    end: s + 1,
                    id: UNKNOWN_ID,
                    score: self.unknown_score,
                });
            }
        }
        (n, edges)
    }

    /// Highest-scoring segmentation of a raw string (no marker is added).
    pub fn viterbi_segment(&self, word: &str) -> Vec<u32> {
        let (n, edges) = self.edges(word);
        viterbi_over(n, &edges).1
    }

    /// Draws a segmentation with probability proportional to
    /// `exp(score / temperature)` by forward filtering, backward sampling.
    pub fn sample_segment<R: Rng + ?Sized>(
        &self,
        word: &str,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<u32>, TokenizerError> {
        if !(temperature > 0.0) {
            return Err(TokenizerError::Temperature(temperature));
        }
        let (n, edges) = self.edges(word);
        let mut ending: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (i, e) in edges.iter().enumerate() {
            ending[e.end].push(i);
        }
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for pos in 1..=n {
            alpha[pos] = log_sum_exp(
                ending[pos]
                    .iter()
                    .map(|&i| alpha[edges[i].start] + edges[i].score / temperature),
            );
        }
        let mut out = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let weights: Vec<f64> = ending[pos]
                .iter()
                .map(|&i| (alpha[edges[i].start] + edges[i].score / temperature - alpha[pos]).exp())
                .collect();
            let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
            let mut chosen = *ending[pos].last().expect("lattice is connected");
            for (&i, &w) in ending[pos].iter().zip(&weights) {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            out.push(edges[chosen].id);
            pos = edges[chosen].start;
        }
        out.reverse();
        Ok(out)
    }

    /// Sum of piece log-probabilities of a segmentation.
    pub fn score(&self, ids: &[u32]) -> f64 {
        ids.iter()
            .map(|&id| self.log_prob(id).unwrap_or(self.unknown_score))
            .sum()
    }

    fn marked_words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split_whitespace().map(|w| {
            let mut s = String::with_capacity(w.len() + 3);
            s.push(WORD_MARKER);
            s.extend(w.chars().flat_map(char::to_lowercase));
            s
        })
    }

    /// Deterministic encoding: each lowercased word segmented by Viterbi.
    pub fn encode_viterbi(&self, text: &str) -> Vec<u32> {
        Self::marked_words(text)
            .flat_map(|w| self.viterbi_segment(&w))
            .collect()
    }

    /// Subword-regularised encoding: each word's segmentation is sampled.
    pub fn encode_sampled<R: Rng + ?Sized>(
        &self,
        text: &str,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<u32>, TokenizerError> {
        let mut out = Vec::new();
        for w in Self::marked_words(text) {
            out.extend(self.sample_segment(&w, temperature, rng)?);
        }
        Ok(out)
    }

    /// Concatenates pieces and restores spaces from word markers. Special and
    /// out-of-range ids decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let joined: String = ids.iter().filter_map(|&id| self.piece(id)).collect();
        let spaced = joined.replace(WORD_MARKER, " ");
        spaced.strip_prefix(' ').unwrap_or(&spaced).to_string()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version\t{FORMAT_VERSION}").unwrap();
        for (name, id) in SPECIAL_NAMES.iter().zip(0..NUM_SPECIALS) {
            writeln!(out, "special\t{name}\t{id}").unwrap();
        }
        for (p, s) in self.pieces.iter().zip(&self.log_probs) {
            writeln!(out, "{p}\t{s:?}").unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: String| TokenizerError::Format { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == format!("version\t{FORMAT_VERSION}") => {}
            Some((i, l)) => return Err(err(i + 1, format!("unsupported version line {l:?}"))),
            None => return Err(err(1, "empty file".into())),
        }
        for (name, id) in SPECIAL_NAMES.iter().zip(0..NUM_SPECIALS) {
            let expected = format!("special\t{name}\t{id}");
            match lines.next() {
                Some((_, l)) if l == expected => {}
                Some((i, l)) => return Err(err(i + 1, format!("expected {expected:?}, found {l:?}"))),
                None => return Err(err(0, "truncated special-token header".into())),
            }
        }
        let mut pieces = Vec::new();
        let mut seen = HashSet::new();
        for (i, l) in lines {
            let (piece, score) = l
                .split_once('\t')
                .ok_or_else(|| err(i + 1, "expected piece<TAB>log_prob".into()))?;
            let score: f64 = score
                .parse()
                .map_err(|e| err(i + 1, format!("bad log-probability: {e}")))?;
            if piece.is_empty() || !score.is_finite() || score > 0.0 {
                return Err(err(i + 1, format!("invalid entry {piece:?} {score}")));
            }
            if !seen.insert(piece.to_string()) {
                return Err(err(i + 1, format!("duplicate piece {piece:?}")));
            }
            pieces.push((piece.to_string(), score));
        }
        Ok(Self::from_pieces(pieces))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn viterbi_over(n: usize, edges: &[Edge]) -> (f64, Vec<u32>) {
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    let mut back: Vec<Option<usize>> = vec![None; n + 1];
    best[0] = 0.0;
    // Edges are grouped by start position in increasing order.
    for (i, e) in edges.iter().enumerate() {
        let cand = best[e.start] + e.score;
        if cand > best[e.end] {
            best[e.end] = cand;
            back[e.end] = Some(i);
        }
    }
    let mut ids = Vec::new();
    let mut pos = n;
    while pos > 0 {
        let Some(i) = back[pos] else {
            return (f64::NEG_INFINITY, Vec::new());
        };
        ids.push(edges[i].id);
        pos = edges[i].start;
    }
    ids.reverse();
    (best[n], ids)
}

#[derive(Clone, Debug)]
pub struct UnigramTrainerConfig {
    /// Number of regular pieces to keep; specials are added on top.
    pub vocab_size: usize,
    pub max_piece_chars: usize,
    pub min_seed_frequency: u64,
    pub max_seed_pieces: usize,
    /// Fraction of prunable pieces removed per outer iteration.
    pub shrink_fraction: f64,
    pub em_iterations: usize,
    /// Train on a seeded random sample of this many sentences.
    pub sample_sentences: Option<usize>,
    pub seed: u64,
}

impl Default for UnigramTrainerConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_piece_chars: 6,
            min_seed_frequency: 2,
            max_seed_pieces: 1_000_000,
            shrink_fraction: 0.2,
            em_iterations: 2,
            sample_sentences: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    /// Corpus log-likelihood before each EM iteration, grouped by pruning round.
    pub log_likelihoods: Vec<Vec<f64>>,
    pub seed_pieces: usize,
    pub alphabet: usize,
}

struct Word {
    text: String,
    count: f64,
}

/// Trains a unigram model on the given sentences.
pub fn train_unigram<S: AsRef<str>>(
    sentences: &[S],
    config: &UnigramTrainerConfig,
) -> Result<(TokenizerModel, TrainingReport), TokenizerError> {
    let mut chosen: Vec<&str> = sentences.iter().map(AsRef::as_ref).collect();
    if let Some(n) = config.sample_sentences {
        if n < chosen.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            chosen.shuffle(&mut rng);
            chosen.truncate(n);
        }
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for s in &chosen {
        for w in TokenizerModel::marked_words(s) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<Word> = counts
        .into_iter()
        .map(|(text, c)| Word {
            text,
            count: c as f64,
        })
        .collect();
    words.sort_by(|a, b| a.text.cmp(&b.text));

    let mut char_freq: HashMap<String, f64> = HashMap::new();
    let mut sub_freq: HashMap<String, u64> = HashMap::new();
    for w in &words {
        let chars: Vec<char> = w.text.chars().collect();
        for s in 0..chars.len() {
            *char_freq.entry(chars[s].to_string()).or_default() += w.count;
            for e in s + 2..=(s + config.max_piece_chars).min(chars.len()) {
                *sub_freq.entry(chars[s..e].iter().collect()).or_default() += w.count as u64;
            }
        }
    }
    let alphabet = char_freq.len();
    if config.vocab_size < alphabet {
        return Err(TokenizerError::VocabTooSmall {
            requested: config.vocab_size,
            alphabet,
        });
    }
    let mut seed: Vec<(String, f64)> = sub_freq
        .into_iter()
        .filter(|(_, f)| *f >= config.min_seed_frequency)
        .map(|(s, f)| (s, f as f64))
        .collect();
    seed.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    seed.truncate(config.max_seed_pieces);
    let mut chars: Vec<(String, f64)> = char_freq.into_iter().collect();
    chars.sort_by(|a, b| a.0.cmp(&b.0));
    let required: HashSet<String> = chars.iter().map(|(c, _)| c.clone()).collect();
    seed.extend(chars);

    let total: f64 = seed.iter().map(|(_, f)| f).sum();
    let mut state: Vec<(String, f64)> = seed
        .into_iter()
        .map(|(p, f)| (p, (f / total).ln()))
        .collect();
    let mut report = TrainingReport {
        seed_pieces: state.len(),
        alphabet,
        ..Default::default()
    };

    loop {
        let mut round = Vec::with_capacity(config.em_iterations);
        for _ in 0..config.em_iterations {
            let model = TokenizerModel::from_pieces(state.iter().cloned());
            let (expected, loglik) = expectation(&model, &words);
            round.push(loglik);
            state = maximization(&model, &expected, &required);
        }
        report.log_likelihoods.push(round);
        if state.len() <= config.vocab_size {
            break;
        }
        state = prune(state, &words, &required, config);
    }

    state.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok((TokenizerModel::from_pieces(state), report))
}

/// Expected piece counts under the lattice posterior, and the corpus log-likelihood.
fn expectation(model: &TokenizerModel, words: &[Word]) -> (Vec<f64>, f64) {
    let mut expected = vec![0.0; model.num_pieces()];
    let mut loglik = 0.0;
    for w in words {
        let (n, edges) = model.edges(&w.text);
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        beta[n] = 0.0;
        let mut ending: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        let mut starting: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (i, e) in edges.iter().enumerate() {
            ending[e.end].push(i);
            starting[e.start].push(i);
        }
        for pos in 1..=n {
            alpha[pos] = log_sum_exp(
                ending[pos]
                    .iter()
                    .map(|&i| alpha[edges[i].start] + edges[i].score),
            );
        }
        for pos in (0..n).rev() {
            beta[pos] = log_sum_exp(
                starting[pos]
                    .iter()
                    .map(|&i| edges[i].score + beta[edges[i].end]),
            );
        }
        let z = alpha[n];
        loglik += w.count * z;
        for e in &edges {
            if e.id < NUM_SPECIALS {
                continue;
            }
            let post = (alpha[e.start] + e.score + beta[e.end] - z).exp();
            expected[(e.id - NUM_SPECIALS) as usize] += w.count * post;
        }
    }
    (expected, loglik)
}

/// Maximum-likelihood re-estimation. Pieces with no expected mass are dropped
/// unless they are single characters, which keep a small floor probability.
fn maximization(
    model: &TokenizerModel,
    expected: &[f64],
    required: &HashSet<String>,
) -> Vec<(String, f64)> {
    let total: f64 = expected.iter().sum();
    let floor = (1e-3 / total).ln();
    model
        .pieces
        .iter()
        .zip(expected)
        .filter_map(|(p, &c)| {
            if c > 1e-12 {
                Some((p.clone(), (c / total).ln()))
            } else if required.contains(p) {
                Some((p.clone(), floor))
            } else {
                None
            }
        })
        .collect()
}

/// Removes the lowest-contribution pieces: a piece's contribution is its
/// Viterbi frequency times the log-probability lost by replacing it with the
/// best segmentation of its own string that avoids it.
fn prune(
    state: Vec<(String, f64)>,
    words: &[Word],
    required: &HashSet<String>,
    config: &UnigramTrainerConfig,
) -> Vec<(String, f64)> {
    let model = TokenizerModel::from_pieces(state.iter().cloned());
    let mut freq = vec![0.0; model.num_pieces()];
    for w in words {
        for id in model.viterbi_segment(&w.text) {
            if id >= NUM_SPECIALS {
                freq[(id - NUM_SPECIALS) as usize] += w.count;
            }
        }
    }
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, (piece, logp)) in state.iter().enumerate() {
        if required.contains(piece) {
            continue;
        }
        let loss = if freq[i] == 0.0 {
            0.0
        } else {
            let (n, edges) = model.edges(piece);
            let own = i as u32 + NUM_SPECIALS;
            let alt: Vec<Edge> = edges.into_iter().filter(|e| e.id != own).collect();
            let (alt_score, _) = viterbi_over(n, &alt);
            freq[i] * (logp - alt_score)
        };
        scored.push((loss, i));
    }
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| state[a.1].0.cmp(&state[b.1].0))
    });
    let excess = state.len() - config.vocab_size;
    let remove = ((scored.len() as f64 * config.shrink_fraction).ceil() as usize)
        .max(1)
        .min(excess);
    let dropped: HashSet<usize> = scored.iter().take(remove).map(|&(_, i)| i).collect();
    state
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, p)| p)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TokenizerModel {
        TokenizerModel::from_pieces([("a", -1.0), ("b", -1.0), ("ab", -1.5)])
    }

    #[test]
    fn viterbi_prefers_whole_piece() {
        let t = toy();
        assert_eq!(t.viterbi_segment("ab"), vec![t.piece_id("ab").unwrap()]);
        assert_eq!(t.viterbi_segment("a"), vec![t.piece_id("a").unwrap()]);
        assert!(t.viterbi_segment("").is_empty());
        assert!(t.encode_viterbi("").is_empty());
    }

    #[test]
    fn unknown_characters_map_to_unknown() {
        let t = toy();
        let ids = t.viterbi_segment("azb");
        assert_eq!(ids, vec![t.piece_id("a").unwrap(), UNKNOWN_ID, t.piece_id("b").unwrap()]);
    }

    #[test]
    fn sampling_rejects_bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(toy().sample_segment("ab", 0.0, &mut rng).is_err());
        assert!(toy().sample_segment("ab", f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn low_temperature_recovers_viterbi() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            assert_eq!(t.sample_segment("abab", 1e-4, &mut rng).unwrap(), t.viterbi_segment("abab"));
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let t = toy();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| t.sample_segment("ababab", 1.0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn decode_cases() {
        let (t, _) = train_unigram(
            &["protein binding", "protein folding", "binding site"],
            &UnigramTrainerConfig {
                vocab_size: 40,
                ..Default::default()
            },
        )
        .unwrap();
        let ids = t.encode_viterbi("protein binding");
        assert_eq!(t.decode(&ids), "protein binding");
        let mut framed = vec![START_ID];
        framed.extend(&ids);
        framed.push(END_ID);
        assert_eq!(t.decode(&framed), "protein binding");
        assert_eq!(t.decode(&[]), "");
        assert_eq!(t.encode_viterbi("Protein"), t.encode_viterbi("protein"));
    }

    #[test]
    fn small_corpus_keeps_characters() {
        let (t, _) = train_unigram(
            &["abab abab"],
            &UnigramTrainerConfig {
                vocab_size: 6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(t.piece_id("a").is_some());
        assert!(t.piece_id("b").is_some());
        assert!(t.piece_id(&WORD_MARKER.to_string()).is_some());
        assert!(t.num_pieces() <= 6);
    }

    #[test]
    fn vocab_smaller_than_alphabet_is_rejected() {
        let err = train_unigram(
            &["abc def"],
            &UnigramTrainerConfig {
                vocab_size: 3,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { alphabet: 7, .. }));
        assert!(matches!(
            train_unigram::<&str>(&[], &UnigramTrainerConfig::default()),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn tsv_round_trip_and_validation() {
        let t = toy();
        let back = TokenizerModel::from_tsv(&t.to_tsv()).unwrap();
        assert_eq!(back, t);
        assert!(TokenizerModel::from_tsv("version\t9\n").is_err());
        let bad = t.to_tsv().replace("-1.5", "0.5");
        assert!(TokenizerModel::from_tsv(&bad).is_err());
    }

    #[test]
    fn specials_are_disjoint_from_pieces() {
        let t = toy();
        assert!(t.piece(START_ID).is_none());
        assert!(t.piece_id("a").unwrap() >= NUM_SPECIALS);
        assert_eq!(t.vocab_size(), 7);
    }
}
