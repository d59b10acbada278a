use std::collections::{HashMap, HashSet};

use cbag::compute::{Graph, Tensor};
use cbag::condition_vocab::ConditionVocab;
use cbag::corpus::{
    align_labels, tokenizer_sentences, window_at, AnnotatedRecord, AnnotatedToken, LabelVocabs, Segmentation,
};
use cbag::tokenizer::{train_unigram, TokenizerModel, UnigramTrainerConfig, START_ID, UNKNOWN_ID, WORD_MARKER};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_trainer(vocab: usize) -> UnigramTrainerConfig {
    UnigramTrainerConfig {
        vocab_size: vocab,
        ..Default::default()
    }
}

/// Scores of every segmentation of `word` into pieces of `tok`.
fn all_segmentation_scores(tok: &TokenizerModel, word: &[char], acc: f64, out: &mut Vec<f64>) {
    if word.is_empty() {
        out.push(acc);
        return;
    }
    for end in 1..=word.len() {
        let piece: String = word[..end].iter().collect();
        if let Some(id) = tok.piece_id(&piece) {
            all_segmentation_scores(tok, &word[end..], acc + tok.log_prob(id).unwrap(), out);
        }
    }
}

fn toy_vocab() -> impl Strategy<Value = Vec<(String, f64)>> {
    let multi: Vec<String> = ["ab", "ba", "bc", "ca", "abc", "cab", "aa", "bb", "cc", "abca"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    (
        prop::collection::vec(-6.0f64..-0.05, 3),
        prop::collection::vec(prop::option::of(-6.0f64..-0.05), multi.len()),
    )
        .prop_map(move |(singles, extra)| {
            let mut pieces: Vec<(String, f64)> = ["a", "b", "c"]
                .iter()
                .zip(singles)
                .map(|(p, s)| (p.to_string(), s))
                .collect();
            pieces.extend(multi.iter().zip(extra).filter_map(|(p, s)| s.map(|s| (p.clone(), s))));
            pieces
        })
}

fn word_strategy() -> impl Strategy<Value = String> {
    "[a-e]{1,7}"
}

fn record_strategy() -> impl Strategy<Value = AnnotatedRecord> {
    let token = (word_strategy(), 0..3usize, 0..3usize, 0..2usize).prop_map(|(w, p, d, e)| AnnotatedToken {
        surface: w,
        pos: ["NOUN", "VERB", "ADJ"][p].into(),
        dep: ["nsubj", "dobj", "amod"][d].into(),
        ent: ["O", "ENTITY"][e].into(),
    });
    let sentence = prop::collection::vec(token, 1..6).boxed();
    (
        prop::collection::vec(sentence.clone(), 1..4),
        sentence,
        1990..2000i32,
    )
        .prop_map(|(sentences, title, year)| AnnotatedRecord {
            id: "doc".into(),
            year,
            keywords: vec![],
            title,
            sentences,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn viterbi_matches_exhaustive_search(pieces in toy_vocab(), word in "[abc]{1,8}") {
        let tok = TokenizerModel::from_pieces(pieces);
        let chars: Vec<char> = word.chars().collect();
        let mut scores = Vec::new();
        all_segmentation_scores(&tok, &chars, 0.0, &mut scores);
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ids = tok.viterbi_segment(&word);
        prop_assert!((tok.score(&ids) - best).abs() < 1e-9);
        prop_assert_eq!(tok.decode(&ids), word);
    }

    #[test]
    fn round_trip_and_coverage(words in prop::collection::vec(word_strategy(), 1..40), probe in "[a-e ]{0,40}") {
        let text = words.join(" ");
        let (tok, _) = train_unigram(&[text.as_str()], &small_trainer(40)).unwrap();
        for c in text.chars().filter(|c| !c.is_whitespace()).chain([WORD_MARKER]) {
            prop_assert!(tok.piece_id(&c.to_string()).is_some(), "missing character {c:?}");
        }
        let observed: HashSet<char> = text.chars().collect();
        let probe: String = probe.chars().filter(|c| *c == ' ' || observed.contains(c)).collect();
        let ids = tok.encode_viterbi(&probe);
        prop_assert!(!ids.contains(&UNKNOWN_ID));
        prop_assert_eq!(tok.decode(&ids), probe.split_whitespace().collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn em_never_lowers_the_likelihood(words in prop::collection::vec(word_strategy(), 5..60)) {
        let sentences: Vec<String> = words.chunks(5).map(|c| c.join(" ")).collect();
        let config = UnigramTrainerConfig { em_iterations: 4, ..small_trainer(30) };
        let (_, report) = train_unigram(&sentences, &config).unwrap();
        for round in &report.log_likelihoods {
            for pair in round.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs(), "{round:?}");
            }
        }
    }

    #[test]
    fn windows_shift_by_one_and_inherit_labels(records in prop::collection::vec(record_strategy(), 1..4), n in 2..12usize) {
        let (tok, _) = train_unigram(&tokenizer_sentences(&records), &small_trainer(30)).unwrap();
        let labels = LabelVocabs::build(&records);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for record in &records {
            let stream = align_labels(record, &tok, &labels, Segmentation::Viterbi, &mut rng).unwrap();

            let mut at = 1;
            for word in std::iter::once(&record.title).chain(&record.sentences).flatten() {
                let pieces = tok.encode_viterbi(&word.surface);
                let triple = (labels.pos.id(&word.pos), labels.dep.id(&word.dep), labels.ent.id(&word.ent));
                for (k, id) in pieces.iter().enumerate() {
                    prop_assert_eq!(stream.ids[at + k], *id);
                    prop_assert_eq!((stream.pos[at + k], stream.dep[at + k], stream.ent[at + k]), triple);
                }
                at += pieces.len();
            }
            prop_assert_eq!(at + 1, stream.len());

            for k in 0..stream.sentence_starts.len() {
                let w = window_at(&stream, k, n, vec![]);
                prop_assert!(w.len() <= n);
                if k == 0 {
                    prop_assert_eq!(w.input_ids[0], START_ID);
                } else {
                    prop_assert!(stream.sentence_starts.contains(&w.start));
                }
                for i in 0..w.len() {
                    prop_assert_eq!(w.input_ids[i], stream.ids[w.start + i]);
                    prop_assert_eq!(w.target_ids[i], stream.ids[w.start + i + 1]);
                    prop_assert_eq!(w.target_pos[i], stream.pos[w.start + i + 1]);
                }
            }
        }
    }

    #[test]
    fn keyword_pruning_matches_document_counts(
        docs in prop::collection::vec((1990..2000i32, prop::collection::vec(0..8usize, 0..6)), 1..30),
        min_count in 1..5usize,
    ) {
        let records: Vec<AnnotatedRecord> = docs
            .iter()
            .map(|(year, kws)| AnnotatedRecord {
                id: "d".into(),
                year: *year,
                keywords: kws.iter().map(|k| format!("kw{k}")).collect(),
                title: vec![],
                sentences: vec![],
            })
            .collect();
        let vocab = ConditionVocab::build(&records, min_count, None).unwrap();
        let mut ids = HashSet::new();
        for k in 0..8 {
            let key = format!("kw{k}");
            let count = records.iter().filter(|r| r.keywords.contains(&key)).count();
            prop_assert_eq!(vocab.keyword_id(&key).is_some(), count >= min_count);
            ids.extend(vocab.keyword_id(&key));
        }
        for r in &records {
            ids.insert(vocab.year_id(r.year).unwrap());
        }
        for y in vocab.year_base()..=vocab.last_year() {
            ids.insert(vocab.year_id(y).unwrap());
        }
        let expected: HashSet<u32> = (0..vocab.total() as u32).collect();
        prop_assert_eq!(ids, expected);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1..5usize, values in prop::collection::vec(-30.0f64..30.0, 40)) {
        let mut g = Graph::<f64>::default();
        let x = g.constant(Tensor::from_f64(&[rows, 8], &values[..rows * 8]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_centres_and_scales(values in prop::collection::vec(-100.0f64..100.0, 16)) {
        prop_assume!(values.iter().any(|v| (v - values[0]).abs() > 1e-3));
        let mut g = Graph::<f64>::default();
        let x = g.constant(Tensor::from_f64(&[2, 8], &values).unwrap());
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            let spread = values[r * 8..r * 8 + 8].iter().any(|v| (v - values[r * 8]).abs() > 1e-3);
            if spread {
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}

/// Probability that a segmentation of `word` drawn from the unigram
/// posterior uses each piece, by enumerating every segmentation.
fn posterior_piece_usage(tok: &TokenizerModel, word: &str) -> HashMap<String, f64> {
    fn walk(tok: &TokenizerModel, rest: &[char], path: &mut Vec<String>, acc: f64, out: &mut Vec<(Vec<String>, f64)>) {
        if rest.is_empty() {
            out.push((path.clone(), acc));
            return;
        }
        for end in 1..=rest.len() {
            let piece: String = rest[..end].iter().collect();
            if let Some(id) = tok.piece_id(&piece) {
                path.push(piece);
                walk(tok, &rest[end..], path, acc + tok.log_prob(id).unwrap(), out);
                path.pop();
            }
        }
    }
    let chars: Vec<char> = word.chars().collect();
    let mut segs = Vec::new();
    walk(tok, &chars, &mut Vec::new(), 0.0, &mut segs);
    let z: f64 = segs.iter().map(|(_, s)| s.exp()).sum();
    let mut usage = HashMap::new();
    for (path, s) in segs {
        let p = s.exp() / z;
        for piece in path.into_iter().collect::<HashSet<_>>() {
            *usage.entry(piece).or_default() += p;
        }
    }
    usage
}

#[test]
fn repeated_word_prefers_its_substrings() {
    let corpus = vec!["abc abc abc abc"; 50];
    let (tok, _) = train_unigram(&corpus, &small_trainer(64)).unwrap();
    let abc = tok.piece_id("abc").map(|id| tok.log_prob(id).unwrap());
    let ac = tok.piece_id("ac").map(|id| tok.log_prob(id).unwrap());
    // "ac" never occurs contiguously, so no segmentation can use it.
    assert!(ac.is_none());
    let word = format!("{WORD_MARKER}abc");
    let usage = posterior_piece_usage(&tok, &word);
    assert_eq!(usage.get("ac").copied().unwrap_or(0.0), 0.0);
    let whole = tok.piece_id(&word).map(|id| tok.log_prob(id).unwrap()).unwrap();
    assert!(abc.unwrap_or(f64::NEG_INFINITY) > ac.unwrap_or(f64::NEG_INFINITY));
    // The likelihood is maximised by spending all mass on the whole word.
    assert!(usage[&word] > 0.5, "{usage:?}");
    assert!(tok.viterbi_segment(&word) == vec![tok.piece_id(&word).unwrap()]);
    assert!(whole > -1.0);
}
