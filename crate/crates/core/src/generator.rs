//! Abstract generation by repeated sampling from the token head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::Scalar;
use crate::condition_vocab::{ConditionError, ConditionVocab};
use crate::model::{Model, ModelError, ModelInput};
use crate::tokenizer::{TokenizerModel, END_ID, NUM_SPECIALS, START_ID};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("top_p must lie in (0, 1], got {0}")]
    TopP(f64),
    #[error("top_k must be at least 1")]
    TopK,
    #[error("no token has non-zero probability")]
    AllMasked,
    #[error("title is empty")]
    EmptyTitle,
    #[error("max_tokens must be at least 1")]
    MaxTokens,
    #[error("prompt of {len} tokens exceeds the maximum sequence length {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sampling controls. The defaults draw from the untruncated distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: None,
        }
    }
}

/// `softmax(logits / temperature)`, computed with max subtraction.
pub fn tempered_probabilities(logits: &[f64], temperature: f64) -> Result<Vec<f64>, GenerateError> {
    if !(temperature > 0.0) {
        return Err(GenerateError::Temperature(temperature));
    }
    let max = logits
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(GenerateError::AllMasked);
    }
    let weights: Vec<f64> = logits
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { ((v - max) / temperature).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws one index from tempered logits after optional top-k and nucleus
/// truncation; returns it with its renormalised probability.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    params: &SamplingParams,
    rng: &mut R,
) -> Result<(usize, f64), GenerateError> {
    let mut probs = tempered_probabilities(logits, params.temperature)?;
    let mut ranked: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = ranked.len();
    if let Some(k) = params.top_k {
        if k == 0 {
            return Err(GenerateError::TopK);
        }
        keep = keep.min(k);
    }
    if let Some(p) = params.top_p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(GenerateError::TopP(p));
        }
        let mut cum = 0.0;
        for (i, &id) in ranked.iter().enumerate().take(keep) {
            cum += probs[id];
            if cum >= p {
                keep = i + 1;
                break;
            }
        }
    }
    if keep == 0 {
        return Err(GenerateError::AllMasked);
    }
    for &id in &ranked[keep..] {
        probs[id] = 0.0;
    }
    let total: f64 = ranked[..keep].iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    let mut chosen = ranked[keep - 1];
    for &id in &ranked[..keep] {
        if u < probs[id] {
            chosen = id;
            break;
        }
        u -= probs[id];
    }
    Ok((chosen, probs[chosen] / total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub title: String,
    pub year: i32,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub max_tokens: usize,
    pub sampling: SamplingParams,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EndToken,
    MaxTokens,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::EndToken => "end_token",
            Termination::MaxTokens => "max_tokens",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Prompt followed by every generated id.
    pub token_ids: Vec<u32>,
    pub prompt_len: usize,
    /// Decoding of `token_ids`.
    pub text: String,
    /// Decoding of the generated part only.
    pub abstract_text: String,
    pub sentences: Vec<String>,
    /// Probability of each generated token under the sampling distribution.
    pub probabilities: Vec<f64>,
    pub termination: Termination,
}

/// Next-token logits for a context, as `f64`, with start, pad and unknown
/// removed from consideration.
pub fn next_token_logits<T: Scalar>(
    model: &Model<T>,
    context: &[u32],
    conditions: &[u32],
) -> Result<Vec<f64>, GenerateError> {
    let conds = [conditions.to_vec()];
    let out = model.predict(&ModelInput {
        seq_len: context.len(),
        input_ids: context,
        conditions: &conds,
    })?;
    let mut logits: Vec<f64> = out
        .token_logits
        .row(context.len() - 1)
        .iter()
        .map(|v| v.as_f64())
        .collect();
    for (id, l) in logits.iter_mut().enumerate().take(NUM_SPECIALS as usize) {
        if id as u32 != END_ID {
            *l = f64::NEG_INFINITY;
        }
    }
    Ok(logits)
}

/// Samples an abstract for a title and condition.
///
/// The prompt is the start token followed by the Viterbi encoding of the
/// lowercased title. Once the sequence reaches the model's maximum length,
/// only the most recent `max_seq - 1` tokens are fed back.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    tok: &TokenizerModel,
    cvocab: &ConditionVocab,
    request: &GenerationRequest,
) -> Result<GenerationOutput, GenerateError> {
    if request.title.trim().is_empty() {
        return Err(GenerateError::EmptyTitle);
    }
    if request.max_tokens == 0 {
        return Err(GenerateError::MaxTokens);
    }
    let conditions = cvocab.lookup(request.year, &request.keywords)?;
    let n = model.config().max_seq;
    let mut ids = vec![START_ID];
    ids.extend(tok.encode_viterbi(&request.title.to_lowercase()));
    if ids.len() > n {
        return Err(GenerateError::PromptTooLong { len: ids.len(), max: n });
    }
    let prompt_len = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut probabilities = Vec::new();
    let mut termination = Termination::MaxTokens;
    while probabilities.len() < request.max_tokens {
        let context = if ids.len() < n { &ids[..] } else { &ids[ids.len() - (n - 1)..] };
        let logits = next_token_logits(model, context, &conditions)?;
        let (next, p) = sample_next(&logits, &request.sampling, &mut rng)?;
        ids.push(next as u32);
        probabilities.push(p);
        if next as u32 == END_ID {
            termination = Termination::EndToken;
            break;
        }
    }
    let abstract_text = tok.decode(&ids[prompt_len..]);
    Ok(GenerationOutput {
        text: tok.decode(&ids),
        sentences: split_sentences(&abstract_text),
        abstract_text,
        token_ids: ids,
        prompt_len,
        probabilities,
        termination,
    })
}

/// Splits after `.`, `!` or `?` when followed by whitespace. Pieces are
/// trimmed and empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|(_, n)| n.is_whitespace()) {
            let end = i + c.len_utf8();
            out.push(text[start..end].trim().to_string());
            start = end;
        }
    }
    out.push(text[start..].trim().to_string());
    out.retain(|s| !s.is_empty());
    out
}

/// One line of a generation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub title: String,
    pub year: i32,
    pub keywords: Vec<String>,
    pub generated: String,
    pub sentences: Vec<String>,
    pub termination: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_limits() {
        let logits = [0.1, 2.0, 1.9, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let cold = SamplingParams {
                temperature: 1e-6,
                ..Default::default()
            };
            assert_eq!(sample_next(&logits, &cold, &mut rng).unwrap().0, 1);
            let k1 = SamplingParams {
                temperature: 50.0,
                top_k: Some(1),
                top_p: None,
            };
            let (id, p) = sample_next(&logits, &k1, &mut rng).unwrap();
            assert_eq!((id, p), (1, 1.0));
        }
    }

    #[test]
    fn sampling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SamplingParams {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(sample_next(&[1.0], &p, &mut rng), Err(GenerateError::Temperature(_))));
        let all_masked = [f64::NEG_INFINITY; 3];
        assert!(matches!(
            sample_next(&all_masked, &SamplingParams::default(), &mut rng),
            Err(GenerateError::AllMasked)
        ));
        let bad_p = SamplingParams {
            top_p: Some(1.5),
            ..Default::default()
        };
        assert!(sample_next(&[1.0, 2.0], &bad_p, &mut rng).is_err());
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        // Probabilities 0.5, 0.3, 0.2 in that order.
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let p = SamplingParams {
            top_p: Some(0.75),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [0usize; 3];
        for _ in 0..2000 {
            let (id, prob) = sample_next(&logits, &p, &mut rng).unwrap();
            seen[id] += 1;
            assert!((prob - [0.625, 0.375, 0.0][id]).abs() < 1e-12);
        }
        assert_eq!(seen[2], 0);
        assert!(seen[0] > seen[1]);
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let logits = [2.0, 0.5, -1.0, 0.0, 1.2];
        let entropy = |t| {
            tempered_probabilities(&logits, t)
                .unwrap()
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        };
        let mut prev = 0.0;
        for t in [0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 50.0] {
            let h = entropy(t);
            assert!(h >= prev - 1e-12);
            prev = h;
        }
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("a b. c d."), ["a b.", "c d."]);
        assert_eq!(split_sentences("no terminal punctuation"), ["no terminal punctuation"]);
        assert_eq!(split_sentences("p. 0.05 was used."), ["p.", "0.05 was used."]);
        assert_eq!(split_sentences("why? yes!  ok"), ["why?", "yes!", "ok"]);
        assert!(split_sentences("   ").is_empty());
    }
}
