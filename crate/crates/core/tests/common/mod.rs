#![allow(dead_code)]

use cbag::condition_vocab::ConditionVocab;
use cbag::corpus::{load_records, tokenizer_sentences, AnnotatedRecord, LabelVocabs, Segmentation, WindowContext};
use cbag::model::{ModelConfig, VocabSizes};
use cbag::tokenizer::{train_unigram, TokenizerModel, UnigramTrainerConfig};
use cbag::trainer::TrainConfig;

pub const TOY_VOCAB: usize = 256;

pub struct Toy {
    pub records: Vec<AnnotatedRecord>,
    pub tokenizer: TokenizerModel,
    pub labels: LabelVocabs,
    pub conditions: ConditionVocab,
}

impl Toy {
    pub fn load() -> Self {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy.jsonl");
        let records = load_records(path).expect("toy corpus").records;
        let (tokenizer, _) = train_unigram(
            &tokenizer_sentences(&records),
            &UnigramTrainerConfig {
                vocab_size: TOY_VOCAB,
                ..Default::default()
            },
        )
        .expect("toy tokenizer");
        let labels = LabelVocabs::build(&records);
        let conditions = ConditionVocab::build(&records, 1, None).expect("toy conditions");
        Self {
            records,
            tokenizer,
            labels,
            conditions,
        }
    }

    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            token: self.tokenizer.vocab_size(),
            pos: self.labels.pos.len(),
            dep: self.labels.dep.len(),
            ent: self.labels.ent.len(),
            condition: self.conditions.total(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::toy(self.sizes())
    }

    pub fn ctx(&self, n: usize) -> WindowContext<'_> {
        WindowContext {
            tokenizer: &self.tokenizer,
            labels: &self.labels,
            conditions: &self.conditions,
            n,
            segmentation: Segmentation::Viterbi,
        }
    }
}

/// Warmup scaled to 50 steps, deterministic segmentation.
pub fn memorization_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        peak_lr: 1e-3,
        warmup: 50,
        seed: 7,
        epoch_fraction: 1.0,
        segmentation_temperature: None,
        ..Default::default()
    }
}
