pub mod compute;
pub mod condition_vocab;
pub mod corpus;
pub mod tokenizer;
pub mod model;
pub mod trainer;
pub mod generator;
pub mod metrics;
