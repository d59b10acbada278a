//! Condition encoder and masked decoder with four output heads.
//!
//! The encoder reads condition embeddings without positions; the decoder
//! reads token embeddings plus sinusoidal positions, attends causally to
//! itself and freely to the encoder output. Post-norm blocks throughout:
//!
//! ```text
//! encoder: a = LN(MHA(X, X) + X);            out = LN(FF(a) + a)
//! decoder: b = LN(MaskedMHA(X, X) + X);
//!          a = LN(MHA(b, E) + b);            out = LN(FF(a) + a)
//! ```
//!
//! Every sequence also receives a learned null condition, so the encoder
//! never sees an empty input.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Mode, Scalar, Tensor, Var};
use crate::corpus::Batch;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field} {msg}")]
    Config { field: &'static str, msg: String },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("condition id {id} out of range for {count} condition entries")]
    Condition { id: u32, count: usize },
    #[error("sequence length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("input holds {found} ids, expected {batch} x {seq_len}")]
    InputShape {
        batch: usize,
        seq_len: usize,
        found: usize,
    },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Parameter {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_size: usize,
    pub dropout: f64,
    pub max_seq: usize,
    pub token_vocab: usize,
    pub pos_vocab: usize,
    pub dep_vocab: usize,
    pub ent_vocab: usize,
    /// Condition entries, excluding the null condition.
    pub condition_vocab: usize,
}

/// Vocabulary sizes a config is built around.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabSizes {
    pub token: usize,
    pub pos: usize,
    pub dep: usize,
    pub ent: usize,
    pub condition: usize,
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn toy(v: VocabSizes) -> Self {
        Self {
            d_model: 64,
            heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ff_size: 256,
            dropout: 0.1,
            max_seq: 32,
            ..Self::with_vocab(v)
        }
    }

    /// The full-size configuration.
    pub fn full(v: VocabSizes) -> Self {
        Self {
            d_model: 1024,
            heads: 16,
            encoder_blocks: 2,
            decoder_blocks: 16,
            ff_size: 3072,
            dropout: 0.1,
            max_seq: 128,
            ..Self::with_vocab(v)
        }
    }

    fn with_vocab(v: VocabSizes) -> Self {
        Self {
            d_model: 0,
            heads: 0,
            encoder_blocks: 0,
            decoder_blocks: 0,
            ff_size: 0,
            dropout: 0.0,
            max_seq: 0,
            token_vocab: v.token,
            pos_vocab: v.pos,
            dep_vocab: v.dep,
            ent_vocab: v.ent,
            condition_vocab: v.condition,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("ff_size", self.ff_size),
            ("max_seq", self.max_seq),
            ("token_vocab", self.token_vocab),
            ("pos_vocab", self.pos_vocab),
            ("dep_vocab", self.dep_vocab),
            ("ent_vocab", self.ent_vocab),
        ];
        for (field, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    msg: "must be at least 1".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config {
                field: "heads",
                msg: format!("{} does not divide d_model {}", self.heads, self.d_model),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config {
                field: "dropout",
                msg: format!("{} is outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Row of the condition table holding the null condition.
    pub fn null_condition(&self) -> u32 {
        self.condition_vocab as u32
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        for j in 0..d {
            let angle = p as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("n x d values")
}

/// `softmax(Q Kᵀ / √d_k + mask) V`, with `d_k` the width of `q`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var, ComputeError> {
    let d_k = g.value(q).cols();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax_lastdim(scores)?;
    g.matmul(weights, v)
}

/// Additive mask letting row `i` see columns `0..=i`.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let data = (0..n * n)
        .map(|i| {
            if i % n > i / n {
                T::neg_infinity()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("n x n values")
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfIdx {
    w: usize,
    w2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncoderIdx {
    attn: AttnIdx,
    ln1: NormIdx,
    ff: FfIdx,
    ln2: NormIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecoderIdx {
    self_attn: AttnIdx,
    ln1: NormIdx,
    cross: AttnIdx,
    ln2: NormIdx,
    ff: FfIdx,
    ln3: NormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    token_embedding: usize,
    condition_embedding: usize,
    encoder: Vec<EncoderIdx>,
    decoder: Vec<DecoderIdx>,
    heads: [usize; 4],
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl Layout {
    fn build(c: &ModelConfig) -> (Self, Vec<Spec>) {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(Spec { name, shape, init });
            specs.len() - 1
        };
        let d = c.d_model;
        let token_embedding = add("token_embedding".into(), vec![c.token_vocab, d], Init::Normal);
        let condition_embedding = add(
            "condition_embedding".into(),
            vec![c.condition_vocab + 1, d],
            Init::Normal,
        );
        let attn = |prefix: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize| AttnIdx {
            q: add(format!("{prefix}.q"), vec![d, d], Init::Normal),
            k: add(format!("{prefix}.k"), vec![d, d], Init::Normal),
            v: add(format!("{prefix}.v"), vec![d, d], Init::Normal),
            o: add(format!("{prefix}.o"), vec![d, d], Init::Normal),
        };
        let norm = |prefix: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize| NormIdx {
            gain: add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        };
        let ff = |prefix: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize| FfIdx {
            w: add(format!("{prefix}.w"), vec![d, c.ff_size], Init::Normal),
            w2: add(format!("{prefix}.w2"), vec![c.ff_size, d], Init::Normal),
        };
        let encoder = (0..c.encoder_blocks)
            .map(|i| EncoderIdx {
                attn: attn(&format!("encoder.{i}.attn"), &mut add),
                ln1: norm(&format!("encoder.{i}.ln1"), &mut add),
                ff: ff(&format!("encoder.{i}.ff"), &mut add),
                ln2: norm(&format!("encoder.{i}.ln2"), &mut add),
            })
            .collect();
        let decoder = (0..c.decoder_blocks)
            .map(|i| DecoderIdx {
                self_attn: attn(&format!("decoder.{i}.self_attn"), &mut add),
                ln1: norm(&format!("decoder.{i}.ln1"), &mut add),
                cross: attn(&format!("decoder.{i}.cross_attn"), &mut add),
                ln2: norm(&format!("decoder.{i}.ln2"), &mut add),
                ff: ff(&format!("decoder.{i}.ff"), &mut add),
                ln3: norm(&format!("decoder.{i}.ln3"), &mut add),
            })
            .collect();
        let heads = [
            add("head.token".into(), vec![d, c.token_vocab], Init::Normal),
            add("head.pos".into(), vec![d, c.pos_vocab], Init::Normal),
            add("head.dep".into(), vec![d, c.dep_vocab], Init::Normal),
            add("head.ent".into(), vec![d, c.ent_vocab], Init::Normal),
        ];
        (
            Self {
                token_embedding,
                condition_embedding,
                encoder,
                decoder,
                heads,
            },
            specs,
        )
    }
}

/// A batch of right-padded decoder inputs and their condition sets.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub seq_len: usize,
    /// Row-major `batch x seq_len` token ids.
    pub input_ids: &'a [u32],
    pub conditions: &'a [Vec<u32>],
}

impl ModelInput<'_> {
    pub fn batch_size(&self) -> usize {
        self.conditions.len()
    }
}

/// Next-position labels for the four tasks; positions with `mask == false`
/// are ignored.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub token: &'a [u32],
    pub pos: &'a [u32],
    pub dep: &'a [u32],
    pub ent: &'a [u32],
    pub mask: &'a [bool],
}

impl Batch {
    pub fn model_input(&self) -> ModelInput<'_> {
        ModelInput {
            seq_len: self.seq_len,
            input_ids: &self.input_ids,
            conditions: &self.condition_ids,
        }
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            token: &self.target_ids,
            pos: &self.target_pos,
            dep: &self.target_dep,
            ent: &self.target_ent,
            mask: &self.mask,
        }
    }
}

/// Logit nodes of the four heads, one row per decoder position.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub token: Var,
    pub pos: Var,
    pub dep: Var,
    pub ent: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub token: Var,
    pub pos: Var,
    pub dep: Var,
    pub ent: Var,
}

/// Evaluated head logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub token_logits: Tensor<T>,
    pub pos_logits: Tensor<T>,
    pub dep_logits: Tensor<T>,
    pub ent_logits: Tensor<T>,
}

/// Per-task losses as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub token: f64,
    pub pos: f64,
    pub dep: f64,
    pub ent: f64,
}

impl LossBreakdown {
    pub fn read<T: Scalar>(g: &Graph<T>, l: &LossVars) -> Self {
        let f = |v: Var| g.value(v).item().as_f64();
        Self {
            total: f(l.total),
            token: f(l.token),
            pos: f(l.pos),
            dep: f(l.dep),
            ent: f(l.ent),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.token, self.pos, self.dep, self.ent]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: PartialEq> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

struct Segment {
    x: Range<usize>,
    y: Range<usize>,
}

impl<T: Scalar> Model<T> {
    /// Normal(0, 0.02) matrices and embeddings, unit layer-norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let t = match s.init {
                Init::Normal => {
                    let n = s.shape.iter().product();
                    let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
                    Tensor::new(s.shape, data)?
                }
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Zeros => Tensor::zeros(&s.shape),
            };
            names.push(s.name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Parameter {
                name: "<count>".into(),
                expected: vec![specs.len()],
                found: vec![params.len()],
            });
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(ModelError::Parameter {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every parameter on the graph, as gradient-tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Runs the network with condition sets treated as sets: ids are sorted
    /// before encoding, so any ordering of a set gives the same result.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: &ModelInput<'_>,
        rng: &mut R,
    ) -> Result<HeadVars, ModelError> {
        let sorted: Vec<Vec<u32>> = input
            .conditions
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.sort_unstable();
                c
            })
            .collect();
        let canonical = ModelInput {
            conditions: &sorted,
            ..*input
        };
        self.forward_ordered(g, vars, &canonical, rng)
    }

    /// Runs the network using condition ids in the order given.
    pub fn forward_ordered<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: &ModelInput<'_>,
        rng: &mut R,
    ) -> Result<HeadVars, ModelError> {
        let c = &self.config;
        let (b, l) = (input.batch_size(), input.seq_len);
        if input.input_ids.len() != b * l || b == 0 || l == 0 {
            return Err(ModelError::InputShape {
                batch: b,
                seq_len: l,
                found: input.input_ids.len(),
            });
        }
        if l > c.max_seq {
            return Err(ModelError::TooLong {
                len: l,
                max: c.max_seq,
            });
        }
        let mut token_ids = Vec::with_capacity(b * l);
        for &id in input.input_ids {
            if id as usize >= c.token_vocab {
                return Err(ModelError::Token {
                    id,
                    vocab: c.token_vocab,
                });
            }
            token_ids.push(id as usize);
        }
        let mut cond_ids = Vec::new();
        let mut enc_ranges = Vec::with_capacity(b);
        for set in input.conditions {
            let start = cond_ids.len();
            cond_ids.push(c.condition_vocab);
            for &id in set {
                if id as usize >= c.condition_vocab {
                    return Err(ModelError::Condition {
                        id,
                        count: c.condition_vocab,
                    });
                }
                cond_ids.push(id as usize);
            }
            enc_ranges.push(start..cond_ids.len());
        }

        let lay = &self.layout;
        let p = c.dropout;

        let e = g.embedding_gather(vars[lay.condition_embedding], &cond_ids)?;
        let mut e = g.dropout(e, p, rng)?;
        let self_segments: Vec<Segment> = enc_ranges
            .iter()
            .map(|r| Segment {
                x: r.clone(),
                y: r.clone(),
            })
            .collect();
        for blk in &lay.encoder {
            let h = self.multi_head(g, vars, blk.attn, e, e, &self_segments, None)?;
            let a = self.residual_norm(g, vars, h, e, blk.ln1, rng)?;
            let f = self.feed_forward(g, vars, blk.ff, a)?;
            e = self.residual_norm(g, vars, f, a, blk.ln2, rng)?;
        }

        let t = g.embedding_gather(vars[lay.token_embedding], &token_ids)?;
        let pe = positional_encoding::<T>(l, c.d_model);
        let mut pe_rows = Vec::with_capacity(b * l * c.d_model);
        for _ in 0..b {
            pe_rows.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::new(vec![b * l, c.d_model], pe_rows)?);
        let x = g.add(t, pe)?;
        let mut x = g.dropout(x, p, rng)?;
        let mask = g.constant(causal_mask(l));
        let dec_self: Vec<Segment> = (0..b)
            .map(|i| Segment {
                x: i * l..(i + 1) * l,
                y: i * l..(i + 1) * l,
            })
            .collect();
        let dec_cross: Vec<Segment> = (0..b)
            .map(|i| Segment {
                x: i * l..(i + 1) * l,
                y: enc_ranges[i].clone(),
            })
            .collect();
        for blk in &lay.decoder {
            let h = self.multi_head(g, vars, blk.self_attn, x, x, &dec_self, Some(mask))?;
            let beta = self.residual_norm(g, vars, h, x, blk.ln1, rng)?;
            let h = self.multi_head(g, vars, blk.cross, beta, e, &dec_cross, None)?;
            let alpha = self.residual_norm(g, vars, h, beta, blk.ln2, rng)?;
            let f = self.feed_forward(g, vars, blk.ff, alpha)?;
            x = self.residual_norm(g, vars, f, alpha, blk.ln3, rng)?;
        }

        let [ht, hp, hd, he] = lay.heads;
        Ok(HeadVars {
            token: g.matmul(x, vars[ht])?,
            pos: g.matmul(x, vars[hp])?,
            dep: g.matmul(x, vars[hd])?,
            ent: g.matmul(x, vars[he])?,
        })
    }

    /// `LN(dropout(sub) + residual)`.
    fn residual_norm<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        sub: Var,
        residual: Var,
        ln: NormIdx,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let sub = g.dropout(sub, self.config.dropout, rng)?;
        let s = g.add(sub, residual)?;
        Ok(g.layer_norm(s, vars[ln.gain], vars[ln.bias], LAYER_NORM_EPS)?)
    }

    /// `max(0, X W) W'`.
    fn feed_forward(&self, g: &mut Graph<T>, vars: &[Var], ff: FfIdx, x: Var) -> Result<Var, ModelError> {
        let h = g.matmul(x, vars[ff.w])?;
        let h = g.relu(h);
        Ok(g.matmul(h, vars[ff.w2])?)
    }

    /// Multi-head attention of `x` rows over `y` rows, applied independently
    /// to each segment pair and stacked back in segment order.
    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        a: AttnIdx,
        x: Var,
        y: Var,
        segments: &[Segment],
        mask: Option<Var>,
    ) -> Result<Var, ModelError> {
        let dk = self.config.d_head();
        let q = g.matmul(x, vars[a.q])?;
        let k = g.matmul(y, vars[a.k])?;
        let v = g.matmul(y, vars[a.v])?;
        let mut outs = Vec::with_capacity(segments.len());
        for s in segments {
            let qs = g.slice_rows(q, s.x.start, s.x.end)?;
            let ks = g.slice_rows(k, s.y.start, s.y.end)?;
            let vs = g.slice_rows(v, s.y.start, s.y.end)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let cols = h * dk..(h + 1) * dk;
                let qh = g.slice_cols(qs, cols.start, cols.end)?;
                let kh = g.slice_cols(ks, cols.start, cols.end)?;
                let vh = g.slice_cols(vs, cols.start, cols.end)?;
                heads.push(attention(g, qh, kh, vh, mask)?);
            }
            outs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_lastdim(&heads)?
            });
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)?
        };
        Ok(g.matmul(joined, vars[a.o])?)
    }

    /// Sum of the four per-task mean cross entropies over unmasked positions.
    pub fn loss(&self, g: &mut Graph<T>, heads: &HeadVars, targets: &Targets<'_>) -> Result<LossVars, ModelError> {
        let labels = |ids: &[u32]| -> Vec<Option<usize>> {
            ids.iter()
                .zip(targets.mask)
                .map(|(&id, &m)| m.then_some(id as usize))
                .collect()
        };
        let token = g.cross_entropy_logits(heads.token, &labels(targets.token))?;
        let pos = g.cross_entropy_logits(heads.pos, &labels(targets.pos))?;
        let dep = g.cross_entropy_logits(heads.dep, &labels(targets.dep))?;
        let ent = g.cross_entropy_logits(heads.ent, &labels(targets.ent))?;
        let s = g.add(token, pos)?;
        let s = g.add(s, dep)?;
        let total = g.add(s, ent)?;
        Ok(LossVars {
            total,
            token,
            pos,
            dep,
            ent,
        })
    }

    /// Evaluation-mode forward pass on a fresh graph.
    pub fn predict(&self, input: &ModelInput<'_>) -> Result<ForwardOutput<T>, ModelError> {
        let mut g = Graph::new(Mode::Eval);
        let vars = self.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.forward(&mut g, &vars, input, &mut rng)?;
        Ok(ForwardOutput {
            token_logits: g.value(h.token).clone(),
            pos_logits: g.value(h.pos).clone(),
            dep_logits: g.value(h.dep).clone(),
            ent_logits: g.value(h.ent).clone(),
        })
    }

    /// Evaluation-mode loss of a batch.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new(Mode::Eval);
        let vars = self.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.forward(&mut g, &vars, &batch.model_input(), &mut rng)?;
        let l = self.loss(&mut g, &h, &batch.targets())?;
        Ok(LossBreakdown::read(&g, &l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::finite_diff_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ff_size: 12,
            dropout: 0.0,
            max_seq: 6,
            token_vocab: 11,
            pos_vocab: 4,
            dep_vocab: 5,
            ent_vocab: 3,
            condition_vocab: 6,
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(4, 6);
        assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert_eq!(pe.at(1, 0), 1f64.sin());
        assert_eq!(pe.at(1, 3), (1.0 / 10000f64.powf(2.0 / 6.0)).cos());
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn attention_closed_forms() {
        let mut g = Graph::<f64>::default();
        let q = g.constant(Tensor::from_f64(&[2, 2], &[0.3, -1.0, 2.0, 0.5]).unwrap());
        let k = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[1, 3], &[4.0, 5.0, 6.0]).unwrap());
        let o = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[4., 5., 6., 4., 5., 6.]);

        // Equal scores give the mean of the value rows.
        let q = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, -3.0, 0.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[2, 1], &[2.0, 6.0]).unwrap());
        let o = attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(o).item() - 4.0).abs() < 1e-15);

        // Score gap of ln(3)·√d_k gives weights 0.75 / 0.25.
        let d = 4.0f64;
        let gap = 3f64.ln() * d.sqrt();
        let q = g.constant(Tensor::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[2, 4], &[gap, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
        let o = attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(o).item() - 0.75).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(Model::<f64>::new(c, 0), Err(ModelError::Config { field: "heads", .. })));
        let mut c = tiny();
        c.ff_size = 0;
        assert!(Model::<f64>::new(c, 0).unwrap_err().to_string().contains("ff_size"));
    }

    #[test]
    fn output_shapes_and_id_checks() {
        let m = Model::<f64>::new(tiny(), 1).unwrap();
        let conds = vec![vec![0, 3], vec![]];
        let ids = [1, 2, 3, 4, 5, 6];
        let out = m
            .predict(&ModelInput {
                seq_len: 3,
                input_ids: &ids,
                conditions: &conds,
            })
            .unwrap();
        assert_eq!(out.token_logits.shape(), &[6, 11]);
        assert_eq!(out.ent_logits.shape(), &[6, 3]);
        let bad = [1, 2, 11, 4, 5, 6];
        assert!(matches!(
            m.predict(&ModelInput {
                seq_len: 3,
                input_ids: &bad,
                conditions: &conds,
            }),
            Err(ModelError::Token { id: 11, .. })
        ));
        let bad_cond = vec![vec![6], vec![]];
        assert!(m
            .predict(&ModelInput {
                seq_len: 3,
                input_ids: &ids,
                conditions: &bad_cond,
            })
            .is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero_attention() {
        let mut m = Model::<f64>::new(tiny(), 2).unwrap();
        let o = m.layout.decoder[0].self_attn.o;
        m.params[o] = Tensor::zeros(&[8, 8]);
        let mut g = Graph::new(Mode::Eval);
        let vars = m.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[3, 8], 0.5));
        let seg = [Segment { x: 0..3, y: 0..3 }];
        let mask = g.constant(causal_mask(3));
        let h = m
            .multi_head(&mut g, &vars, m.layout.decoder[0].self_attn, x, x, &seg, Some(mask))
            .unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_is_sum_of_task_terms() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let vars = m.bind(&mut g, false);
        let conds = vec![vec![1]];
        let ids = [0, 4, 5, 6];
        let input = ModelInput {
            seq_len: 4,
            input_ids: &ids,
            conditions: &conds,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = m.forward(&mut g, &vars, &input, &mut rng).unwrap();
        let t = Targets {
            token: &[4, 5, 6, 1],
            pos: &[1, 2, 3, 0],
            dep: &[1, 1, 2, 0],
            ent: &[0, 1, 2, 0],
            mask: &[true, true, true, false],
        };
        let l = m.loss(&mut g, &h, &t).unwrap();
        let b = LossBreakdown::read(&g, &l);
        assert!((b.total - (b.token + b.pos + b.dep + b.ent)).abs() < 1e-12);
        assert!((b.token - 11f64.ln()).abs() / 11f64.ln() < 0.05);
        let none = Targets {
            mask: &[false; 4],
            ..t
        };
        assert!(m.loss(&mut g, &h, &none).is_err());
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let mut c = tiny();
        c.max_seq = 3;
        let m = Model::<f64>::new(c, 4).unwrap();
        let conds = vec![vec![2, 5], vec![]];
        let ids = [3, 1, 7, 2, 9, 4];
        let t = Targets {
            token: &[1, 7, 2, 9, 4, 0],
            pos: &[1, 2, 3, 0, 1, 2],
            dep: &[4, 3, 2, 1, 0, 1],
            ent: &[0, 1, 2, 2, 1, 0],
            mask: &[true, true, true, true, true, false],
        };
        let report = finite_diff_check::<_, ModelError>(
            |g, vars| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let input = ModelInput {
                    seq_len: 3,
                    input_ids: &ids,
                    conditions: &conds,
                };
                let h = m.forward(g, vars, &input, &mut rng)?;
                Ok(m.loss(g, &h, &t)?.total)
            },
            m.params(),
            1e-5,
            150,
            7,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
