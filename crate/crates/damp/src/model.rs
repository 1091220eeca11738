//! The parser network: transformer encoder with first-subword gather, an
//! autoregressive decoder with a pointer-generator head, and the language
//! discriminator heads used for adversarial alignment.
//!
//! Forward passes are built on a fresh [`Graph`] per call via [`Forward`],
//! which lazily registers named parameters and can freeze a subset (frozen
//! parameters enter the graph as constants, so they receive no gradient).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{scaled_dot_attention, Graph, GraphError, NodeId, Op, ParamSet, Tensor};
use crate::parsefmt::{Action, Ontology};
use crate::rng::Pcg32;
use crate::synthdata::{self, Example, Grammar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("subword id {id} out of range (vocab size {vocab})")]
    SubwordOutOfRange { id: usize, vocab: usize },
    #[error("action id {id} out of range ({max} valid)")]
    ActionOutOfRange { id: usize, max: usize },
    #[error("language id {id} out of range ({num} languages)")]
    LanguageOutOfRange { id: usize, num: usize },
    #[error("unknown subword {0:?}")]
    UnknownSubword(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Ontology actions: one per intent, one per slot, plus close.
    pub num_gen_actions: usize,
    pub num_languages: usize,
    pub max_decode_steps: usize,
    pub init_std: f64,
    /// Encoder layer whose attention feeds the symmetry objective.
    pub symmetry_layer: usize,
}

impl ModelConfig {
    pub fn for_grammar(grammar: &Grammar) -> ModelConfig {
        let vocab = synthdata::build_subword_vocab(grammar);
        ModelConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 4,
            heads: 4,
            ffn_mult: 2,
            vocab_size: vocab.len(),
            num_gen_actions: grammar.ontology.num_generate_actions(),
            num_languages: grammar.languages.len(),
            max_decode_steps: 48,
            init_std: 0.02,
            symmetry_layer: 1,
        }
    }

    pub fn tiny(vocab_size: usize, num_gen_actions: usize, num_languages: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_mult: 2,
            vocab_size,
            num_gen_actions,
            num_languages,
            max_decode_steps: 16,
            init_std: 0.1,
            symmetry_layer: 0,
        }
    }
}

/// Subword vocabulary with a reverse index; id order matches
/// [`synthdata::build_subword_vocab`].
#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pub tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl SubwordVocab {
    pub fn from_grammar(grammar: &Grammar) -> SubwordVocab {
        let tokens = synthdata::build_subword_vocab(grammar);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        SubwordVocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        self.index[synthdata::PAD_TOKEN]
    }

    pub fn unk_id(&self) -> usize {
        self.index[synthdata::UNK_TOKEN]
    }

    pub fn mask_id(&self) -> usize {
        self.index[synthdata::MASK_TOKEN]
    }

    pub fn sep_id(&self) -> usize {
        self.index[synthdata::SEP_TOKEN]
    }

    pub fn special_ids(&self) -> [usize; 4] {
        [self.pad_id(), self.unk_id(), self.mask_id(), self.sep_id()]
    }
}

/// A query rendered to subword ids plus the first-subword index per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQuery {
    pub subword_ids: Vec<usize>,
    pub word_first: Vec<usize>,
}

impl EncodedQuery {
    pub fn num_words(&self) -> usize {
        self.word_first.len()
    }
}

pub fn encode_query(vocab: &SubwordVocab, words: &[String]) -> Result<EncodedQuery, ModelError> {
    let mut subword_ids = Vec::new();
    let mut word_first = Vec::new();
    for w in words {
        word_first.push(subword_ids.len());
        for piece in synthdata::tokenize_subwords(w) {
            subword_ids.push(vocab.id(&piece).unwrap_or_else(|| vocab.unk_id()));
        }
    }
    if subword_ids.is_empty() {
        return Err(ModelError::Invalid("empty query".into()));
    }
    Ok(EncodedQuery {
        subword_ids,
        word_first,
    })
}

/// Action ids for the pointer-generator output space: intents, then slots,
/// then close, then one copy action per query word.
pub fn action_id(ontology: &Ontology, action: &Action) -> Result<usize, ModelError> {
    let num_intents = ontology.intents.len();
    let num_slots = ontology.slots.len();
    Ok(match action {
        Action::OpenIntent(label) => ontology
            .intents
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::Invalid(format!("unknown intent {label}")))?,
        Action::OpenSlot(label) => {
            num_intents
                + ontology
                    .slots
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| ModelError::Invalid(format!("unknown slot {label}")))?
        }
        Action::Close => num_intents + num_slots,
        Action::Copy(i) => num_intents + num_slots + 1 + i,
    })
}

pub fn id_to_action(ontology: &Ontology, id: usize, num_words: usize) -> Result<Action, ModelError> {
    let num_intents = ontology.intents.len();
    let num_slots = ontology.slots.len();
    let k = num_intents + num_slots + 1;
    if id < num_intents {
        Ok(Action::OpenIntent(ontology.intents[id].clone()))
    } else if id < num_intents + num_slots {
        Ok(Action::OpenSlot(ontology.slots[id - num_intents].clone()))
    } else if id == k - 1 {
        Ok(Action::Close)
    } else if id < k + num_words {
        Ok(Action::Copy(id - k))
    } else {
        Err(ModelError::ActionOutOfRange {
            id,
            max: k + num_words,
        })
    }
}

/// Graph-building context over a parameter set. Parameter names matching a
/// frozen prefix are inserted as constants so gradients never reach them.
pub struct Forward<'a> {
    pub g: Graph,
    params: &'a ParamSet,
    cache: BTreeMap<String, NodeId>,
    frozen: Vec<String>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamSet) -> Forward<'a> {
        Forward {
            g: Graph::new(),
            params,
            cache: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn with_frozen(params: &'a ParamSet, frozen: Vec<String>) -> Forward<'a> {
        Forward {
            frozen,
            ..Forward::new(params)
        }
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?
            .clone();
        let id = if self.frozen.iter().any(|pre| name.starts_with(pre)) {
            self.g.constant(tensor)
        } else {
            self.g.param(name, tensor)?
        };
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let rng = Pcg32::new(seed).split("model-init");
    let d = config.d_model;
    let f = d * config.ffn_mult;
    let k = config.num_gen_actions;
    let std = config.init_std;
    let mut p = ParamSet::new();
    let w = |p: &mut ParamSet, name: &str, shape: Vec<usize>| {
        let mut r = rng.split(name);
        p.insert(name, Tensor::random_normal(shape, std, &mut r));
    };
    let b = |p: &mut ParamSet, name: &str, cols: usize| {
        p.insert(name, Tensor::zeros(vec![1, cols]));
    };

    w(&mut p, "emb.sub", vec![config.vocab_size, d]);
    // decoder input embeddings: one row per ontology action plus a start row
    w(&mut p, "dec.emb", vec![k + 1, d]);
    for l in 0..config.enc_layers {
        for name in ["q", "k", "v", "o"] {
            w(&mut p, &format!("enc{l}.attn.{name}"), vec![d, d]);
        }
        w(&mut p, &format!("enc{l}.ffn1.w"), vec![d, f]);
        b(&mut p, &format!("enc{l}.ffn1.b"), f);
        w(&mut p, &format!("enc{l}.ffn2.w"), vec![f, d]);
        b(&mut p, &format!("enc{l}.ffn2.b"), d);
    }
    for l in 0..config.dec_layers {
        for block in ["self", "cross"] {
            for name in ["q", "k", "v", "o"] {
                w(&mut p, &format!("dec{l}.{block}.{name}"), vec![d, d]);
            }
        }
        w(&mut p, &format!("dec{l}.ffn1.w"), vec![d, f]);
        b(&mut p, &format!("dec{l}.ffn1.b"), f);
        w(&mut p, &format!("dec{l}.ffn2.w"), vec![f, d]);
        b(&mut p, &format!("dec{l}.ffn2.b"), d);
    }
    w(&mut p, "gen.w1", vec![d, d]);
    b(&mut p, "gen.b1", d);
    w(&mut p, "gen.w2", vec![d, k]);
    b(&mut p, "gen.b2", k);
    w(&mut p, "disc.bin.w1", vec![d, d]);
    b(&mut p, "disc.bin.b1", d);
    w(&mut p, "disc.bin.w2", vec![d, 1]);
    b(&mut p, "disc.bin.b2", 1);
    w(&mut p, "disc.multi.w1", vec![d, d]);
    b(&mut p, "disc.multi.b1", d);
    w(&mut p, "disc.multi.w2", vec![d, config.num_languages]);
    b(&mut p, "disc.multi.b2", config.num_languages);
    p
}

/// All parameter name prefixes belonging to the discriminator heads; the
/// complement is the generator (encoder/decoder/pointer head).
pub const DISC_PREFIX: &str = "disc.";

pub fn is_disc_param(name: &str) -> bool {
    name.starts_with(DISC_PREFIX)
}

fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * rate).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
    }
    Tensor::matrix(n, d, data).expect("position table")
}

const NEG_INF_MASK: f64 = -1e30;

fn causal_mask(n: usize, heads: usize) -> Tensor {
    let mut data = vec![0.0; heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            for j in (i + 1)..n {
                data[(h * n + i) * n + j] = NEG_INF_MASK;
            }
        }
    }
    Tensor::matrix(heads * n, n, data).expect("causal mask")
}

pub struct EncoderNodes {
    pub subword_states: NodeId,
    /// First-subword gather of `subword_states`, one row per word.
    pub word_states: NodeId,
    /// Attention probabilities per layer, shape [heads*n x n].
    pub attn: Vec<NodeId>,
}

fn attention_block(
    fwd: &mut Forward,
    x: NodeId,
    kv: NodeId,
    prefix: &str,
    heads: usize,
    mask: Option<NodeId>,
) -> Result<(NodeId, NodeId), ModelError> {
    let wq = fwd.p(&format!("{prefix}.q"))?;
    let wk = fwd.p(&format!("{prefix}.k"))?;
    let wv = fwd.p(&format!("{prefix}.v"))?;
    let wo = fwd.p(&format!("{prefix}.o"))?;
    let q = fwd.g.apply(Op::MatMul(x, wq))?;
    let k = fwd.g.apply(Op::MatMul(kv, wk))?;
    let v = fwd.g.apply(Op::MatMul(kv, wv))?;
    let (ctx, probs) = scaled_dot_attention(&mut fwd.g, q, k, v, heads, mask)?;
    let out = fwd.g.apply(Op::MatMul(ctx, wo))?;
    Ok((out, probs))
}

fn ffn_block(fwd: &mut Forward, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
    let w1 = fwd.p(&format!("{prefix}.ffn1.w"))?;
    let b1 = fwd.p(&format!("{prefix}.ffn1.b"))?;
    let w2 = fwd.p(&format!("{prefix}.ffn2.w"))?;
    let b2 = fwd.p(&format!("{prefix}.ffn2.b"))?;
    let h = fwd.g.apply(Op::MatMul(x, w1))?;
    let h = fwd.g.apply(Op::AddRowVec(h, b1))?;
    let h = fwd.g.apply(Op::Tanh(h))?;
    let h = fwd.g.apply(Op::MatMul(h, w2))?;
    Ok(fwd.g.apply(Op::AddRowVec(h, b2))?)
}

/// Pre-norm transformer encoding of a subword sequence, then first-subword
/// gather for per-word states.
pub fn encode(
    config: &ModelConfig,
    fwd: &mut Forward,
    query: &EncodedQuery,
) -> Result<EncoderNodes, ModelError> {
    encode_ids(config, fwd, &query.subword_ids, Some(&query.word_first))
}

/// Encoder over raw subword ids; `word_first`, when given, selects the
/// word-state rows (defaults to every position).
pub fn encode_ids(
    config: &ModelConfig,
    fwd: &mut Forward,
    subword_ids: &[usize],
    word_first: Option<&[usize]>,
) -> Result<EncoderNodes, ModelError> {
    encode_ids_at(config, fwd, subword_ids, word_first, None)
}

/// As [`encode_ids`] with explicit position indices, so concatenated pair
/// inputs can restart positions per segment (making the encoding a pure
/// function of the (token, position) multiset up to row order).
pub fn encode_ids_at(
    config: &ModelConfig,
    fwd: &mut Forward,
    subword_ids: &[usize],
    word_first: Option<&[usize]>,
    positions: Option<&[usize]>,
) -> Result<EncoderNodes, ModelError> {
    for &id in subword_ids {
        if id >= config.vocab_size {
            return Err(ModelError::SubwordOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
    }
    let n = subword_ids.len();
    let emb = fwd.p("emb.sub")?;
    let tok = fwd.g.apply(Op::GatherRows(emb, subword_ids.to_vec()))?;
    let pos_table = match positions {
        None => sinusoidal_positions(n, config.d_model),
        Some(idx) => {
            assert_eq!(idx.len(), n, "one position per token");
            let max = idx.iter().copied().max().unwrap_or(0);
            let table = sinusoidal_positions(max + 1, config.d_model);
            let d = config.d_model;
            let mut data = Vec::with_capacity(n * d);
            for &p in idx {
                data.extend_from_slice(&table.data()[p * d..(p + 1) * d]);
            }
            Tensor::matrix(n, d, data).expect("position table")
        }
    };
    let pos = fwd.g.constant(pos_table);
    let mut x = fwd.g.apply(Op::Add(tok, pos))?;
    let mut attn = Vec::with_capacity(config.enc_layers);
    for l in 0..config.enc_layers {
        let h = fwd.g.apply(Op::LayerNormRows(x))?;
        let (ctx, probs) =
            attention_block(fwd, h, h, &format!("enc{l}.attn"), config.heads, None)?;
        attn.push(probs);
        x = fwd.g.apply(Op::Add(x, ctx))?;
        let h = fwd.g.apply(Op::LayerNormRows(x))?;
        let ff = ffn_block(fwd, h, &format!("enc{l}"))?;
        x = fwd.g.apply(Op::Add(x, ff))?;
    }
    let subword_states = fwd.g.apply(Op::LayerNormRows(x))?;
    let gather: Vec<usize> = match word_first {
        Some(wf) => wf.to_vec(),
        None => (0..n).collect(),
    };
    let word_states = fwd.g.apply(Op::GatherRows(subword_states, gather))?;
    Ok(EncoderNodes {
        subword_states,
        word_states,
        attn,
    })
}

/// Teacher-forced decoder pass. Returns the full pointer-generator logits,
/// shape [steps x (num_gen_actions + num_words)]; targets are gold action
/// ids under [`action_id`] with copies offset by `num_gen_actions`.
pub fn decode_logits(
    config: &ModelConfig,
    fwd: &mut Forward,
    word_states: NodeId,
    prev_actions: &[Option<usize>],
    num_words: usize,
) -> Result<NodeId, ModelError> {
    let k = config.num_gen_actions;
    let dec_emb = fwd.p("dec.emb")?;
    let n = prev_actions.len();
    // decoder inputs: the start row for step 0, then the embedding of each
    // previous action — ontology actions index the action table, copies
    // take the copied word's encoder state
    let mut rows = Vec::with_capacity(n);
    for prev in prev_actions {
        let row = match prev {
            None => fwd.g.apply(Op::GatherRows(dec_emb, vec![k]))?,
            Some(id) if *id < k => fwd.g.apply(Op::GatherRows(dec_emb, vec![*id]))?,
            Some(id) if *id < k + num_words => {
                fwd.g.apply(Op::GatherRows(word_states, vec![*id - k]))?
            }
            Some(id) => {
                return Err(ModelError::ActionOutOfRange {
                    id: *id,
                    max: k + num_words,
                })
            }
        };
        rows.push(row);
    }
    let inputs = if rows.len() == 1 {
        rows[0]
    } else {
        fwd.g.apply(Op::ConcatRows(rows))?
    };
    let pos = fwd.g.constant(sinusoidal_positions(n, config.d_model));
    let mut x = fwd.g.apply(Op::Add(inputs, pos))?;
    let mask = fwd.g.constant(causal_mask(n, config.heads));
    for l in 0..config.dec_layers {
        let h = fwd.g.apply(Op::LayerNormRows(x))?;
        let (ctx, _) = attention_block(
            fwd,
            h,
            h,
            &format!("dec{l}.self"),
            config.heads,
            Some(mask),
        )?;
        x = fwd.g.apply(Op::Add(x, ctx))?;
        let h = fwd.g.apply(Op::LayerNormRows(x))?;
        let (ctx, _) = attention_block(
            fwd,
            h,
            word_states,
            &format!("dec{l}.cross"),
            config.heads,
            None,
        )?;
        x = fwd.g.apply(Op::Add(x, ctx))?;
        let h = fwd.g.apply(Op::LayerNormRows(x))?;
        let ff = ffn_block(fwd, h, &format!("dec{l}"))?;
        x = fwd.g.apply(Op::Add(x, ff))?;
    }
    let d_states = fwd.g.apply(Op::LayerNormRows(x))?;

    // generation logits from a one-hidden-layer perceptron
    let w1 = fwd.p("gen.w1")?;
    let b1 = fwd.p("gen.b1")?;
    let w2 = fwd.p("gen.w2")?;
    let b2 = fwd.p("gen.b2")?;
    let h = fwd.g.apply(Op::MatMul(d_states, w1))?;
    let h = fwd.g.apply(Op::AddRowVec(h, b1))?;
    let h = fwd.g.apply(Op::Tanh(h))?;
    let gen = fwd.g.apply(Op::MatMul(h, w2))?;
    let gen = fwd.g.apply(Op::AddRowVec(gen, b2))?;

    // copy logits: raw dot products against the word states
    let wt = fwd.g.apply(Op::Transpose(word_states))?;
    let copy = fwd.g.apply(Op::MatMul(d_states, wt))?;
    Ok(fwd.g.apply(Op::ConcatCols(vec![gen, copy]))?)
}

/// A training example prepared for the network.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub query: EncodedQuery,
    pub action_ids: Vec<usize>,
    /// Language index per word.
    pub word_lang_ids: Vec<usize>,
    pub gold_parse: String,
    pub words: Vec<String>,
}

pub fn prepare_example(
    grammar: &Grammar,
    vocab: &SubwordVocab,
    example: &Example,
) -> Result<PreparedExample, ModelError> {
    let query = encode_query(vocab, &example.words)?;
    let tree = example
        .tree(&grammar.ontology)
        .map_err(|e| ModelError::Invalid(e.to_string()))?;
    let actions = crate::parsefmt::to_actions(&tree);
    let k = grammar.ontology.num_generate_actions();
    let action_ids = actions
        .iter()
        .map(|a| action_id(&grammar.ontology, a))
        .collect::<Result<Vec<_>, _>>()?;
    for (&id, a) in action_ids.iter().zip(&actions) {
        if let Action::Copy(i) = a {
            if *i >= example.words.len() {
                return Err(ModelError::ActionOutOfRange {
                    id,
                    max: k + example.words.len(),
                });
            }
        }
    }
    let word_lang_ids = example
        .token_langs
        .iter()
        .map(|l| {
            grammar
                .languages
                .iter()
                .position(|spec| &spec.id == l)
                .ok_or_else(|| ModelError::Invalid(format!("unknown language {l}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedExample {
        query,
        action_ids,
        word_lang_ids,
        gold_parse: example.parse.clone(),
        words: example.words.clone(),
    })
}

/// Mean negative log-likelihood of the gold actions over all steps of all
/// batch items (weighted by step count, so it is the per-step mean).
pub fn parser_loss_batch(
    config: &ModelConfig,
    fwd: &mut Forward,
    items: &[&PreparedExample],
) -> Result<NodeId, ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total_steps: usize = items.iter().map(|it| it.action_ids.len()).sum();
    let mut acc: Option<NodeId> = None;
    for item in items {
        let enc = encode(config, fwd, &item.query)?;
        let mut prev: Vec<Option<usize>> = vec![None];
        prev.extend(item.action_ids[..item.action_ids.len() - 1].iter().map(|&a| Some(a)));
        let logits = decode_logits(config, fwd, enc.word_states, &prev, item.query.num_words())?;
        let loss = fwd
            .g
            .apply(Op::CrossEntropyRows(logits, item.action_ids.clone()))?;
        let weighted = fwd
            .g
            .apply(Op::Scale(loss, item.action_ids.len() as f64 / total_steps as f64))?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => fwd.g.apply(Op::Add(a, weighted))?,
        });
    }
    Ok(acc.expect("nonempty batch"))
}

/// Greedy argmax decoding. The output vocabulary is closed by construction:
/// only ontology actions and copies of in-query words exist in the logit
/// space. Decoding stops when the root closes or at `max_steps`; the raw
/// sequence is returned either way (malformed sequences score EM = false).
pub fn greedy_decode(
    config: &ModelConfig,
    params: &ParamSet,
    ontology: &Ontology,
    query: &EncodedQuery,
    max_steps: usize,
) -> Result<Vec<Action>, ModelError> {
    assert!(max_steps >= 1, "max_steps must be at least 1");
    let num_words = query.num_words();
    let k = config.num_gen_actions;

    let word_states_value = {
        let mut fwd = Forward::new(params);
        let enc = encode(config, &mut fwd, query)?;
        fwd.g.value(enc.word_states).clone()
    };

    let mut action_ids: Vec<usize> = Vec::new();
    let mut depth: i64 = 0;
    for _ in 0..max_steps {
        let mut fwd = Forward::new(params);
        let ws = fwd.g.constant(word_states_value.clone());
        let mut prev: Vec<Option<usize>> = vec![None];
        prev.extend(action_ids.iter().map(|&a| Some(a)));
        let logits = decode_logits(config, &mut fwd, ws, &prev, num_words)?;
        let t = fwd.g.value(logits);
        let (rows, cols) = t.dims2();
        let last = &t.data()[(rows - 1) * cols..rows * cols];
        let best = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        action_ids.push(best);
        let close_id = k - 1;
        if best == close_id {
            depth -= 1;
        } else if best < close_id {
            depth += 1;
        }
        if depth <= 0 {
            break;
        }
    }
    action_ids
        .iter()
        .map(|&id| id_to_action(ontology, id, num_words))
        .collect()
}

pub enum DiscriminatorHead {
    Binary,
    Multiclass,
}

/// Binary head: two-layer perceptron on word states, label 1 for the
/// labeled language's tokens. Mean BCE over tokens.
pub fn discriminator_loss_binary(
    fwd: &mut Forward,
    word_states: NodeId,
    labels: &[f64],
) -> Result<NodeId, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let w1 = fwd.p("disc.bin.w1")?;
    let b1 = fwd.p("disc.bin.b1")?;
    let w2 = fwd.p("disc.bin.w2")?;
    let b2 = fwd.p("disc.bin.b2")?;
    let h = fwd.g.apply(Op::MatMul(word_states, w1))?;
    let h = fwd.g.apply(Op::AddRowVec(h, b1))?;
    let h = fwd.g.apply(Op::Tanh(h))?;
    let logits = fwd.g.apply(Op::MatMul(h, w2))?;
    let logits = fwd.g.apply(Op::AddRowVec(logits, b2))?;
    let probs = fwd.g.apply(Op::Sigmoid(logits))?;
    Ok(fwd.g.apply(Op::BceLoss(probs, labels.to_vec()))?)
}

/// Multi-class head: same architecture with one logit per language; mean
/// softmax cross-entropy of the true language per token.
pub fn discriminator_loss_multiclass(
    config: &ModelConfig,
    fwd: &mut Forward,
    word_states: NodeId,
    language_ids: &[usize],
) -> Result<NodeId, ModelError> {
    if language_ids.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for &id in language_ids {
        if id >= config.num_languages {
            return Err(ModelError::LanguageOutOfRange {
                id,
                num: config.num_languages,
            });
        }
    }
    let w1 = fwd.p("disc.multi.w1")?;
    let b1 = fwd.p("disc.multi.b1")?;
    let w2 = fwd.p("disc.multi.w2")?;
    let b2 = fwd.p("disc.multi.b2")?;
    let h = fwd.g.apply(Op::MatMul(word_states, w1))?;
    let h = fwd.g.apply(Op::AddRowVec(h, b1))?;
    let h = fwd.g.apply(Op::Tanh(h))?;
    let logits = fwd.g.apply(Op::MatMul(h, w2))?;
    let logits = fwd.g.apply(Op::AddRowVec(logits, b2))?;
    Ok(fwd
        .g
        .apply(Op::CrossEntropyRows(logits, language_ids.to_vec()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sgd_adamw_step, AdamWHyper, AdamWState};
    use crate::parsefmt;
    use crate::synthdata::{build_grammar, sample_query, GrammarConfig};

    fn tiny_setup() -> (Grammar, SubwordVocab, ModelConfig, ParamSet) {
        let grammar = build_grammar(&GrammarConfig::default(), 7).unwrap();
        let vocab = SubwordVocab::from_grammar(&grammar);
        let config = ModelConfig::tiny(
            vocab.len(),
            grammar.ontology.num_generate_actions(),
            grammar.languages.len(),
        );
        let params = init_params(&config, 3);
        (grammar, vocab, config, params)
    }

    #[test]
    fn word_state_is_bitwise_first_subword_row() {
        let (grammar, vocab, config, params) = tiny_setup();
        let e = sample_query(&grammar, "L0", 1).unwrap();
        let q = encode_query(&vocab, &e.words).unwrap();
        let mut fwd = Forward::new(&params);
        let enc = encode(&config, &mut fwd, &q).unwrap();
        let sub = fwd.g.value(enc.subword_states).clone();
        let words = fwd.g.value(enc.word_states).clone();
        let d = config.d_model;
        for (w, &first) in q.word_first.iter().enumerate() {
            assert_eq!(
                &words.data()[w * d..(w + 1) * d],
                &sub.data()[first * d..(first + 1) * d],
            );
        }
    }

    #[test]
    fn single_subword_word_states_equal_subword_states() {
        let (_, _, config, params) = tiny_setup();
        let q = EncodedQuery {
            subword_ids: vec![5],
            word_first: vec![0],
        };
        let mut fwd = Forward::new(&params);
        let enc = encode(&config, &mut fwd, &q).unwrap();
        assert_eq!(
            fwd.g.value(enc.word_states).data(),
            fwd.g.value(enc.subword_states).data()
        );
    }

    #[test]
    fn permuting_inputs_changes_output() {
        let (_, _, config, params) = tiny_setup();
        let run = |ids: Vec<usize>| {
            let q = EncodedQuery {
                word_first: (0..ids.len()).collect(),
                subword_ids: ids,
            };
            let mut fwd = Forward::new(&params);
            let enc = encode(&config, &mut fwd, &q).unwrap();
            fwd.g.value(enc.word_states).clone()
        };
        let a = run(vec![5, 9, 12]);
        let b = run(vec![9, 5, 12]);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn out_of_range_subword_rejected() {
        let (_, _, config, params) = tiny_setup();
        let q = EncodedQuery {
            subword_ids: vec![config.vocab_size],
            word_first: vec![0],
        };
        let mut fwd = Forward::new(&params);
        assert!(matches!(
            encode(&config, &mut fwd, &q),
            Err(ModelError::SubwordOutOfRange { .. })
        ));
    }

    #[test]
    fn zeroed_decoder_state_gives_zero_copy_logits() {
        // with gen.w2 = 0, gen.b2 = 0 and a zero word-state matrix, the
        // copy block of the logits is exactly zero: c = d · 0
        let (_, _, config, mut params) = tiny_setup();
        let d = config.d_model;
        params.insert("gen.w2", Tensor::zeros(vec![d, config.num_gen_actions]));
        let mut fwd = Forward::new(&params);
        let ws = fwd.g.constant(Tensor::zeros(vec![3, d]));
        let logits = decode_logits(&config, &mut fwd, ws, &[None], 3).unwrap();
        let t = fwd.g.value(logits);
        let (_, cols) = t.dims2();
        for j in config.num_gen_actions..cols {
            assert_eq!(t.data()[j], 0.0, "copy logit {j} nonzero");
        }
    }

    #[test]
    fn step_distribution_matches_softmax_oracle() {
        let (_, _, config, params) = tiny_setup();
        let mut fwd = Forward::new(&params);
        let mut r = Pcg32::new(5);
        let ws = fwd
            .g
            .constant(Tensor::random_normal(vec![4, config.d_model], 1.0, &mut r));
        let logits = decode_logits(&config, &mut fwd, ws, &[None, Some(0)], 4).unwrap();
        let probs = crate::autodiff::softmax_rows(fwd.g.value(logits));
        let (rows, cols) = probs.dims2();
        assert_eq!(cols, config.num_gen_actions + 4);
        for i in 0..rows {
            let s: f64 = probs.data()[i * cols..(i + 1) * cols].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (_, _, config, params) = tiny_setup();
        let mut r = Pcg32::new(9);
        let ws_val = Tensor::random_normal(vec![3, config.d_model], 1.0, &mut r);
        let run = |third: usize| {
            let mut fwd = Forward::new(&params);
            let ws = fwd.g.constant(ws_val.clone());
            let logits =
                decode_logits(&config, &mut fwd, ws, &[None, Some(1), Some(third)], 3).unwrap();
            fwd.g.value(logits).clone()
        };
        let a = run(2);
        let b = run(4);
        let (_, cols) = a.dims2();
        // first two steps see identical prefixes
        assert_eq!(a.data()[..2 * cols], b.data()[..2 * cols]);
    }

    #[test]
    fn parser_loss_gradients_pass_finite_differences() {
        let (grammar, vocab, config, params) = tiny_setup();
        let e = sample_query(&grammar, "L0", 2).unwrap();
        let item = prepare_example(&grammar, &vocab, &e).unwrap();
        let report = grad_check(
            |p| {
                let mut fwd = Forward::new(p);
                let loss = parser_loss_batch(&config, &mut fwd, &[&item])
                    .map_err(|e| match e {
                        ModelError::Graph(g) => g,
                        other => panic!("{other}"),
                    })?;
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn discriminator_losses_pass_finite_differences() {
        let (_, _, config, params) = tiny_setup();
        let mut r = Pcg32::new(11);
        let states = Tensor::random_normal(vec![5, config.d_model], 1.0, &mut r);
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0];
        let report = grad_check(
            |p| {
                let mut fwd = Forward::new(p);
                let ws = fwd.g.constant(states.clone());
                let loss = discriminator_loss_binary(&mut fwd, ws, &labels).unwrap();
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "binary: max rel err {}", report.max_rel_err);

        let lang_ids = [0usize, 2, 1, 4, 3];
        let report = grad_check(
            |p| {
                let mut fwd = Forward::new(p);
                let ws = fwd.g.constant(states.clone());
                let loss =
                    discriminator_loss_multiclass(&config, &mut fwd, ws, &lang_ids).unwrap();
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "multi: max rel err {}", report.max_rel_err);
    }

    #[test]
    fn multiclass_rejects_unknown_language() {
        let (_, _, config, params) = tiny_setup();
        let mut fwd = Forward::new(&params);
        let ws = fwd.g.constant(Tensor::zeros(vec![2, config.d_model]));
        assert!(matches!(
            discriminator_loss_multiclass(&config, &mut fwd, ws, &[0, config.num_languages]),
            Err(ModelError::LanguageOutOfRange { .. })
        ));
    }

    #[test]
    fn frozen_prefixes_receive_no_gradient() {
        let (grammar, vocab, config, params) = tiny_setup();
        let e = sample_query(&grammar, "L0", 4).unwrap();
        let item = prepare_example(&grammar, &vocab, &e).unwrap();
        let mut fwd = Forward::with_frozen(&params, vec!["enc0.".into(), "emb.".into()]);
        let loss = parser_loss_batch(&config, &mut fwd, &[&item]).unwrap();
        let grads = fwd.g.backward(loss).unwrap();
        assert!(grads.keys().all(|k| !k.starts_with("enc0.") && !k.starts_with("emb.")));
        assert!(grads.contains_key("gen.w1"));
    }

    #[test]
    fn greedy_decode_closure_on_random_params() {
        let (grammar, vocab, config, params) = tiny_setup();
        for seed in 0..10 {
            let e = sample_query(&grammar, "L1", seed).unwrap();
            let q = encode_query(&vocab, &e.words).unwrap();
            let actions =
                greedy_decode(&config, &params, &grammar.ontology, &q, 16).unwrap();
            assert!(!actions.is_empty());
            for a in &actions {
                match a {
                    Action::Copy(i) => assert!(*i < e.words.len()),
                    Action::OpenIntent(l) => assert!(grammar.ontology.intents.contains(l)),
                    Action::OpenSlot(l) => assert!(grammar.ontology.slots.contains(l)),
                    Action::Close => {}
                }
            }
        }
    }

    #[test]
    fn max_steps_one_gives_single_action() {
        let (grammar, vocab, config, params) = tiny_setup();
        let e = sample_query(&grammar, "L0", 8).unwrap();
        let q = encode_query(&vocab, &e.words).unwrap();
        let actions = greedy_decode(&config, &params, &grammar.ontology, &q, 1).unwrap();
        assert_eq!(actions.len(), 1);
    }

    #[test]
    fn overfit_one_example_decodes_gold() {
        let (grammar, vocab, config, mut params) = tiny_setup();
        let e = sample_query(&grammar, "L0", 6).unwrap();
        let item = prepare_example(&grammar, &vocab, &e).unwrap();
        let mut state = AdamWState::new();
        let hyper = AdamWHyper {
            lr: 5e-3,
            ..AdamWHyper::default()
        };
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let mut fwd = Forward::new(&params);
            let loss = parser_loss_batch(&config, &mut fwd, &[&item]).unwrap();
            last = fwd.g.value(loss).scalar_value();
            let grads = fwd.g.backward(loss).unwrap();
            sgd_adamw_step(&mut params, &grads, &mut state, &hyper).unwrap();
        }
        assert!(last < 0.05, "loss stuck at {last}");
        let actions =
            greedy_decode(&config, &params, &grammar.ontology, &item.query, 32).unwrap();
        let tree = parsefmt::from_actions(&actions, e.words.len()).unwrap();
        assert_eq!(parsefmt::serialize(&tree, &e.words).unwrap(), e.parse);
    }
}
