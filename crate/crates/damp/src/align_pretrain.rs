//! Alignment pretraining over synthetic bitext: masked translation language
//! modeling, in-batch sentence alignment, and attention symmetry, optimized
//! jointly to produce a cross-lingually aligned encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    sgd_adamw_step, AdamWHyper, AdamWState, Graph, GraphError, NodeId, Op, ParamSet,
};
use crate::model::{self, EncodedQuery, Forward, ModelConfig, ModelError, SubwordVocab};
use crate::rng::Pcg32;
use crate::synthdata::Corpus;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("batch has zero masked positions")]
    NoMaskedPositions,
    #[error("sentence alignment needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("empty segment in pair (src {0} tokens, tgt {1})")]
    EmptySegment(usize, usize),
    #[error("no bitext for language {0}")]
    MissingBitext(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Bitext pairs per step, shared by all three objectives.
    pub batch_pairs: usize,
    pub mask_rate: f64,
    pub w_tlm: f64,
    pub w_sa: f64,
    pub w_as: f64,
    /// Pairs per step entering the attention-symmetry term.
    pub symmetry_pairs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 6000,
            batch_pairs: 8,
            mask_rate: 0.15,
            w_tlm: 1.0,
            w_sa: 1.0,
            w_as: 1.0,
            symmetry_pairs: 1,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// One concatenated bitext pair: `src [SEP] tgt` with positions restarting
/// at each segment, masked ids, and the original id per masked position.
#[derive(Debug, Clone)]
pub struct MaskedPair {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// (position in `ids`, original id) per masked slot.
    pub masked: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct TlmBatch {
    pub pairs: Vec<MaskedPair>,
}

impl TlmBatch {
    pub fn num_masked(&self) -> usize {
        self.pairs.iter().map(|p| p.masked.len()).sum()
    }
}

fn concat_pair(vocab: &SubwordVocab, src: &EncodedQuery, tgt: &EncodedQuery) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::with_capacity(src.subword_ids.len() + tgt.subword_ids.len() + 1);
    let mut positions = Vec::with_capacity(ids.capacity());
    ids.extend_from_slice(&src.subword_ids);
    positions.extend(0..src.subword_ids.len());
    ids.push(vocab.sep_id());
    positions.push(0);
    ids.extend_from_slice(&tgt.subword_ids);
    positions.extend(0..tgt.subword_ids.len());
    (ids, positions)
}

/// Mask `mask_rate` of the non-separator tokens across the whole batch
/// (count rounded at batch level), always replacing with `[MASK]`.
pub fn build_tlm_batch(
    vocab: &SubwordVocab,
    pairs: &[(&EncodedQuery, &EncodedQuery)],
    mask_rate: f64,
    rng: &mut Pcg32,
) -> Result<TlmBatch, PretrainError> {
    let mut out: Vec<MaskedPair> = pairs
        .iter()
        .map(|(s, t)| {
            let (ids, positions) = concat_pair(vocab, s, t);
            MaskedPair {
                ids,
                positions,
                masked: Vec::new(),
            }
        })
        .collect();
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in out.iter().enumerate() {
        for (pos, &id) in p.ids.iter().enumerate() {
            if id != vocab.sep_id() {
                eligible.push((pi, pos));
            }
        }
    }
    let k = (mask_rate * eligible.len() as f64).round() as usize;
    if k == 0 {
        return Err(PretrainError::NoMaskedPositions);
    }
    rng.shuffle(&mut eligible);
    let mut chosen: Vec<(usize, usize)> = eligible.into_iter().take(k).collect();
    chosen.sort_unstable();
    for (pi, pos) in chosen {
        let orig = out[pi].ids[pos];
        out[pi].masked.push((pos, orig));
        out[pi].ids[pos] = vocab.mask_id();
    }
    Ok(TlmBatch { pairs: out })
}

/// Mean cross-entropy of recovering the original subword ids at masked
/// positions, predicted from encoder states through the tied embedding.
pub fn tlm_loss(
    config: &ModelConfig,
    fwd: &mut Forward,
    batch: &TlmBatch,
) -> Result<NodeId, PretrainError> {
    if batch.num_masked() == 0 {
        return Err(PretrainError::NoMaskedPositions);
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for pair in &batch.pairs {
        if pair.masked.is_empty() {
            continue;
        }
        let enc = model::encode_ids_at(config, fwd, &pair.ids, None, Some(&pair.positions))?;
        let gather: Vec<usize> = pair.masked.iter().map(|&(pos, _)| pos).collect();
        rows.push(fwd.g.apply(Op::GatherRows(enc.subword_states, gather))?);
        targets.extend(pair.masked.iter().map(|&(_, orig)| orig));
    }
    let states = if rows.len() == 1 {
        rows[0]
    } else {
        fwd.g.apply(Op::ConcatRows(rows))?
    };
    let emb = fwd.p("emb.sub")?;
    let embt = fwd.g.apply(Op::Transpose(emb))?;
    let logits = fwd.g.apply(Op::MatMul(states, embt))?;
    Ok(fwd.g.apply(Op::CrossEntropyRows(logits, targets))?)
}

/// In-batch contrastive sentence alignment: mean-pooled source states score
/// every pooled target in the batch by dot product; cross-entropy of the
/// true translation (softmax over dot scores rather than a raw ratio, which
/// is undefined for negative scores).
pub fn sentence_align_loss(
    config: &ModelConfig,
    fwd: &mut Forward,
    pairs: &[(&EncodedQuery, &EncodedQuery)],
) -> Result<NodeId, PretrainError> {
    if pairs.len() < 2 {
        return Err(PretrainError::BatchTooSmall(pairs.len()));
    }
    let mut src_rows = Vec::with_capacity(pairs.len());
    let mut tgt_rows = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        let enc_s = model::encode(config, fwd, s)?;
        let enc_t = model::encode(config, fwd, t)?;
        src_rows.push(fwd.g.apply(Op::MeanRows(enc_s.word_states))?);
        tgt_rows.push(fwd.g.apply(Op::MeanRows(enc_t.word_states))?);
    }
    let e = fwd.g.apply(Op::ConcatRows(src_rows))?;
    let t = fwd.g.apply(Op::ConcatRows(tgt_rows))?;
    let tt = fwd.g.apply(Op::Transpose(t))?;
    let scores = fwd.g.apply(Op::MatMul(e, tt))?;
    let targets: Vec<usize> = (0..pairs.len()).collect();
    Ok(fwd.g.apply(Op::CrossEntropyRows(scores, targets))?)
}

/// Symmetry penalty from an attention matrix over a concatenated pair:
/// 1 − (1/H) Σ_h tr(Aᵀ_{S→T} A_{T→S}) / min(M, N), with the two blocks cut
/// out of the joint attention and row-renormalized.
pub fn symmetry_from_probs(
    g: &mut Graph,
    probs: NodeId,
    heads: usize,
    m: usize,
    n: usize,
) -> Result<NodeId, PretrainError> {
    if m == 0 || n == 0 {
        return Err(PretrainError::EmptySegment(m, n));
    }
    let len = m + 1 + n;
    let mut acc: Option<NodeId> = None;
    for h in 0..heads {
        let a_st = g.apply(Op::SliceBlock {
            x: probs,
            row0: h * len,
            rows: m,
            col0: m + 1,
            cols: n,
        })?;
        let a_st = g.apply(Op::NormalizeRows(a_st))?;
        let a_ts = g.apply(Op::SliceBlock {
            x: probs,
            row0: h * len + m + 1,
            rows: n,
            col0: 0,
            cols: m,
        })?;
        let a_ts = g.apply(Op::NormalizeRows(a_ts))?;
        // tr(Aᵀ_{S→T} Aᵀ_{T→S}) = Σ_ij A_{S→T}[i,j] · A_{T→S}[j,i]
        let tst = g.apply(Op::Transpose(a_ts))?;
        let prod = g.apply(Op::Mul(a_st, tst))?;
        let tr = g.apply(Op::Sum(prod))?;
        acc = Some(match acc {
            None => tr,
            Some(a) => g.apply(Op::Add(a, tr))?,
        });
    }
    let total = acc.expect("at least one head");
    let scaled = g.apply(Op::Scale(
        total,
        -1.0 / (heads as f64 * m.min(n) as f64),
    ))?;
    Ok(g.apply(Op::AddScalar(scaled, 1.0))?)
}

/// Encode `src [SEP] tgt` jointly and penalize asymmetry of the designated
/// layer's cross-attention blocks.
pub fn attention_symmetry_loss(
    config: &ModelConfig,
    fwd: &mut Forward,
    vocab: &SubwordVocab,
    src: &EncodedQuery,
    tgt: &EncodedQuery,
) -> Result<NodeId, PretrainError> {
    let m = src.subword_ids.len();
    let n = tgt.subword_ids.len();
    if m == 0 || n == 0 {
        return Err(PretrainError::EmptySegment(m, n));
    }
    let (ids, positions) = concat_pair(vocab, src, tgt);
    let enc = model::encode_ids_at(config, fwd, &ids, None, Some(&positions))?;
    let probs = enc.attn[config.symmetry_layer.min(enc.attn.len() - 1)];
    symmetry_from_probs(&mut fwd.g, probs, config.heads, m, n)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainTraceRow {
    pub step: usize,
    pub tlm: f64,
    pub sa: f64,
    #[serde(rename = "as")]
    pub as_: f64,
    pub total: f64,
}

pub fn write_pretrain_trace(path: &Path, trace: &[PretrainTraceRow]) -> Result<(), PretrainError> {
    let mut out = String::from("step,tlm,sa,as,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.tlm, r.sa, r.as_, r.total
        ));
    }
    std::fs::write(path, out).map_err(|source| PretrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Optimize the weighted sum of the three objectives over the corpus
/// bitext. Returns the trained parameters and the per-step loss trace.
pub fn pretrain(
    corpus: &Corpus,
    config: &ModelConfig,
    pre: &PretrainConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<PretrainTraceRow>), PretrainError> {
    let vocab = SubwordVocab::from_grammar(&corpus.grammar);
    let pairs = corpus.bitext_examples();
    for spec in corpus.grammar.languages.iter().skip(1) {
        if !pairs.iter().any(|(_, t)| t.lang == spec.id) {
            return Err(PretrainError::MissingBitext(spec.id.clone()));
        }
    }
    let encoded: Vec<(EncodedQuery, EncodedQuery)> = pairs
        .iter()
        .map(|(s, t)| {
            Ok((
                model::encode_query(&vocab, &s.words)?,
                model::encode_query(&vocab, &t.words)?,
            ))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut params = model::init_params(config, seed);
    let mut state = AdamWState::new();
    let hyper = AdamWHyper {
        lr: pre.lr,
        weight_decay: pre.weight_decay,
        ..AdamWHyper::default()
    };
    let root = Pcg32::new(seed).split("pretrain");
    let mut trace = Vec::with_capacity(pre.steps);
    for step in 0..pre.steps {
        let mut rng = root.split(&format!("step{step}"));
        let batch: Vec<(&EncodedQuery, &EncodedQuery)> = (0..pre.batch_pairs.max(2))
            .map(|_| {
                let (s, t) = &encoded[rng.gen_range(encoded.len())];
                (s, t)
            })
            .collect();

        let mut fwd = Forward::new(&params);
        let tlm_batch = build_tlm_batch(&vocab, &batch, pre.mask_rate, &mut rng)?;
        let tlm = tlm_loss(config, &mut fwd, &tlm_batch)?;
        let sa = sentence_align_loss(config, &mut fwd, &batch)?;
        let mut as_acc: Option<NodeId> = None;
        let n_sym = pre.symmetry_pairs.max(1).min(batch.len());
        for (s, t) in batch.iter().take(n_sym) {
            let term = attention_symmetry_loss(config, &mut fwd, &vocab, s, t)?;
            let term = fwd.g.apply(Op::Scale(term, 1.0 / n_sym as f64))?;
            as_acc = Some(match as_acc {
                None => term,
                Some(a) => fwd.g.apply(Op::Add(a, term))?,
            });
        }
        let as_ = as_acc.expect("symmetry term");

        let wt = fwd.g.apply(Op::Scale(tlm, pre.w_tlm))?;
        let ws = fwd.g.apply(Op::Scale(sa, pre.w_sa))?;
        let wa = fwd.g.apply(Op::Scale(as_, pre.w_as))?;
        let sum = fwd.g.apply(Op::Add(wt, ws))?;
        let total = fwd.g.apply(Op::Add(sum, wa))?;

        trace.push(PretrainTraceRow {
            step,
            tlm: fwd.g.value(tlm).scalar_value(),
            sa: fwd.g.value(sa).scalar_value(),
            as_: fwd.g.value(as_).scalar_value(),
            total: fwd.g.value(total).scalar_value(),
        });
        let grads = fwd.g.backward(total)?;
        sgd_adamw_step(&mut params, &grads, &mut state, &hyper)?;
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::autodiff::grad_check;
    use crate::synthdata::{build_grammar, emit_corpus, load_corpus, GrammarConfig};

    fn tiny_corpus() -> (Corpus, ModelConfig, SubwordVocab) {
        let grammar = build_grammar(&GrammarConfig::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_corpus(&grammar, 40, 3, dir.path()).unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        let vocab = SubwordVocab::from_grammar(&grammar);
        let config = ModelConfig::tiny(
            vocab.len(),
            grammar.ontology.num_generate_actions(),
            grammar.languages.len(),
        );
        (corpus, config, vocab)
    }

    fn sample_pairs(corpus: &Corpus, vocab: &SubwordVocab, n: usize) -> Vec<(EncodedQuery, EncodedQuery)> {
        corpus
            .bitext_examples()
            .iter()
            .take(n)
            .map(|(s, t)| {
                (
                    model::encode_query(vocab, &s.words).unwrap(),
                    model::encode_query(vocab, &t.words).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_embedding_gives_uniform_tlm_loss() {
        let (corpus, config, vocab) = tiny_corpus();
        let mut params = model::init_params(&config, 1);
        params.insert("emb.sub", Tensor::zeros(vec![config.vocab_size, config.d_model]));
        let enc = sample_pairs(&corpus, &vocab, 2);
        let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
        let mut rng = Pcg32::new(3);
        let batch = build_tlm_batch(&vocab, &pairs, 0.15, &mut rng).unwrap();
        let mut fwd = Forward::new(&params);
        let loss = tlm_loss(&config, &mut fwd, &batch).unwrap();
        let v = fwd.g.value(loss).scalar_value();
        assert!(
            (v - (config.vocab_size as f64).ln()).abs() < 1e-9,
            "{v} vs ln|V|"
        );
    }

    #[test]
    fn mask_count_follows_batch_level_rounding() {
        let (corpus, _, vocab) = tiny_corpus();
        let enc = sample_pairs(&corpus, &vocab, 16);
        let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
        let mut rng = Pcg32::new(9);
        let batch = build_tlm_batch(&vocab, &pairs, 0.15, &mut rng).unwrap();
        let eligible: usize = batch
            .pairs
            .iter()
            .map(|p| p.ids.len() - 1) // one separator per pair
            .sum();
        let expected = (0.15 * eligible as f64).round() as usize;
        assert_eq!(batch.num_masked(), expected);
    }

    #[test]
    fn zero_mask_rate_is_an_error() {
        let (corpus, _, vocab) = tiny_corpus();
        let enc = sample_pairs(&corpus, &vocab, 2);
        let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
        let mut rng = Pcg32::new(9);
        assert!(matches!(
            build_tlm_batch(&vocab, &pairs, 0.0, &mut rng),
            Err(PretrainError::NoMaskedPositions)
        ));
    }

    #[test]
    fn sentence_align_score_oracles() {
        // score-level checks of the contrastive objective
        let mut g = Graph::new();
        let scores = g.constant(Tensor::matrix(2, 2, vec![10.0, -10.0, -10.0, 10.0]).unwrap());
        let loss = g.apply(Op::CrossEntropyRows(scores, vec![0, 1])).unwrap();
        let v = g.value(loss).scalar_value();
        assert!(v < 1e-8, "near-certain case: {v}");

        let mut g = Graph::new();
        let scores = g.constant(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let loss = g.apply(Op::CrossEntropyRows(scores, vec![0, 1, 2])).unwrap();
        let v = g.value(loss).scalar_value();
        assert!((v - 3f64.ln()).abs() < 1e-12, "uniform case: {v}");
    }

    #[test]
    fn sentence_align_needs_two_pairs() {
        let (corpus, config, vocab) = tiny_corpus();
        let params = model::init_params(&config, 1);
        let enc = sample_pairs(&corpus, &vocab, 1);
        let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
        let mut fwd = Forward::new(&params);
        assert!(matches!(
            sentence_align_loss(&config, &mut fwd, &pairs),
            Err(PretrainError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn uniform_attention_symmetry_value() {
        // uniform 4x4 blocks in a (M=4, sep, N=4) layout, one head
        let m = 4;
        let n = 4;
        let len = m + 1 + n;
        let uniform = Tensor::matrix(len, len, vec![1.0 / len as f64; len * len]).unwrap();
        let mut g = Graph::new();
        let probs = g.constant(uniform);
        let loss = symmetry_from_probs(&mut g, probs, 1, m, n).unwrap();
        let v = g.value(loss).scalar_value();
        assert!((v - 0.75).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mutually_transposed_one_hot_blocks_give_zero() {
        let m = 3;
        let len = 2 * m + 1;
        let mut data = vec![0.0; len * len];
        // S→T block: identity mapping into the target segment; T→S its transpose
        for i in 0..m {
            data[i * len + (m + 1 + i)] = 1.0;
            data[(m + 1 + i) * len + i] = 1.0;
        }
        // keep remaining rows stochastic over some column
        for r in 0..len {
            if data[r * len..(r + 1) * len].iter().all(|&x| x == 0.0) {
                data[r * len] = 1.0;
            }
        }
        let mut g = Graph::new();
        let probs = g.constant(Tensor::matrix(len, len, data).unwrap());
        let loss = symmetry_from_probs(&mut g, probs, 1, m, m).unwrap();
        assert!(g.value(loss).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn symmetry_loss_bounded_for_stochastic_blocks() {
        let mut rng = Pcg32::new(17);
        for _ in 0..50 {
            let m = 2 + rng.gen_range(4);
            let len = 2 * m + 1;
            let mut data = vec![0.0; len * len];
            for r in 0..len {
                let mut row: Vec<f64> = (0..len).map(|_| rng.next_f64() + 1e-6).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                data[r * len..(r + 1) * len].copy_from_slice(&row);
            }
            let mut g = Graph::new();
            let probs = g.constant(Tensor::matrix(len, len, data).unwrap());
            let loss = symmetry_from_probs(&mut g, probs, 1, m, m).unwrap();
            let v = g.value(loss).scalar_value();
            assert!((0.0..=1.0).contains(&v), "loss {v} outside [0,1]");
        }
    }

    #[test]
    fn symmetry_loss_invariant_under_pair_swap() {
        let (corpus, config, vocab) = tiny_corpus();
        let params = model::init_params(&config, 5);
        let enc = sample_pairs(&corpus, &vocab, 1);
        let (s, t) = &enc[0];
        let eval = |a: &EncodedQuery, b: &EncodedQuery| {
            let mut fwd = Forward::new(&params);
            let loss = attention_symmetry_loss(&config, &mut fwd, &vocab, a, b).unwrap();
            fwd.g.value(loss).scalar_value()
        };
        let fwd_v = eval(s, t);
        let rev_v = eval(t, s);
        assert!((fwd_v - rev_v).abs() < 1e-9, "{fwd_v} vs {rev_v}");
    }

    #[test]
    fn empty_segment_rejected() {
        let mut g = Graph::new();
        let probs = g.constant(Tensor::matrix(3, 3, vec![1.0 / 3.0; 9]).unwrap());
        assert!(matches!(
            symmetry_from_probs(&mut g, probs, 1, 0, 2),
            Err(PretrainError::EmptySegment(0, 2))
        ));
    }

    #[test]
    fn all_three_losses_pass_finite_differences() {
        let (corpus, config, vocab) = tiny_corpus();
        let params = model::init_params(&config, 2);
        let enc = sample_pairs(&corpus, &vocab, 2);
        let mut rng = Pcg32::new(4);
        let batch = {
            let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
            build_tlm_batch(&vocab, &pairs, 0.2, &mut rng).unwrap()
        };

        let report = grad_check(
            |p| {
                let mut fwd = Forward::new(p);
                let loss = tlm_loss(&config, &mut fwd, &batch).unwrap();
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "tlm: max rel err {}", report.max_rel_err);

        let report = grad_check(
            |p| {
                let pairs: Vec<_> = enc.iter().map(|(a, b)| (a, b)).collect();
                let mut fwd = Forward::new(p);
                let loss = sentence_align_loss(&config, &mut fwd, &pairs).unwrap();
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "sa: max rel err {}", report.max_rel_err);

        let report = grad_check(
            |p| {
                let mut fwd = Forward::new(p);
                let loss =
                    attention_symmetry_loss(&config, &mut fwd, &vocab, &enc[0].0, &enc[0].1)
                        .unwrap();
                let grads = fwd.g.backward(loss)?;
                Ok((fwd.g.value(loss).scalar_value(), grads))
            },
            &params,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "as: max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (corpus, config, _) = tiny_corpus();
        let pre = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let (params, trace) = pretrain(&corpus, &config, &pre, 13).unwrap();
        let init = model::init_params(&config, 13);
        assert!(trace.is_empty());
        for (name, t) in init.iter() {
            assert_eq!(t.data(), params.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_losses_move() {
        let (corpus, config, _) = tiny_corpus();
        let pre = PretrainConfig {
            steps: 8,
            batch_pairs: 2,
            ..PretrainConfig::default()
        };
        let (pa, ta) = pretrain(&corpus, &config, &pre, 21).unwrap();
        let (pb, tb) = pretrain(&corpus, &config, &pre, 21).unwrap();
        assert_eq!(ta.len(), 8);
        for (a, b) in ta.iter().zip(&tb) {
            assert_eq!(a.total, b.total);
        }
        for (name, t) in pa.iter() {
            assert_eq!(t.data(), pb.get(name).unwrap().data(), "{name}");
        }
        assert!(ta.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn pretrain_trace_csv_layout() {
        let rows = vec![PretrainTraceRow {
            step: 0,
            tlm: 1.5,
            sa: 0.5,
            as_: 0.25,
            total: 2.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_pretrain_trace(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,tlm,sa,as,total\n0,1.5,0.5,0.25,2.25\n");
    }
}
