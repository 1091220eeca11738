//! Finetuning on labeled L0 parses, optionally aligning the encoder against
//! a language discriminator: either a fixed-weight reversal term or a
//! constrained formulation whose multiplier rises while the adversary beats
//! chance and falls once it is at chance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    sgd_adamw_step, AdamWHyper, AdamWState, GraphError, NodeId, Op, ParamSet, Tensor,
};
use crate::model::{
    self, EncodedQuery, Forward, ModelConfig, ModelError, PreparedExample, SubwordVocab,
    DISC_PREFIX,
};
use crate::parsefmt;
use crate::rng::Pcg32;
use crate::synthdata::{Corpus, Split};

#[derive(Debug, Error)]
pub enum AdvError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite loss: lambda={lambda} L_s={l_s} L_d={l_d}")]
    NonFinite { lambda: f64, l_s: f64, l_d: f64 },
    #[error("freeze depth {k} must be below encoder depth {depth}")]
    FreezeTooDeep { k: usize, depth: usize },
    #[error("no labeled examples for language {0}")]
    NoLabeled(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    None,
    FixedLambda,
    Constrained,
    Freeze,
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryHead {
    Binary,
    Multiclass,
}

/// Chance-level adversary loss in nats: the constraint target ε.
pub fn chance_epsilon(head: AdversaryHead, num_languages: usize) -> f64 {
    match head {
        AdversaryHead::Binary => 2f64.ln(),
        AdversaryHead::Multiclass => (num_languages as f64).ln(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub adversary: AdversaryHead,
    /// Initial multiplier; in fixed-lambda mode, the fixed weight itself.
    pub lambda0: f64,
    pub epsilon: f64,
    pub lambda_lr: f64,
    /// Encoder layers frozen from the bottom in freeze mode.
    pub freeze_layers: usize,
    /// Weight of the L1/L2 deviation penalty.
    pub norm_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adversary_lr: f64,
    pub weight_decay: f64,
    /// Dev-EM evaluation cadence for early stopping, in steps.
    pub eval_every: usize,
    /// Dev examples scored per evaluation.
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::None,
            adversary: AdversaryHead::Binary,
            lambda0: 0.0,
            epsilon: 2f64.ln(),
            lambda_lr: 0.003,
            freeze_layers: 1,
            norm_weight: 0.01,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            adversary_lr: 1e-2,
            weight_decay: 0.0,
            eval_every: 200,
            eval_examples: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: String,
    pub l_s: f64,
    pub l_d: Option<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub dev_em: Option<f64>,
}

/// The multiplier of the constrained problem with its append-only trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub epsilon: f64,
    pub lambda_lr: f64,
    pub trace: Vec<TraceRow>,
}

impl LagrangianState {
    pub fn new(lambda0: f64, epsilon: f64, lambda_lr: f64) -> LagrangianState {
        assert!(lambda0 >= 0.0, "lambda must start nonnegative");
        LagrangianState {
            lambda: lambda0,
            epsilon,
            lambda_lr,
            trace: Vec::new(),
        }
    }

    /// Gradient ascent on the multiplier, projected to λ ≥ 0:
    /// λ ← max(0, λ + η(ε − L_d)).
    pub fn update(&mut self, l_d: f64) {
        self.lambda = (self.lambda + self.lambda_lr * (self.epsilon - l_d)).max(0.0);
    }
}

pub fn write_finetune_trace(path: &Path, trace: &[TraceRow]) -> std::io::Result<()> {
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("step,phase,L_s,L_d,lambda,epsilon,dev_em\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.phase,
            r.l_s,
            fmt_opt(r.l_d),
            r.lambda,
            r.epsilon,
            fmt_opt(r.dev_em)
        ));
    }
    std::fs::write(path, out)
}

/// Unlabeled query with its per-word language ids, sampled evenly across
/// languages for adversary batches.
#[derive(Debug, Clone)]
pub struct UnlabeledQuery {
    pub query: EncodedQuery,
    pub word_lang_ids: Vec<usize>,
}

/// Per-language counts in the batch differ by at most one.
pub fn build_adversarial_batch<'a>(
    pools: &'a [Vec<UnlabeledQuery>],
    batch_size: usize,
    rng: &mut Pcg32,
) -> Vec<&'a UnlabeledQuery> {
    let langs = pools.len();
    let base = batch_size / langs;
    let extra = batch_size % langs;
    let mut batch = Vec::with_capacity(batch_size);
    for (l, pool) in pools.iter().enumerate() {
        let count = base + usize::from(l < extra);
        for _ in 0..count {
            batch.push(&pool[rng.gen_range(pool.len())]);
        }
    }
    batch
}

fn disc_loss_on_constants(
    config: &ModelConfig,
    fwd: &mut Forward,
    states: Vec<NodeId>,
    word_lang_ids: &[usize],
    head: AdversaryHead,
) -> Result<NodeId, AdvError> {
    let ws = if states.len() == 1 {
        states[0]
    } else {
        fwd.g.apply(Op::ConcatRows(states))?
    };
    Ok(match head {
        AdversaryHead::Binary => {
            let labels: Vec<f64> = word_lang_ids
                .iter()
                .map(|&l| if l == 0 { 1.0 } else { 0.0 })
                .collect();
            model::discriminator_loss_binary(fwd, ws, &labels)?
        }
        AdversaryHead::Multiclass => {
            model::discriminator_loss_multiclass(config, fwd, ws, word_lang_ids)?
        }
    })
}

/// One discriminator update. Encoder states are evaluated first and enter
/// the discriminator graph as constants, so no gradient can reach the
/// encoder; only `disc.*` tensors change.
pub fn adversary_step(
    config: &ModelConfig,
    params: &mut ParamSet,
    batch: &[&UnlabeledQuery],
    head: AdversaryHead,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<f64, AdvError> {
    let mut state_values: Vec<Tensor> = Vec::with_capacity(batch.len());
    {
        let mut fwd = Forward::new(params);
        for q in batch {
            let enc = model::encode(config, &mut fwd, &q.query)?;
            state_values.push(fwd.g.value(enc.word_states).clone());
        }
    }
    let mut fwd = Forward::new(params);
    let states: Vec<NodeId> = state_values
        .into_iter()
        .map(|t| fwd.g.constant(t))
        .collect();
    let lang_ids: Vec<usize> = batch
        .iter()
        .flat_map(|q| q.word_lang_ids.iter().copied())
        .collect();
    let loss = disc_loss_on_constants(config, &mut fwd, states, &lang_ids, head)?;
    let l_d = fwd.g.value(loss).scalar_value();
    let grads = fwd.g.backward(loss)?;
    debug_assert!(grads.keys().all(|k| k.starts_with(DISC_PREFIX)));
    sgd_adamw_step(params, &grads, state, hyper)?;
    Ok(l_d)
}

fn generator_losses(
    config: &ModelConfig,
    fwd: &mut Forward,
    labeled: &[&PreparedExample],
    unlabeled: &[&UnlabeledQuery],
    head: AdversaryHead,
) -> Result<(NodeId, NodeId), AdvError> {
    let l_s = model::parser_loss_batch(config, fwd, labeled)?;
    let mut states = Vec::with_capacity(unlabeled.len());
    let mut lang_ids = Vec::new();
    for q in unlabeled {
        let enc = model::encode(config, fwd, &q.query)?;
        states.push(enc.word_states);
        lang_ids.extend(q.word_lang_ids.iter().copied());
    }
    let l_d = disc_loss_on_constants(config, fwd, states, &lang_ids, head)?;
    Ok((l_s, l_d))
}

/// Generator step of the constrained formulation: descend on
/// L_s + λ(ε − L_d) with the discriminator frozen, then ascend λ.
/// Returns (L_s, L_d).
pub fn lagrangian_generator_step(
    config: &ModelConfig,
    params: &mut ParamSet,
    lagr: &mut LagrangianState,
    labeled: &[&PreparedExample],
    unlabeled: &[&UnlabeledQuery],
    head: AdversaryHead,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<(f64, f64), AdvError> {
    let mut fwd = Forward::with_frozen(params, vec![DISC_PREFIX.into()]);
    let (l_s, l_d) = generator_losses(config, &mut fwd, labeled, unlabeled, head)?;
    let slack = fwd.g.apply(Op::Scale(l_d, -1.0))?;
    let slack = fwd.g.apply(Op::AddScalar(slack, lagr.epsilon))?;
    let weighted = fwd.g.apply(Op::Scale(slack, lagr.lambda))?;
    let total = fwd.g.apply(Op::Add(l_s, weighted))?;
    let l_s_v = fwd.g.value(l_s).scalar_value();
    let l_d_v = fwd.g.value(l_d).scalar_value();
    if !fwd.g.value(total).scalar_value().is_finite() {
        return Err(AdvError::NonFinite {
            lambda: lagr.lambda,
            l_s: l_s_v,
            l_d: l_d_v,
        });
    }
    let grads = fwd.g.backward(total)?;
    sgd_adamw_step(params, &grads, state, hyper)?;
    lagr.update(l_d_v);
    Ok((l_s_v, l_d_v))
}

/// Fixed-weight gradient reversal: descend on L_s − λ·L_d.
pub fn fixed_lambda_generator_step(
    config: &ModelConfig,
    params: &mut ParamSet,
    lambda: f64,
    labeled: &[&PreparedExample],
    unlabeled: &[&UnlabeledQuery],
    head: AdversaryHead,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<(f64, f64), AdvError> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    let mut fwd = Forward::with_frozen(params, vec![DISC_PREFIX.into()]);
    let (l_s, l_d) = generator_losses(config, &mut fwd, labeled, unlabeled, head)?;
    let reversed = fwd.g.apply(Op::Scale(l_d, -lambda))?;
    let total = fwd.g.apply(Op::Add(l_s, reversed))?;
    let l_s_v = fwd.g.value(l_s).scalar_value();
    let l_d_v = fwd.g.value(l_d).scalar_value();
    if !fwd.g.value(total).scalar_value().is_finite() {
        return Err(AdvError::NonFinite {
            lambda,
            l_s: l_s_v,
            l_d: l_d_v,
        });
    }
    let grads = fwd.g.backward(total)?;
    sgd_adamw_step(params, &grads, state, hyper)?;
    Ok((l_s_v, l_d_v))
}

/// Parameter names covered by the freeze/norm baselines: the encoder stack
/// plus the shared subword embedding.
fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc") || name.starts_with("emb.")
}

/// Supervised step under one of the regularization baselines: freeze the
/// bottom `k` encoder layers, or penalize deviation from the pretrained
/// encoder with an L1 or squared-L2 term.
pub fn regularized_step(
    config: &ModelConfig,
    params: &mut ParamSet,
    pretrained: &ParamSet,
    ft: &FinetuneConfig,
    labeled: &[&PreparedExample],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<f64, AdvError> {
    let enc_names: Vec<String> = params
        .names()
        .filter(|n| is_encoder_param(n))
        .cloned()
        .collect();
    let mut fwd = match ft.mode {
        FinetuneMode::Freeze => {
            if ft.freeze_layers >= config.enc_layers {
                return Err(AdvError::FreezeTooDeep {
                    k: ft.freeze_layers,
                    depth: config.enc_layers,
                });
            }
            let mut frozen: Vec<String> = (0..ft.freeze_layers).map(|l| format!("enc{l}.")).collect();
            frozen.push("emb.".into());
            Forward::with_frozen(params, frozen)
        }
        FinetuneMode::L1 | FinetuneMode::L2 => Forward::new(params),
        other => {
            return Err(AdvError::Config(format!(
                "regularized_step called with mode {other:?}"
            )))
        }
    };
    let l_s = model::parser_loss_batch(config, &mut fwd, labeled)?;
    let total = match ft.mode {
        FinetuneMode::Freeze => l_s,
        _ => {
            let mut acc: Option<NodeId> = None;
            for name in enc_names {
                let p = fwd.p(&name)?;
                let snapshot = pretrained
                    .get(&name)
                    .ok_or_else(|| AdvError::Config(format!("snapshot missing {name}")))?
                    .clone();
                let pre = fwd.g.constant(snapshot);
                let diff = fwd.g.apply(Op::Sub(p, pre))?;
                let term = match ft.mode {
                    FinetuneMode::L1 => {
                        let a = fwd.g.apply(Op::Abs(diff))?;
                        fwd.g.apply(Op::Sum(a))?
                    }
                    _ => {
                        let sq = fwd.g.apply(Op::Mul(diff, diff))?;
                        fwd.g.apply(Op::Sum(sq))?
                    }
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => fwd.g.apply(Op::Add(a, term))?,
                });
            }
            let penalty = fwd.g.apply(Op::Scale(acc.expect("encoder params"), ft.norm_weight))?;
            fwd.g.apply(Op::Add(l_s, penalty))?
        }
    };
    let l_s_v = fwd.g.value(l_s).scalar_value();
    let grads = fwd.g.backward(total)?;
    sgd_adamw_step(params, &grads, state, hyper)?;
    Ok(l_s_v)
}

/// Exact-match accuracy of greedy decoding over a prepared dev slice.
pub fn dev_exact_match(
    config: &ModelConfig,
    params: &ParamSet,
    ontology: &parsefmt::Ontology,
    dev: &[PreparedExample],
) -> Result<f64, AdvError> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for item in dev {
        let actions = model::greedy_decode(
            config,
            params,
            ontology,
            &item.query,
            config.max_decode_steps,
        )?;
        if let Ok(tree) = parsefmt::from_actions(&actions, item.words.len()) {
            if let Ok(s) = parsefmt::serialize(&tree, &item.words) {
                if s == item.gold_parse {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / dev.len() as f64)
}

pub struct FinetuneOutput {
    pub params: ParamSet,
    pub lagrangian: LagrangianState,
    pub best_dev_em: f64,
}

/// Full finetuning loop: labeled L0 batches, optional 1:1 adversary
/// alternation, early stopping on L0 dev EM with best-snapshot restore.
pub fn finetune(
    init: &ParamSet,
    corpus: &Corpus,
    config: &ModelConfig,
    ft: &FinetuneConfig,
) -> Result<FinetuneOutput, AdvError> {
    let grammar = &corpus.grammar;
    let vocab = SubwordVocab::from_grammar(grammar);
    let labeled_pool: Vec<PreparedExample> = corpus
        .split("L0", Split::Train)
        .iter()
        .map(|e| model::prepare_example(grammar, &vocab, e))
        .collect::<Result<_, _>>()?;
    if labeled_pool.is_empty() {
        return Err(AdvError::NoLabeled("L0".into()));
    }
    let dev_pool: Vec<PreparedExample> = corpus
        .split("L0", Split::Dev)
        .iter()
        .take(ft.eval_examples)
        .map(|e| model::prepare_example(grammar, &vocab, e))
        .collect::<Result<_, _>>()?;
    // unlabeled adversary pools: queries from every language's train split
    let unlabeled_pools: Vec<Vec<UnlabeledQuery>> = grammar
        .languages
        .iter()
        .map(|spec| {
            corpus
                .split(&spec.id, Split::Train)
                .iter()
                .map(|e| {
                    let p = model::prepare_example(grammar, &vocab, e)?;
                    Ok(UnlabeledQuery {
                        query: p.query,
                        word_lang_ids: p.word_lang_ids,
                    })
                })
                .collect::<Result<Vec<_>, AdvError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut params = init.clone();
    let mut gen_state = AdamWState::new();
    let mut adv_state = AdamWState::new();
    let gen_hyper = AdamWHyper {
        lr: ft.lr,
        weight_decay: ft.weight_decay,
        ..AdamWHyper::default()
    };
    let adv_hyper = AdamWHyper {
        lr: ft.adversary_lr,
        ..AdamWHyper::default()
    };
    let mut lagr = LagrangianState::new(ft.lambda0, ft.epsilon, ft.lambda_lr);
    let root = Pcg32::new(ft.seed).split("finetune");

    let adversarial = matches!(
        ft.mode,
        FinetuneMode::FixedLambda | FinetuneMode::Constrained
    );
    let mut best_em = f64::NEG_INFINITY;
    let mut best_params = params.clone();

    for step in 0..ft.steps {
        let mut rng = root.split(&format!("step{step}"));
        let labeled: Vec<&PreparedExample> = (0..ft.batch_size)
            .map(|_| &labeled_pool[rng.gen_range(labeled_pool.len())])
            .collect();

        let l_d_trace;
        if adversarial {
            let batch = build_adversarial_batch(&unlabeled_pools, ft.batch_size, &mut rng);
            let l_d = adversary_step(
                config,
                &mut params,
                &batch,
                ft.adversary,
                &mut adv_state,
                &adv_hyper,
            )?;
            lagr.trace.push(TraceRow {
                step,
                phase: "adversary".into(),
                l_s: f64::NAN,
                l_d: Some(l_d),
                lambda: lagr.lambda,
                epsilon: lagr.epsilon,
                dev_em: None,
            });
            let gen_batch = build_adversarial_batch(&unlabeled_pools, ft.batch_size, &mut rng);
            let (l_s, l_d) = match ft.mode {
                FinetuneMode::Constrained => lagrangian_generator_step(
                    config,
                    &mut params,
                    &mut lagr,
                    &labeled,
                    &gen_batch,
                    ft.adversary,
                    &mut gen_state,
                    &gen_hyper,
                )?,
                _ => fixed_lambda_generator_step(
                    config,
                    &mut params,
                    ft.lambda0,
                    &labeled,
                    &gen_batch,
                    ft.adversary,
                    &mut gen_state,
                    &gen_hyper,
                )?,
            };
            l_d_trace = Some((l_s, l_d));
        } else {
            let l_s = match ft.mode {
                FinetuneMode::None => {
                    let mut fwd = Forward::new(&params);
                    let loss = model::parser_loss_batch(config, &mut fwd, &labeled)?;
                    let v = fwd.g.value(loss).scalar_value();
                    let grads = fwd.g.backward(loss)?;
                    sgd_adamw_step(&mut params, &grads, &mut gen_state, &gen_hyper)?;
                    v
                }
                _ => regularized_step(
                    config,
                    &mut params,
                    init,
                    ft,
                    &labeled,
                    &mut gen_state,
                    &gen_hyper,
                )?,
            };
            l_d_trace = Some((l_s, f64::NAN));
        }

        let evaluate_now = ft.eval_every > 0
            && ((step + 1) % ft.eval_every == 0 || step + 1 == ft.steps)
            && !dev_pool.is_empty();
        let dev_em = if evaluate_now {
            let em = dev_exact_match(config, &params, &grammar.ontology, &dev_pool)?;
            if em >= best_em {
                best_em = em;
                best_params = params.clone();
            }
            Some(em)
        } else {
            None
        };

        let (l_s, l_d) = l_d_trace.expect("generator ran");
        lagr.trace.push(TraceRow {
            step,
            phase: "generator".into(),
            l_s,
            l_d: if l_d.is_nan() { None } else { Some(l_d) },
            lambda: lagr.lambda,
            epsilon: lagr.epsilon,
            dev_em,
        });
    }

    if best_em.is_finite() {
        params = best_params;
    } else {
        best_em = 0.0;
    }
    Ok(FinetuneOutput {
        params,
        lagrangian: lagr,
        best_dev_em: best_em,
    })
}
