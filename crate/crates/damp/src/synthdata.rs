//! Deterministic pseudo-multilingual corpus generation.
//!
//! A grammar holds an ontology, per-intent templates over concept ids, and
//! one surface lexicon per language. Languages are concept-level bijections
//! of each other, so translation is exact relexicalization and the gold
//! parses of any two languages coincide under it. One cognate pair shares a
//! configured fraction of surface forms to make multi-class language
//! discrimination exploitable without aligning to the labeled language.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsefmt::{self, Child, Ontology, ParseTree};
use crate::rng::Pcg32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown language {0}")]
    UnknownLanguage(String),
    #[error("no lexicon entry for surface {surface:?} in language {lang}")]
    MissingLexicon { surface: String, lang: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt corpus file {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Parse(#[from] parsefmt::ParseError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub num_intents: usize,
    pub num_slots: usize,
    pub templates_per_intent: usize,
    pub num_languages: usize,
    pub values_per_slot: usize,
    pub shared_carriers: usize,
    /// Languages sharing surface forms (the cognate pair), by index.
    pub cognate_pair: Option<(usize, usize)>,
    pub cognate_fraction: f64,
    /// Per-token switch probability for the codeswitched test set.
    pub codeswitch_probability: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            num_intents: 8,
            num_slots: 8,
            templates_per_intent: 3,
            num_languages: 5,
            values_per_slot: 6,
            shared_carriers: 16,
            cognate_pair: Some((3, 4)),
            cognate_fraction: 0.8,
            codeswitch_probability: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateItem {
    /// A fixed carrier word (concept id).
    Carrier(usize),
    /// A slot filled by a value from the slot's lexicon.
    Slot(usize),
    /// A slot filled by a nested intent phrase (flat template only).
    NestedIntent { slot: usize, intent: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub intent: usize,
    pub items: Vec<TemplateItem>,
}

/// One pseudo-language: a bijection concept id -> surface token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub cognate_parent: Option<usize>,
    pub lexicon: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grammar {
    pub config: GrammarConfig,
    pub seed: u64,
    pub ontology: Ontology,
    pub languages: Vec<LanguageSpec>,
    pub templates: Vec<Template>,
    /// Slot id -> list of values, each a short concept sequence.
    pub slot_values: Vec<Vec<Vec<usize>>>,
    pub num_concepts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Dev, Split::Test]
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// JSONL example schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub lang: String,
    pub words: Vec<String>,
    pub token_langs: Vec<String>,
    pub parse: String,
}

impl Example {
    pub fn tree(&self, ontology: &Ontology) -> Result<ParseTree, parsefmt::ParseError> {
        parsefmt::parse_top(&self.parse, ontology, &self.words)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitextPair {
    pub src_id: String,
    pub tgt_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: GrammarConfig,
    pub grammar_seed: u64,
    pub corpus_seed: u64,
    pub sizes: usize,
    pub counts: BTreeMap<String, usize>,
    /// Test examples whose surface string also occurs in train, per language.
    pub train_test_duplicates: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub grammar: Grammar,
    pub meta: CorpusMeta,
    pub examples: BTreeMap<(String, Split), Vec<Example>>,
    pub bitext: Vec<BitextPair>,
    pub codeswitched_test: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, lang: &str, split: Split) -> &[Example] {
        self.examples
            .get(&(lang.to_string(), split))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn languages(&self) -> Vec<String> {
        self.grammar.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn example_by_id(&self, id: &str) -> Option<&Example> {
        self.examples.values().flatten().find(|e| e.id == id)
    }

    /// Bitext pairs resolved to examples; pairs the L0 train split with each
    /// other language's train split index-by-index.
    pub fn bitext_examples(&self) -> Vec<(&Example, &Example)> {
        let mut by_id: BTreeMap<&str, &Example> = BTreeMap::new();
        for e in self.examples.values().flatten() {
            by_id.insert(&e.id, e);
        }
        self.bitext
            .iter()
            .filter_map(|p| {
                Some((
                    *by_id.get(p.src_id.as_str())?,
                    *by_id.get(p.tgt_id.as_str())?,
                ))
            })
            .collect()
    }
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const LANG_SUFFIXES: &[&str] = &["", "u", "esh", "on", "ika", "ette", "ar", "iv", "ol", "ume"];

pub fn build_grammar(config: &GrammarConfig, seed: u64) -> Result<Grammar, DataError> {
    if config.num_intents < 4 {
        return Err(DataError::Config(format!(
            "need at least 4 intents, got {}",
            config.num_intents
        )));
    }
    if config.num_slots < 4 {
        return Err(DataError::Config(format!(
            "need at least 4 slots, got {}",
            config.num_slots
        )));
    }
    if config.templates_per_intent < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 templates per intent, got {}",
            config.templates_per_intent
        )));
    }
    if config.num_languages < 3 {
        return Err(DataError::Config(format!(
            "need at least 3 languages (one labeled plus two unlabeled for the \
             multi-class comparison), got {}",
            config.num_languages
        )));
    }
    if config.num_languages > LANG_SUFFIXES.len() {
        return Err(DataError::Config(format!(
            "at most {} languages supported",
            LANG_SUFFIXES.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.cognate_fraction) {
        return Err(DataError::Config("cognate fraction outside [0, 1]".into()));
    }
    if let Some((a, b)) = config.cognate_pair {
        if a == b || a >= config.num_languages || b >= config.num_languages || a == 0 || b == 0 {
            return Err(DataError::Config(format!(
                "invalid cognate pair ({a}, {b})"
            )));
        }
    }

    let root = Pcg32::new(seed).split("grammar");
    let ontology = Ontology::new(
        (0..config.num_intents).map(|i| format!("INTENT_{i}")).collect(),
        (0..config.num_slots).map(|i| format!("SLOT_{i}")).collect(),
    )
    .map_err(|e| DataError::Config(e.to_string()))?;

    // dedicated head concepts make intent identity surface-recoverable
    let intent_heads = 2 * config.num_intents;
    let value_concepts: usize = config.num_slots * config.values_per_slot * 2;
    let specific_concepts = intent_heads + config.shared_carriers;
    let total_concepts = specific_concepts + value_concepts;

    let mut word_rng = root.split("base-words");
    // intent heads and carriers get language-specific stems; slot values
    // share one surface across all languages (the named-entity/number
    // analogue that anchors cross-lingual alignment)
    let bases = generate_base_words(
        &mut word_rng,
        specific_concepts * config.num_languages + value_concepts,
    );

    // slot value lexicons: 1-2 concept words per value
    let mut value_rng = root.split("slot-values");
    let mut slot_values = Vec::with_capacity(config.num_slots);
    let mut next_value_concept = specific_concepts;
    for _ in 0..config.num_slots {
        let mut values = Vec::with_capacity(config.values_per_slot);
        for _ in 0..config.values_per_slot {
            let len = 1 + value_rng.gen_range(2);
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(next_value_concept);
                next_value_concept += 1;
            }
            values.push(v);
        }
        slot_values.push(values);
    }
    debug_assert!(next_value_concept <= total_concepts);

    let mut tmpl_rng = root.split("templates");
    let mut templates = Vec::new();
    for intent in 0..config.num_intents {
        for t in 0..config.templates_per_intent {
            let mut items = vec![TemplateItem::Carrier(2 * intent + t % 2)];
            let num_slots_here = 1 + tmpl_rng.gen_range(2);
            for s in 0..num_slots_here {
                if tmpl_rng.bernoulli(0.6) {
                    let c = intent_heads + tmpl_rng.gen_range(config.shared_carriers);
                    items.push(TemplateItem::Carrier(c));
                }
                let slot = tmpl_rng.gen_range(config.num_slots);
                // flat first template per intent; nesting only afterwards
                if t > 0 && s == num_slots_here - 1 && tmpl_rng.bernoulli(0.5) {
                    let nested = tmpl_rng.gen_range(config.num_intents);
                    items.push(TemplateItem::NestedIntent { slot, intent: nested });
                } else {
                    items.push(TemplateItem::Slot(slot));
                }
            }
            templates.push(Template { intent, items });
        }
    }

    // per-language surface forms: base + language suffix; the cognate child
    // copies its parent's surface for the configured fraction of concepts
    let mut languages = Vec::with_capacity(config.num_languages);
    let shared_values = &bases[specific_concepts * config.num_languages..];
    for l in 0..config.num_languages {
        let lexicon: Vec<String> = (0..total_concepts)
            .map(|c| {
                if c < specific_concepts {
                    format!("{}{}", bases[l * specific_concepts + c], LANG_SUFFIXES[l])
                } else {
                    shared_values[c - specific_concepts].clone()
                }
            })
            .collect();
        languages.push(LanguageSpec {
            id: format!("L{l}"),
            cognate_parent: None,
            lexicon,
        });
    }
    if let Some((parent, child)) = config.cognate_pair {
        // the cognate pair additionally shares a fraction of the
        // language-specific forms (heads and carriers)
        let shared = (config.cognate_fraction * specific_concepts as f64).round() as usize;
        let mut idx: Vec<usize> = (0..specific_concepts).collect();
        let mut cog_rng = root.split("cognates");
        cog_rng.shuffle(&mut idx);
        for &c in idx.iter().take(shared) {
            languages[child].lexicon[c] = languages[parent].lexicon[c].clone();
        }
        languages[child].cognate_parent = Some(parent);
    }

    Ok(Grammar {
        config: config.clone(),
        seed,
        ontology,
        languages,
        templates,
        slot_values,
        num_concepts: total_concepts,
    })
}

/// Pronounceable CV(C) base words, mutually prefix-free so no suffixed
/// surface form can collide with another base across languages.
fn generate_base_words(rng: &mut Pcg32, count: usize) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    while words.len() < count {
        let syllables = 2 + rng.gen_range(2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*rng.choose(CONSONANTS));
            w.push(*rng.choose(VOWELS));
        }
        let prefix_free = !words.iter().any(|e: &String| e.starts_with(&w) || w.starts_with(e.as_str()));
        if prefix_free && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct ConceptExample {
    concepts: Vec<usize>,
    tree: ParseTree,
}

fn realize_intent(
    grammar: &Grammar,
    intent: usize,
    allow_nested: bool,
    rng: &mut Pcg32,
    concepts: &mut Vec<usize>,
) -> ParseTree {
    let candidates: Vec<&Template> = grammar
        .templates
        .iter()
        .filter(|t| {
            t.intent == intent
                && (allow_nested
                    || !t
                        .items
                        .iter()
                        .any(|i| matches!(i, TemplateItem::NestedIntent { .. })))
        })
        .collect();
    let template = *rng.choose(&candidates);
    let mut children = Vec::new();
    for item in &template.items {
        match item {
            TemplateItem::Carrier(c) => {
                concepts.push(*c);
                children.push(Child::Word(concepts.len() - 1));
            }
            TemplateItem::Slot(slot) => {
                let value = rng.choose(&grammar.slot_values[*slot]);
                let mut slot_children = Vec::new();
                for &c in value {
                    concepts.push(c);
                    slot_children.push(Child::Word(concepts.len() - 1));
                }
                children.push(Child::Node(ParseTree::slot(
                    format!("SLOT_{slot}"),
                    slot_children,
                )));
            }
            TemplateItem::NestedIntent { slot, intent } => {
                let sub = realize_intent(grammar, *intent, false, rng, concepts);
                children.push(Child::Node(ParseTree::slot(
                    format!("SLOT_{slot}"),
                    vec![Child::Node(sub)],
                )));
            }
        }
    }
    ParseTree::intent(format!("INTENT_{intent}"), children)
}

fn realize(grammar: &Grammar, rng: &mut Pcg32) -> ConceptExample {
    let intent = rng.gen_range(grammar.config.num_intents);
    let mut concepts = Vec::new();
    let tree = realize_intent(grammar, intent, true, rng, &mut concepts);
    ConceptExample { concepts, tree }
}

fn lang_index(grammar: &Grammar, lang: &str) -> Result<usize, DataError> {
    grammar
        .languages
        .iter()
        .position(|l| l.id == lang)
        .ok_or_else(|| DataError::UnknownLanguage(lang.to_string()))
}

fn surface(
    grammar: &Grammar,
    ce: &ConceptExample,
    lang: usize,
    id: String,
) -> Result<Example, DataError> {
    let spec = &grammar.languages[lang];
    let words: Vec<String> = ce
        .concepts
        .iter()
        .map(|&c| spec.lexicon[c].clone())
        .collect();
    let parse = parsefmt::serialize(&ce.tree, &words)?;
    Ok(Example {
        id,
        lang: spec.id.clone(),
        token_langs: vec![spec.id.clone(); words.len()],
        words,
        parse,
    })
}

pub fn sample_query(grammar: &Grammar, language: &str, seed: u64) -> Result<Example, DataError> {
    let lang = lang_index(grammar, language)?;
    let mut rng = Pcg32::new(seed).split("sample-query");
    let ce = realize(grammar, &mut rng);
    surface(grammar, &ce, lang, format!("q-{language}-{seed}"))
}

fn reverse_lexicons(grammar: &Grammar) -> BTreeMap<&str, BTreeMap<&str, usize>> {
    let mut maps = BTreeMap::new();
    for spec in &grammar.languages {
        let mut m = BTreeMap::new();
        for (c, s) in spec.lexicon.iter().enumerate() {
            // cognate duplicates resolve to the same concept either way
            m.entry(s.as_str()).or_insert(c);
        }
        maps.insert(spec.id.as_str(), m);
    }
    maps
}

/// Concept-by-concept relexicalization into the target language. Token
/// count and parse structure are preserved exactly.
pub fn translate(grammar: &Grammar, example: &Example, target: &str) -> Result<Example, DataError> {
    let tgt = lang_index(grammar, target)?;
    let rev = reverse_lexicons(grammar);
    let mut words = Vec::with_capacity(example.words.len());
    for (w, tl) in example.words.iter().zip(&example.token_langs) {
        let map = rev
            .get(tl.as_str())
            .ok_or_else(|| DataError::UnknownLanguage(tl.clone()))?;
        let concept = *map.get(w.as_str()).ok_or_else(|| DataError::MissingLexicon {
            surface: w.clone(),
            lang: tl.clone(),
        })?;
        words.push(grammar.languages[tgt].lexicon[concept].clone());
    }
    let tree = example.tree(&grammar.ontology)?;
    let parse = parsefmt::serialize(&tree, &words)?;
    Ok(Example {
        id: example.id.clone(),
        lang: grammar.languages[tgt].id.clone(),
        token_langs: vec![grammar.languages[tgt].id.clone(); words.len()],
        words,
        parse,
    })
}

/// Intra-sentential codeswitching: each token independently flips to the
/// second language's surface form with probability `p`. The parse tree is
/// unchanged (word indices are stable under relexicalization).
pub fn codeswitch(
    grammar: &Grammar,
    example: &Example,
    second: &str,
    p: f64,
    seed: u64,
) -> Result<Example, DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::Config(format!("switch probability {p} outside [0, 1]")));
    }
    let tgt = lang_index(grammar, second)?;
    let rev = reverse_lexicons(grammar);
    let mut rng = Pcg32::new(seed).split("codeswitch");
    let mut words = example.words.clone();
    let mut token_langs = example.token_langs.clone();
    for i in 0..words.len() {
        if rng.bernoulli(p) {
            let map = rev
                .get(token_langs[i].as_str())
                .ok_or_else(|| DataError::UnknownLanguage(token_langs[i].clone()))?;
            let concept = *map
                .get(words[i].as_str())
                .ok_or_else(|| DataError::MissingLexicon {
                    surface: words[i].clone(),
                    lang: token_langs[i].clone(),
                })?;
            words[i] = grammar.languages[tgt].lexicon[concept].clone();
            token_langs[i] = grammar.languages[tgt].id.clone();
        }
    }
    let tree = example.tree(&grammar.ontology)?;
    let parse = parsefmt::serialize(&tree, &words)?;
    let langs: BTreeSet<&String> = token_langs.iter().collect();
    let lang = if langs.len() == 1 {
        (*langs.iter().next().unwrap()).clone()
    } else {
        format!("{}+{}", example.lang, grammar.languages[tgt].id)
    };
    Ok(Example {
        id: example.id.clone(),
        lang,
        words,
        token_langs,
        parse,
    })
}

/// Deterministic subword split: chunks of at most 4 characters; non-initial
/// chunks carry a `##` continuation marker.
pub fn tokenize_subwords(word: &str) -> Vec<String> {
    assert!(!word.is_empty(), "tokenize_subwords on empty word");
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(4)
        .enumerate()
        .map(|(i, chunk)| {
            let piece: String = chunk.iter().collect();
            if i == 0 {
                piece
            } else {
                format!("##{piece}")
            }
        })
        .collect()
}

pub fn detokenize_subwords(subwords: &[String]) -> String {
    subwords
        .iter()
        .map(|s| s.strip_prefix("##").unwrap_or(s))
        .collect()
}

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Subword vocabulary over every surface form of every language, plus the
/// special tokens, in a deterministic order.
pub fn build_subword_vocab(grammar: &Grammar) -> Vec<String> {
    let mut chunks = BTreeSet::new();
    for spec in &grammar.languages {
        for w in &spec.lexicon {
            for piece in tokenize_subwords(w) {
                chunks.insert(piece);
            }
        }
    }
    let mut vocab = vec![
        PAD_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        MASK_TOKEN.to_string(),
        SEP_TOKEN.to_string(),
    ];
    vocab.extend(chunks);
    vocab
}

fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), DataError> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| DataError::Corrupt {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Generate and write the full corpus: per-language per-split JSONL, the
/// bitext pairing file, the codeswitched test file, the grammar, and a
/// metadata record. 70/10/20 split by index.
pub fn emit_corpus(
    grammar: &Grammar,
    sizes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusMeta, DataError> {
    if sizes == 0 {
        return Err(DataError::Config("sizes must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let root = Pcg32::new(seed).split("corpus");

    let n_train = sizes * 7 / 10;
    let n_dev = sizes / 10;
    let n_test = sizes - n_train - n_dev;

    let mut per_lang: BTreeMap<(usize, Split), Vec<Example>> = BTreeMap::new();
    let mut bitext = Vec::new();
    let mut rng = root.split("examples");
    for i in 0..sizes {
        let ce = realize(grammar, &mut rng);
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        for (l, spec) in grammar.languages.iter().enumerate() {
            let id = format!("{}-{}-{:05}", spec.id, split, i);
            let e = surface(grammar, &ce, l, id)?;
            per_lang.entry((l, split)).or_default().push(e);
        }
        if split == Split::Train {
            for spec in grammar.languages.iter().skip(1) {
                bitext.push(BitextPair {
                    src_id: format!("L0-{split}-{i:05}"),
                    tgt_id: format!("{}-{split}-{:05}", spec.id, i),
                });
            }
        }
    }

    // codeswitched test set: every non-L0 test example mixed with L0
    let mut cs_rng = root.split("codeswitch");
    let mut codeswitched = Vec::new();
    for (l, _spec) in grammar.languages.iter().enumerate().skip(1) {
        for e in &per_lang[&(l, Split::Test)] {
            let mut cs = codeswitch(
                grammar,
                e,
                "L0",
                grammar.config.codeswitch_probability,
                cs_rng.next_u64(),
            )?;
            cs.id = format!("cs-{}", e.id);
            codeswitched.push(cs);
        }
    }

    let mut counts = BTreeMap::new();
    let mut duplicates = BTreeMap::new();
    for (l, spec) in grammar.languages.iter().enumerate() {
        let train_surfaces: BTreeSet<String> = per_lang[&(l, Split::Train)]
            .iter()
            .map(|e| e.words.join(" "))
            .collect();
        let dup = per_lang[&(l, Split::Test)]
            .iter()
            .filter(|e| train_surfaces.contains(&e.words.join(" ")))
            .count();
        duplicates.insert(spec.id.clone(), dup);
        for split in Split::all() {
            counts.insert(
                format!("{}.{}", spec.id, split),
                per_lang[&(l, split)].len(),
            );
        }
    }
    counts.insert("codeswitch.test".into(), codeswitched.len());
    counts.insert("bitext".into(), bitext.len());
    let _ = n_test;

    for ((l, split), examples) in &per_lang {
        let path = out_dir.join(format!("{}.{}.jsonl", grammar.languages[*l].id, split));
        write_jsonl(&path, examples)?;
    }
    write_jsonl(&out_dir.join("codeswitch.test.jsonl"), &codeswitched)?;

    let bitext_path = out_dir.join("bitext.jsonl");
    let mut btx = String::new();
    for p in &bitext {
        btx.push_str(&serde_json::to_string(p).expect("pair serializes"));
        btx.push('\n');
    }
    fs::write(&bitext_path, btx).map_err(io_err(&bitext_path))?;

    let grammar_path = out_dir.join("grammar.json");
    fs::write(
        &grammar_path,
        serde_json::to_string_pretty(grammar).expect("grammar serializes"),
    )
    .map_err(io_err(&grammar_path))?;

    let meta = CorpusMeta {
        config: grammar.config.clone(),
        grammar_seed: grammar.seed,
        corpus_seed: seed,
        sizes,
        counts,
        train_test_duplicates: duplicates,
    };
    let meta_path = out_dir.join("metadata.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(io_err(&meta_path))?;
    Ok(meta)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let grammar_path = dir.join("grammar.json");
    let grammar: Grammar = serde_json::from_str(
        &fs::read_to_string(&grammar_path).map_err(io_err(&grammar_path))?,
    )
    .map_err(|e| DataError::Corrupt {
        path: grammar_path.display().to_string(),
        message: e.to_string(),
    })?;
    let meta_path = dir.join("metadata.json");
    let meta: CorpusMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)
            .map_err(|e| DataError::Corrupt {
                path: meta_path.display().to_string(),
                message: e.to_string(),
            })?;

    let mut examples = BTreeMap::new();
    for spec in &grammar.languages {
        for split in Split::all() {
            let path = dir.join(format!("{}.{}.jsonl", spec.id, split));
            examples.insert((spec.id.clone(), split), read_jsonl(&path)?);
        }
    }
    let codeswitched_test = read_jsonl(&dir.join("codeswitch.test.jsonl"))?;

    let bitext_path = dir.join("bitext.jsonl");
    let bitext_text = fs::read_to_string(&bitext_path).map_err(io_err(&bitext_path))?;
    let bitext: Vec<BitextPair> = bitext_text
        .lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| DataError::Corrupt {
                path: bitext_path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;

    Ok(Corpus {
        grammar,
        meta,
        examples,
        bitext,
        codeswitched_test,
    })
}
