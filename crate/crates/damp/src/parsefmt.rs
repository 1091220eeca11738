//! TOP-style hierarchical parses: bracket-text codec, pointer/generate
//! action encoding, and the exact-match metric.
//!
//! Canonical text is single-space separated with uppercase `IN:`/`SL:`
//! labels, e.g. `[IN:SEND_MESSAGE [SL:GROUP travail]]`. Word leaves are
//! 0-based indices into the query; in action form a copy of word 5 renders
//! as `<pt-5>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("parse error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown label {label} at byte {offset}")]
    UnknownLabel { offset: usize, label: String },
    #[error("slot label at root (root must be an intent)")]
    SlotAtRoot,
    #[error("word index {index} out of range for query of {len} words")]
    WordOutOfRange { index: usize, len: usize },
    #[error("unbalanced action sequence: {0}")]
    Unbalanced(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Intent,
    Slot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Child {
    Node(ParseTree),
    /// 0-based index of a query word covered by this leaf.
    Word(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    pub kind: NodeKind,
    pub label: String,
    pub children: Vec<Child>,
}

/// Declared label space. Intent and slot label sets must be disjoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub intents: Vec<String>,
    pub slots: Vec<String>,
}

impl Ontology {
    pub fn new(intents: Vec<String>, slots: Vec<String>) -> Result<Self, ParseError> {
        for i in &intents {
            if slots.contains(i) {
                return Err(ParseError::InvalidTree(format!(
                    "label {i} appears as both intent and slot"
                )));
            }
        }
        Ok(Ontology { intents, slots })
    }

    pub fn has_intent(&self, label: &str) -> bool {
        self.intents.iter().any(|l| l == label)
    }

    pub fn has_slot(&self, label: &str) -> bool {
        self.slots.iter().any(|l| l == label)
    }

    /// Generate-action vocabulary size: one open per intent, one per slot,
    /// plus the shared close bracket.
    pub fn num_generate_actions(&self) -> usize {
        self.intents.len() + self.slots.len() + 1
    }
}

/// Decoder target alphabet: open an intent, open a slot, close the current
/// bracket, or copy a query word by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    OpenIntent(String),
    OpenSlot(String),
    Close,
    Copy(usize),
}

pub type ActionSequence = Vec<Action>;

impl ParseTree {
    pub fn intent(label: impl Into<String>, children: Vec<Child>) -> Self {
        ParseTree {
            kind: NodeKind::Intent,
            label: label.into(),
            children,
        }
    }

    pub fn slot(label: impl Into<String>, children: Vec<Child>) -> Self {
        ParseTree {
            kind: NodeKind::Slot,
            label: label.into(),
            children,
        }
    }

    /// Structural validity: intent at root, known labels, leaf indices in
    /// range and strictly increasing in traversal order.
    pub fn validate(&self, ontology: &Ontology, query_len: usize) -> Result<(), ParseError> {
        if self.kind != NodeKind::Intent {
            return Err(ParseError::SlotAtRoot);
        }
        let mut last: Option<usize> = None;
        self.validate_node(ontology, query_len, &mut last)
    }

    fn validate_node(
        &self,
        ontology: &Ontology,
        query_len: usize,
        last: &mut Option<usize>,
    ) -> Result<(), ParseError> {
        let known = match self.kind {
            NodeKind::Intent => ontology.has_intent(&self.label),
            NodeKind::Slot => ontology.has_slot(&self.label),
        };
        if !known {
            return Err(ParseError::UnknownLabel {
                offset: 0,
                label: self.label.clone(),
            });
        }
        for child in &self.children {
            match child {
                Child::Word(i) => {
                    if *i >= query_len {
                        return Err(ParseError::WordOutOfRange {
                            index: *i,
                            len: query_len,
                        });
                    }
                    if let Some(prev) = last {
                        if *i <= *prev {
                            return Err(ParseError::InvalidTree(format!(
                                "word indices not strictly increasing: {prev} then {i}"
                            )));
                        }
                    }
                    *last = Some(*i);
                }
                Child::Node(n) => n.validate_node(ontology, query_len, last)?,
            }
        }
        Ok(())
    }
}

/// Parse canonical TOP bracket text over a known query. Leaf words resolve
/// to query indices left to right, so repeated surface words map to distinct
/// positions.
pub fn parse_top(
    text: &str,
    ontology: &Ontology,
    query_words: &[String],
) -> Result<ParseTree, ParseError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        ontology,
        query_words,
        next_word: 0,
    };
    p.skip_spaces();
    let tree = p.node(true)?;
    p.skip_spaces();
    if p.pos != p.bytes.len() {
        return Err(ParseError::Syntax {
            offset: p.pos,
            message: "trailing content after root bracket".into(),
        });
    }
    Ok(tree)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    ontology: &'a Ontology,
    query_words: &'a [String],
    next_word: usize,
}

impl<'a> Parser<'a> {
    fn skip_spaces(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos] == b' ' {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'[' | b']' => break,
                _ => self.pos += 1,
            }
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("")
    }

    fn node(&mut self, is_root: bool) -> Result<ParseTree, ParseError> {
        let open_at = self.pos;
        if self.pos >= self.bytes.len() || self.bytes[self.pos] != b'[' {
            return Err(ParseError::Syntax {
                offset: self.pos,
                message: "expected '['".into(),
            });
        }
        self.pos += 1;
        let label_at = self.pos;
        let tag = self.token();
        let (kind, label) = if let Some(l) = tag.strip_prefix("IN:") {
            (NodeKind::Intent, l)
        } else if let Some(l) = tag.strip_prefix("SL:") {
            (NodeKind::Slot, l)
        } else {
            return Err(ParseError::Syntax {
                offset: label_at,
                message: format!("expected IN: or SL: prefixed label, got {tag:?}"),
            });
        };
        if is_root && kind == NodeKind::Slot {
            return Err(ParseError::SlotAtRoot);
        }
        let known = match kind {
            NodeKind::Intent => self.ontology.has_intent(label),
            NodeKind::Slot => self.ontology.has_slot(label),
        };
        if !known {
            return Err(ParseError::UnknownLabel {
                offset: label_at,
                label: label.to_string(),
            });
        }

        let mut children = Vec::new();
        loop {
            self.skip_spaces();
            if self.pos >= self.bytes.len() {
                return Err(ParseError::Syntax {
                    offset: open_at,
                    message: "unbalanced brackets: missing ']'".into(),
                });
            }
            match self.bytes[self.pos] {
                b']' => {
                    self.pos += 1;
                    break;
                }
                b'[' => children.push(Child::Node(self.node(false)?)),
                _ => {
                    let word_at = self.pos;
                    let word = self.token();
                    let idx = self.resolve_word(word, word_at)?;
                    children.push(Child::Word(idx));
                }
            }
        }
        Ok(ParseTree {
            kind,
            label: label.to_string(),
            children,
        })
    }

    fn resolve_word(&mut self, word: &str, offset: usize) -> Result<usize, ParseError> {
        for i in self.next_word..self.query_words.len() {
            if self.query_words[i] == word {
                self.next_word = i + 1;
                return Ok(i);
            }
        }
        Err(ParseError::Syntax {
            offset,
            message: format!("leaf word {word:?} not found in remaining query words"),
        })
    }
}

/// Canonical serialization: single spaces, uppercase prefixed labels, no
/// trailing whitespace.
pub fn serialize(tree: &ParseTree, query_words: &[String]) -> Result<String, ParseError> {
    let mut out = String::new();
    write_node(tree, query_words, &mut out)?;
    Ok(out)
}

fn write_node(tree: &ParseTree, query_words: &[String], out: &mut String) -> Result<(), ParseError> {
    out.push('[');
    out.push_str(match tree.kind {
        NodeKind::Intent => "IN:",
        NodeKind::Slot => "SL:",
    });
    out.push_str(&tree.label);
    for child in &tree.children {
        out.push(' ');
        match child {
            Child::Word(i) => {
                let w = query_words.get(*i).ok_or(ParseError::WordOutOfRange {
                    index: *i,
                    len: query_words.len(),
                })?;
                out.push_str(w);
            }
            Child::Node(n) => write_node(n, query_words, out)?,
        }
    }
    out.push(']');
    Ok(())
}

/// Preorder linearization: open bracket per node, copy per leaf, close per
/// bracket.
pub fn to_actions(tree: &ParseTree) -> ActionSequence {
    let mut actions = Vec::new();
    linearize(tree, &mut actions);
    actions
}

fn linearize(tree: &ParseTree, out: &mut ActionSequence) {
    out.push(match tree.kind {
        NodeKind::Intent => Action::OpenIntent(tree.label.clone()),
        NodeKind::Slot => Action::OpenSlot(tree.label.clone()),
    });
    for child in &tree.children {
        match child {
            Child::Word(i) => out.push(Action::Copy(*i)),
            Child::Node(n) => linearize(n, out),
        }
    }
    out.push(Action::Close);
}

/// Exact inverse of `to_actions`: rebuild the tree with a bracket stack.
pub fn from_actions(actions: &[Action], query_len: usize) -> Result<ParseTree, ParseError> {
    let mut stack: Vec<ParseTree> = Vec::new();
    let mut root: Option<ParseTree> = None;
    for (i, action) in actions.iter().enumerate() {
        if root.is_some() {
            return Err(ParseError::Unbalanced(format!(
                "action {i} after root bracket closed"
            )));
        }
        match action {
            Action::OpenIntent(l) => stack.push(ParseTree::intent(l.clone(), vec![])),
            Action::OpenSlot(l) => {
                if stack.is_empty() {
                    return Err(ParseError::SlotAtRoot);
                }
                stack.push(ParseTree::slot(l.clone(), vec![]));
            }
            Action::Copy(idx) => {
                if *idx >= query_len {
                    return Err(ParseError::WordOutOfRange {
                        index: *idx,
                        len: query_len,
                    });
                }
                match stack.last_mut() {
                    Some(top) => top.children.push(Child::Word(*idx)),
                    None => {
                        return Err(ParseError::Unbalanced(format!(
                            "copy action {i} outside any bracket"
                        )))
                    }
                }
            }
            Action::Close => {
                let node = stack.pop().ok_or_else(|| {
                    ParseError::Unbalanced(format!("close at action {i} with empty stack"))
                })?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Child::Node(node)),
                    None => root = Some(node),
                }
            }
        }
    }
    match (root, stack.is_empty()) {
        (Some(r), true) => Ok(r),
        _ => Err(ParseError::Unbalanced("unclosed brackets at end".into())),
    }
}

/// Render an action sequence as space-separated tokens; copies spell
/// `<pt-K>`.
pub fn render_actions(actions: &[Action]) -> String {
    actions
        .iter()
        .map(|a| match a {
            Action::OpenIntent(l) => format!("[IN:{l}"),
            Action::OpenSlot(l) => format!("[SL:{l}"),
            Action::Close => "]".to_string(),
            Action::Copy(i) => format!("<pt-{i}>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match: canonical serializations are identical.
pub fn exact_match(
    predicted: &ParseTree,
    gold: &ParseTree,
    query_words: &[String],
) -> Result<bool, ParseError> {
    Ok(serialize(predicted, query_words)? == serialize(gold, query_words)?)
}

/// Root intent label.
pub fn intent_of(tree: &ParseTree) -> &str {
    &tree.label
}
