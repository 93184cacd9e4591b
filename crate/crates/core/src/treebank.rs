//! Sentiment treebank ingestion: PTB-bracketed phrase trees with a 0–4
//! sentiment label on every node.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TreebankError {
    #[error("sentiment label {0} outside 0..=4")]
    InvalidLabel(i64),
    #[error("phrase tree leaf token {0:?} is empty or contains whitespace/parentheses")]
    InvalidToken(String),
    #[error("internal node needs at least one child")]
    NoChildren,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {error}")]
    Parse {
        path: PathBuf,
        line: usize,
        error: ParseError,
    },
}

/// Fine-grained sentiment class, 0 (very negative) through 4 (very positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SentimentLabel(u8);

pub const CLASS_NAMES: [&str; 5] = [
    "very negative",
    "negative",
    "neutral",
    "positive",
    "very positive",
];

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 5] = [
        SentimentLabel(0),
        SentimentLabel(1),
        SentimentLabel(2),
        SentimentLabel(3),
        SentimentLabel(4),
    ];

    pub fn new(value: i64) -> Result<Self, TreebankError> {
        if (0..=4).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(TreebankError::InvalidLabel(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

impl TryFrom<u8> for SentimentLabel {
    type Error = TreebankError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v as i64)
    }
}

impl From<SentimentLabel> for u8 {
    fn from(l: SentimentLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Polarity used by the binary task. Only obtainable via [`to_binary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    Negative,
    Positive,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Negative => 0,
            BinaryLabel::Positive => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Negative => "negative",
            BinaryLabel::Positive => "positive",
        }
    }
}

/// 0,1 → negative; 3,4 → positive; neutral has no binary label.
pub fn to_binary(label: SentimentLabel) -> Option<BinaryLabel> {
    match label.value() {
        0 | 1 => Some(BinaryLabel::Negative),
        3 | 4 => Some(BinaryLabel::Positive),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Leaf(String),
    Internal(Vec<PhraseTree>),
}

/// A labeled constituency node. `span_text` is the space-joined yield.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseTree {
    label: SentimentLabel,
    node: Node,
    span_text: String,
}

fn valid_token(token: &str) -> bool {
    !token.is_empty()
        && !token
            .chars()
            .any(|c| c.is_whitespace() || c == '(' || c == ')')
}

impl PhraseTree {
    pub fn leaf(label: SentimentLabel, token: impl Into<String>) -> Result<Self, TreebankError> {
        let token = token.into();
        if !valid_token(&token) {
            return Err(TreebankError::InvalidToken(token));
        }
        Ok(Self {
            label,
            span_text: token.clone(),
            node: Node::Leaf(token),
        })
    }

    pub fn internal(
        label: SentimentLabel,
        children: Vec<PhraseTree>,
    ) -> Result<Self, TreebankError> {
        if children.is_empty() {
            return Err(TreebankError::NoChildren);
        }
        let span_text = children
            .iter()
            .map(|c| c.span_text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Self {
            label,
            node: Node::Internal(children),
            span_text,
        })
    }

    pub fn label(&self) -> SentimentLabel {
        self.label
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn span_text(&self) -> &str {
        &self.span_text
    }

    pub fn children(&self) -> &[PhraseTree] {
        match &self.node {
            Node::Leaf(_) => &[],
            Node::Internal(c) => c,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node, Node::Leaf(_))
    }

    /// Nodes in pre-order.
    pub fn preorder(&self) -> Vec<&PhraseTree> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            out.push(t);
            stack.extend(t.children().iter().rev());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.preorder().len()
    }

    pub fn leaf_count(&self) -> usize {
        self.preorder().iter().filter(|t| t.is_leaf()).count()
    }

    pub fn leaves(&self) -> Vec<&str> {
        self.preorder()
            .into_iter()
            .filter_map(|t| match &t.node {
                Node::Leaf(tok) => Some(tok.as_str()),
                Node::Internal(_) => None,
            })
            .collect()
    }

    /// Canonical bracketed form: `(label child child)`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.write_into(&mut out);
        out
    }

    fn write_into(&self, out: &mut String) {
        out.push('(');
        out.push_str(&self.label.to_string());
        match &self.node {
            Node::Leaf(tok) => {
                out.push(' ');
                out.push_str(tok);
            }
            Node::Internal(children) => {
                for c in children {
                    out.push(' ');
                    c.write_into(out);
                }
            }
        }
        out.push(')');
    }
}

impl fmt::Display for PhraseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnbalancedParens,
    InvalidLabel,
    EmptyNode,
    TrailingGarbage,
    /// A bare token appears next to other children, so it has no label.
    UnlabeledToken,
    MissingTree,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} at byte {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

fn err(kind: ParseErrorKind, offset: usize) -> ParseError {
    ParseError { kind, offset }
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
}

enum Child {
    Token(String, usize),
    Tree(PhraseTree),
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn tree(&mut self) -> Result<PhraseTree, ParseError> {
        let open = self.pos;
        debug_assert_eq!(self.src[open], b'(');
        self.pos += 1;
        self.skip_ws();
        let label_at = self.pos;
        let label_tok = self.token();
        let label = match label_tok.as_bytes() {
            [d @ b'0'..=b'4'] => SentimentLabel(d - b'0'),
            _ if self.pos >= self.src.len() && label_tok.is_empty() => {
                return Err(err(ParseErrorKind::UnbalancedParens, open))
            }
            _ => return Err(err(ParseErrorKind::InvalidLabel, label_at)),
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.src.get(self.pos) {
                None => return Err(err(ParseErrorKind::UnbalancedParens, open)),
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => children.push(Child::Tree(self.tree()?)),
                Some(_) => {
                    let at = self.pos;
                    children.push(Child::Token(self.token().to_string(), at));
                }
            }
        }
        match children.len() {
            0 => Err(err(ParseErrorKind::EmptyNode, open)),
            1 if matches!(children[0], Child::Token(..)) => {
                let Some(Child::Token(tok, _)) = children.pop() else {
                    unreachable!()
                };
                Ok(PhraseTree {
                    label,
                    span_text: tok.clone(),
                    node: Node::Leaf(tok),
                })
            }
            _ => {
                let mut kids = Vec::with_capacity(children.len());
                for c in children {
                    match c {
                        Child::Tree(t) => kids.push(t),
                        Child::Token(_, at) => return Err(err(ParseErrorKind::UnlabeledToken, at)),
                    }
                }
                Ok(PhraseTree::internal(label, kids).expect("non-empty children"))
            }
        }
    }
}

/// Parses one bracketed tree, e.g. `(3 (2 It) (4 rocks))`.
pub fn parse_tree(line: &str) -> Result<PhraseTree, ParseError> {
    let mut p = Parser {
        src: line.as_bytes(),
        text: line,
        pos: 0,
    };
    p.skip_ws();
    match p.src.get(p.pos) {
        Some(b'(') => {}
        Some(b')') => return Err(err(ParseErrorKind::UnbalancedParens, p.pos)),
        _ => return Err(err(ParseErrorKind::MissingTree, p.pos)),
    }
    let tree = p.tree()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        let kind = if p.src[p.pos] == b')' {
            ParseErrorKind::UnbalancedParens
        } else {
            ParseErrorKind::TrailingGarbage
        };
        return Err(err(kind, p.pos));
    }
    Ok(tree)
}

/// Collapses whitespace runs and drops spaces adjacent to parentheses'
/// insides, giving the form [`PhraseTree::serialize`] emits.
pub fn normalize_whitespace(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.replace("( ", "(").replace(" )", ")")
}

/// Undoes the PTB bracket escapes (`-LRB-` and friends) in a span.
pub fn unescape_ptb(text: &str) -> String {
    text.split(' ')
        .map(|tok| match tok {
            "-LRB-" => "(",
            "-RRB-" => ")",
            "-LSB-" => "[",
            "-RSB-" => "]",
            "-LCB-" => "{",
            "-RCB-" => "}",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub text: String,
    pub label: SentimentLabel,
    pub is_root: bool,
}

/// One record per node in pre-order; the first is the root.
pub fn extract_phrases(tree: &PhraseTree) -> Vec<PhraseRecord> {
    tree.preorder()
        .into_iter()
        .enumerate()
        .map(|(i, t)| PhraseRecord {
            text: t.span_text.clone(),
            label: t.label,
            is_root: i == 0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// File name in the standard distribution.
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Dev => "dev.txt",
            Split::Test => "test.txt",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub trees: Vec<PhraseTree>,
}

impl Corpus {
    pub fn records(&self) -> Vec<PhraseRecord> {
        self.trees.iter().flat_map(extract_phrases).collect()
    }

    /// Root span of every tree, PTB escapes undone.
    pub fn sentences(&self) -> Vec<String> {
        self.trees
            .iter()
            .map(|t| unescape_ptb(t.span_text()))
            .collect()
    }
}

/// Parses `text` (one tree per line; blank lines skipped). `path` is only
/// used to label errors.
pub fn parse_corpus(text: &str, split: Split, path: &Path) -> Result<Corpus, TreebankError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let trees = lines
        .par_iter()
        .map(|&(i, l)| {
            parse_tree(l).map_err(|error| TreebankError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                error,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if trees.is_empty() {
        log::warn!("{}: no trees", path.display());
    }
    Ok(Corpus { split, trees })
}

pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus, TreebankError> {
    let text = fs::read_to_string(path).map_err(|source| TreebankError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, split, path)
}

/// Loads `train.txt`, `dev.txt` and `test.txt` from `dir`.
pub fn load_splits(dir: &Path) -> Result<Vec<Corpus>, TreebankError> {
    Split::ALL
        .iter()
        .map(|&s| load_corpus(&dir.join(s.file_name()), s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sentences: usize,
    pub nodes: usize,
    pub unique_phrases: usize,
    /// Node count per label 0..=4.
    pub label_histogram: [usize; 5],
    /// Root count per label 0..=4.
    pub root_histogram: [usize; 5],
    pub sentences_per_split: BTreeMap<String, usize>,
}

impl StatsReport {
    /// Flat `key = value` lines in a fixed order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sentences = {}\n", self.sentences));
        out.push_str(&format!("nodes = {}\n", self.nodes));
        out.push_str(&format!("unique_phrases = {}\n", self.unique_phrases));
        for (split, n) in &self.sentences_per_split {
            out.push_str(&format!("sentences.{split} = {n}\n"));
        }
        for (i, n) in self.label_histogram.iter().enumerate() {
            out.push_str(&format!("label.{i} = {n}\n"));
        }
        for (i, n) in self.root_histogram.iter().enumerate() {
            out.push_str(&format!("root_label.{i} = {n}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize") + "\n"
    }

    /// Largest share of roots held by a single class.
    pub fn max_root_share(&self) -> f64 {
        let total: usize = self.root_histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        *self.root_histogram.iter().max().unwrap() as f64 / total as f64
    }
}

/// Unique phrases are counted on exact span text (case-sensitive).
pub fn corpus_stats(corpora: &[Corpus]) -> StatsReport {
    let mut unique: HashSet<&str> = HashSet::new();
    let mut report = StatsReport {
        sentences: 0,
        nodes: 0,
        unique_phrases: 0,
        label_histogram: [0; 5],
        root_histogram: [0; 5],
        sentences_per_split: BTreeMap::new(),
    };
    for corpus in corpora {
        *report
            .sentences_per_split
            .entry(corpus.split.name().to_string())
            .or_default() += corpus.trees.len();
        for tree in &corpus.trees {
            report.sentences += 1;
            report.root_histogram[tree.label.index()] += 1;
            for node in tree.preorder() {
                report.nodes += 1;
                report.label_histogram[node.label.index()] += 1;
                unique.insert(node.span_text());
            }
        }
    }
    report.unique_phrases = unique.len();
    report
}
