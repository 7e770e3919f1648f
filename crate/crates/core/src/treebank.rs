//! Sentiment treebank reader.
//!
//! Trees arrive in the parenthesized one-tree-per-line format:
//! `(3 (2 good) (2 movie))`. Every node carries an integer sentiment label;
//! leaves carry exactly one token, internal nodes one or more subtrees.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of classes in the fine-grained (five-way) task.
pub const FINE_CLASSES: usize = 5;
/// Number of classes in the binary task.
pub const BINARY_CLASSES: usize = 2;
/// Fine-grained label of a neutral phrase.
pub const NEUTRAL: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Fine,
    Binary,
}

impl Task {
    pub fn class_count(self) -> usize {
        match self {
            Task::Fine => FINE_CLASSES,
            Task::Binary => BINARY_CLASSES,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Fine => "fine",
            Task::Binary => "binary",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Task::Fine),
            "binary" => Ok(Task::Binary),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// File name used by the standard treebank distribution.
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Dev => "dev.txt",
            Split::Test => "test.txt",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// A node of a labeled constituency tree.
///
/// A node is a leaf iff it has a token; leaves have no children.
/// `supervised` is false for nodes that carry no training signal
/// (neutral phrases inside binary-task sentences).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTree {
    pub label: u8,
    pub supervised: bool,
    pub token: Option<String>,
    pub children: Vec<LabeledTree>,
}

impl LabeledTree {
    pub fn leaf(label: u8, token: impl Into<String>) -> Self {
        LabeledTree {
            label,
            supervised: true,
            token: Some(token.into()),
            children: Vec::new(),
        }
    }

    pub fn node(label: u8, children: Vec<LabeledTree>) -> Self {
        LabeledTree {
            label,
            supervised: true,
            token: None,
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.token.is_some()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(LabeledTree::node_count).sum::<usize>()
    }

    pub fn supervised_count(&self) -> usize {
        usize::from(self.supervised) + self.children.iter().map(LabeledTree::supervised_count).sum::<usize>()
    }

    /// Largest number of children found at any node.
    pub fn max_arity(&self) -> usize {
        self.children
            .iter()
            .map(LabeledTree::max_arity)
            .fold(self.children.len(), usize::max)
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(LabeledTree::depth).max().unwrap_or(0)
    }

    /// Leaf tokens left to right.
    pub fn tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_tokens(&mut out);
        out
    }

    fn collect_tokens<'a>(&'a self, out: &mut Vec<&'a str>) {
        match &self.token {
            Some(t) => out.push(t),
            None => self.children.iter().for_each(|c| c.collect_tokens(out)),
        }
    }

    /// Nodes in post-order (children before parents, root last).
    pub fn post_order(&self) -> Vec<&LabeledTree> {
        let mut out = Vec::with_capacity(self.node_count());
        self.push_post_order(&mut out);
        out
    }

    fn push_post_order<'a>(&'a self, out: &mut Vec<&'a LabeledTree>) {
        for c in &self.children {
            c.push_post_order(out);
        }
        out.push(self);
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if usize::from(self.label) >= classes {
            return Err(Error::Corpus(format!(
                "label {} outside class range 0..{}",
                self.label, classes
            )));
        }
        self.children.iter().try_for_each(|c| c.validate(classes))
    }

    fn map_binary(&mut self) {
        match self.label {
            0 | 1 => self.label = 0,
            NEUTRAL => {
                self.label = 0;
                self.supervised = false;
            }
            _ => self.label = 1,
        }
        self.children.iter_mut().for_each(LabeledTree::map_binary);
    }
}

impl fmt::Display for LabeledTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}", self.label)?;
        if let Some(t) = &self.token {
            write!(f, " {t}")?;
        }
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

impl FromStr for LabeledTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_tree(s)
    }
}

/// Parses one parenthesized tree. Labels must fit the fine-grained range.
pub fn parse_tree(line: &str) -> Result<LabeledTree> {
    parse_tree_with_classes(line, FINE_CLASSES)
}

pub fn parse_tree_with_classes(line: &str, classes: usize) -> Result<LabeledTree> {
    let mut parser = Parser {
        src: line.as_bytes(),
        text: line,
        pos: 0,
        classes,
    };
    parser.skip_ws();
    let tree = parser.node()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.error("trailing characters after tree"));
    }
    Ok(tree)
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    classes: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn atom(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn node(&mut self) -> Result<LabeledTree> {
        match self.peek() {
            Some(b'(') => self.pos += 1,
            Some(_) => return Err(self.error("expected `(`")),
            None => return Err(self.error("unbalanced parentheses: unexpected end of input")),
        }
        self.skip_ws();
        let label_at = self.pos;
        let label_text = self.atom();
        if label_text.is_empty() {
            return Err(match self.peek() {
                None => self.error("unbalanced parentheses: unexpected end of input"),
                Some(_) => self.error("empty node"),
            });
        }
        let label: u8 = label_text.parse().map_err(|_| Error::Parse {
            offset: label_at,
            message: format!("non-integer label `{label_text}`"),
        })?;
        if usize::from(label) >= self.classes {
            return Err(Error::Parse {
                offset: label_at,
                message: format!("label {label} out of range 0..{}", self.classes),
            });
        }
        self.skip_ws();
        let mut children = Vec::new();
        let mut token = None;
        loop {
            match self.peek() {
                None => return Err(self.error("unbalanced parentheses: unexpected end of input")),
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => {
                    if token.is_some() {
                        return Err(self.error("node mixes a token with subtrees"));
                    }
                    children.push(self.node()?);
                }
                Some(_) => {
                    if token.is_some() || !children.is_empty() {
                        return Err(self.error("node mixes a token with subtrees"));
                    }
                    token = Some(self.atom().to_string());
                }
            }
            self.skip_ws();
        }
        if token.is_none() && children.is_empty() {
            return Err(Error::Parse {
                offset: label_at,
                message: "empty node".into(),
            });
        }
        Ok(LabeledTree {
            label,
            supervised: true,
            token,
            children,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub trees: Vec<LabeledTree>,
    pub split_name: String,
    pub task: Task,
}

impl Corpus {
    pub fn new(trees: Vec<LabeledTree>, split_name: impl Into<String>, task: Task) -> Self {
        Corpus {
            trees,
            split_name: split_name.into(),
            task,
        }
    }

    pub fn class_count(&self) -> usize {
        self.task.class_count()
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Parses a treebank text (one tree per line) as a fine-grained corpus
    /// and converts it when `task` is binary.
    pub fn from_text(text: &str, split_name: &str, task: Task) -> Result<Self> {
        let mut trees = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let tree = parse_tree(line).map_err(|e| Error::Line {
                line: i + 1,
                source: Box::new(e),
            })?;
            trees.push(tree);
        }
        let corpus = Corpus::new(trees, split_name, Task::Fine);
        match task {
            Task::Fine => Ok(corpus),
            Task::Binary => to_binary_task(corpus),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.class_count();
        self.trees.iter().try_for_each(|t| t.validate(classes))
    }
}

/// Reads a treebank file. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>, task: Task) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    Corpus::from_text(&text, name, task)
}

/// Loads `dir/{train,dev,test}.txt`.
pub fn load_split(dir: impl AsRef<Path>, split: Split, task: Task) -> Result<Corpus> {
    let mut corpus = load_corpus(dir.as_ref().join(split.file_name()), task)?;
    corpus.split_name = split.as_str().to_string();
    Ok(corpus)
}

/// Drops sentences with a neutral root and collapses labels to
/// negative (0, 1 → 0) and positive (3, 4 → 1). Neutral nodes inside
/// surviving sentences stay in the tree but are marked unsupervised.
pub fn to_binary_task(corpus: Corpus) -> Result<Corpus> {
    if corpus.task == Task::Binary {
        return Err(Error::Corpus("corpus is already binary".into()));
    }
    corpus.validate()?;
    let trees = corpus
        .trees
        .into_iter()
        .filter(|t| t.label != NEUTRAL)
        .map(|mut t| {
            t.map_binary();
            t
        })
        .collect();
    Ok(Corpus {
        trees,
        split_name: corpus.split_name,
        task: Task::Binary,
    })
}

/// One `(span text, label)` pair per node, post-order.
pub fn extract_phrases(tree: &LabeledTree) -> Vec<(String, u8)> {
    tree.post_order()
        .into_iter()
        .map(|n| (n.tokens().join(" "), n.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_leaf_tree() {
        let t = parse_tree("(3 (2 good) (2 movie))").unwrap();
        assert_eq!(t.label, 3);
        assert_eq!(t.children.len(), 2);
        assert_eq!(t.children[0], LabeledTree::leaf(2, "good"));
        assert_eq!(t.children[1], LabeledTree::leaf(2, "movie"));
    }

    #[test]
    fn parses_single_leaf() {
        let t = parse_tree("(2 hello)").unwrap();
        assert_eq!(t, LabeledTree::leaf(2, "hello"));
    }

    #[test]
    fn unbalanced_reports_end_of_input() {
        let line = "(3 (2 a)";
        match parse_tree(line) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, line.len());
                assert!(message.contains("unbalanced"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(matches!(parse_tree("(x hello)"), Err(Error::Parse { offset: 1, .. })));
        assert!(matches!(parse_tree("(7 hello)"), Err(Error::Parse { offset: 1, .. })));
        assert!(matches!(
            parse_tree("(2 (9 a) (1 b))"),
            Err(Error::Parse { offset: 4, .. })
        ));
    }

    #[test]
    fn rejects_empty_and_mixed_nodes() {
        assert!(parse_tree("(2)").is_err());
        assert!(parse_tree("()").is_err());
        assert!(parse_tree("(2 a (1 b))").is_err());
        assert!(parse_tree("(2 a b)").is_err());
        assert!(parse_tree("(2 a))").is_err());
        assert!(parse_tree("").is_err());
    }

    #[test]
    fn serializes_with_single_spaces() {
        let t = parse_tree("  (3   (2 good)\t(2  movie) ) ").unwrap();
        assert_eq!(t.to_string(), "(3 (2 good) (2 movie))");
    }

    #[test]
    fn tokens_are_case_preserving() {
        let t = parse_tree("(2 (2 The) (2 -LRB-))").unwrap();
        assert_eq!(t.tokens(), vec!["The", "-LRB-"]);
    }

    #[test]
    fn phrases_in_post_order() {
        let t = parse_tree("(3 (2 good) (2 movie))").unwrap();
        assert_eq!(
            extract_phrases(&t),
            vec![
                ("good".to_string(), 2),
                ("movie".to_string(), 2),
                ("good movie".to_string(), 3)
            ]
        );
        assert_eq!(
            extract_phrases(&parse_tree("(2 hello)").unwrap()),
            vec![("hello".to_string(), 2)]
        );
        let five = parse_tree("(1 (2 a) (1 (0 b) (3 c)))").unwrap();
        assert_eq!(extract_phrases(&five).len(), 5);
    }

    #[test]
    fn binary_drops_neutral_roots() {
        let c = Corpus::from_text("(2 (3 a) (1 b))\n", "t", Task::Fine).unwrap();
        let b = to_binary_task(c).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.task, Task::Binary);
    }

    #[test]
    fn binary_maps_labels_and_keeps_neutral_structure() {
        let c = Corpus::from_text("(4 (2 a) (1 (0 b) (3 c)))", "t", Task::Fine).unwrap();
        let before = c.trees[0].clone();
        let b = to_binary_task(c).unwrap();
        let t = &b.trees[0];
        assert_eq!(t.node_count(), before.node_count());
        assert_eq!(t.label, 1);
        assert!(!t.children[0].supervised);
        assert_eq!(t.children[1].label, 0);
        assert_eq!(t.children[1].children[1].label, 1);
        assert_eq!(t.supervised_count(), 4);
    }

    #[test]
    fn binary_twice_is_an_error() {
        let c = Corpus::from_text("(4 a)", "t", Task::Binary).unwrap();
        assert!(to_binary_task(c).is_err());
    }

    #[test]
    fn line_numbers_in_corpus_errors() {
        let err = Corpus::from_text("(2 a)\n(2 (1 b)\n", "t", Task::Fine).unwrap_err();
        assert!(matches!(err, Error::Line { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_text_is_empty_corpus() {
        let c = Corpus::from_text("", "t", Task::Fine).unwrap();
        assert!(c.is_empty());
    }
}
