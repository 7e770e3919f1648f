//! Vocabulary construction and pretrained word-vector ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::treebank::Corpus;

/// Reserved out-of-vocabulary entry, always id 0.
pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Half-width of the uniform range used for vectors without a pretrained row.
pub const OOV_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Vocabulary holding only the UNK entry.
    pub fn empty() -> Self {
        Vocabulary {
            word_to_id: HashMap::from([(UNK.to_string(), UNK_ID)]),
            id_to_word: vec![UNK.to_string()],
        }
    }

    /// Builds from an explicit word list (UNK first). Used when restoring
    /// a checkpoint.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Embedding(format!("word list must start with {UNK}")));
        }
        let mut word_to_id = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if word_to_id.insert(w.clone(), i).is_some() {
                return Err(Error::Embedding(format!("duplicate word `{w}`")));
            }
        }
        Ok(Vocabulary {
            word_to_id,
            id_to_word: words,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    pub fn exact(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    /// Exact token, then lowercased token, then UNK.
    pub fn lookup(&self, word: &str) -> usize {
        self.exact(word)
            .or_else(|| self.exact(&word.to_lowercase()))
            .unwrap_or(UNK_ID)
    }

    fn push(&mut self, word: &str) {
        if !self.word_to_id.contains_key(word) {
            self.word_to_id.insert(word.to_string(), self.id_to_word.len());
            self.id_to_word.push(word.to_string());
        }
    }
}

/// Every distinct leaf token of `corpus` in first-occurrence order, plus UNK.
pub fn build_vocab(corpus: &Corpus) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Embedding(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut vocab = Vocabulary::empty();
    for tree in &corpus.trees {
        for token in tree.tokens() {
            vocab.push(token);
        }
    }
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    pub rows: usize,
    pub dim: usize,
    pub vectors: Vec<T>,
    pub found: usize,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Uniform `[-OOV_RANGE, OOV_RANGE]` rows for every word.
    pub fn random<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let lo = T::lit(-OOV_RANGE);
        let hi = T::lit(OOV_RANGE);
        let vectors = (0..rows * dim).map(|_| rng.random_range(lo..=hi)).collect();
        EmbeddingMatrix {
            rows,
            dim,
            vectors,
            found: 0,
        }
    }

    /// Fraction of vocabulary entries that received a pretrained vector.
    pub fn coverage(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.found as f64 / self.rows as f64
        }
    }

    pub fn row(&self, id: usize) -> &[T] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }
}

/// Reads GloVe-format vectors (`word v1 ... vd`, no header) for `vocab`.
///
/// Rows are first filled uniformly at random, then overwritten by the
/// matching pretrained vector: the exact word when present, otherwise the
/// lowercased form.
pub fn load_glove<T: Scalar, R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<EmbeddingMatrix<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_glove(BufReader::new(file), vocab, dim, rng).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_glove<T: Scalar, B: BufRead, R: Rng + ?Sized>(
    reader: B,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<EmbeddingMatrix<T>> {
    if dim == 0 {
        return Err(Error::Embedding("dimension must be positive".into()));
    }
    let mut matrix = EmbeddingMatrix::<T>::random(vocab.len(), dim, rng);

    // Words whose lowercase form differs from themselves, keyed by that form.
    let mut by_lower: HashMap<String, Vec<usize>> = HashMap::new();
    for (id, w) in vocab.words().iter().enumerate().skip(1) {
        let lower = w.to_lowercase();
        if lower != *w {
            by_lower.entry(lower).or_default().push(id);
        }
    }
    // 0 = not found, 1 = lowercase match, 2 = exact match
    let mut source = vec![0u8; vocab.len()];

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(Path::new("<glove>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let mismatch = || Error::Line {
            line: i + 1,
            source: Box::new(Error::Embedding(format!(
                "expected {dim} values, found {}",
                fields.len().saturating_sub(1)
            ))),
        };
        if fields.len() < dim + 1 {
            return Err(mismatch());
        }
        let split = fields.len() - dim;
        // A few published files contain words with embedded spaces; any
        // numeric token in the word part means the row is simply too long.
        if fields[1..split].iter().any(|f| f.parse::<f64>().is_ok()) {
            return Err(mismatch());
        }
        let word = if split == 1 {
            fields[0].to_string()
        } else {
            fields[..split].join(" ")
        };

        let exact = vocab.exact(&word);
        let lowered = by_lower.get(&word);
        if exact.is_none() && lowered.is_none() {
            continue;
        }
        let values = fields[split..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map(T::lit).map_err(|_| Error::Line {
                    line: i + 1,
                    source: Box::new(Error::Embedding(format!("bad value `{f}`"))),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(id) = exact {
            matrix.vectors[id * dim..(id + 1) * dim].copy_from_slice(&values);
            source[id] = 2;
        }
        for &id in lowered.into_iter().flatten() {
            if source[id] < 2 {
                matrix.vectors[id * dim..(id + 1) * dim].copy_from_slice(&values);
                source[id] = 1;
            }
        }
    }
    matrix.found = source.iter().filter(|&&s| s > 0).count();
    Ok(matrix)
}
