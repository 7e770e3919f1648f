//! Checkpoint container.
//!
//! A checkpoint is a UTF-8 text manifest terminated by a line `end`,
//! followed by the raw little-endian tensor data concatenated in manifest
//! order:
//!
//! ```text
//! ARBO-CHECKPOINT
//! format_version 1
//! variant treebigru
//! attention true
//! attention_norm softmax
//! task fine
//! d 300
//! V 21702
//! c 5
//! K 2
//! dtype f64
//! tensors 27
//! tensor embeddings 21702 300 f64
//! ...
//! words 21702
//! <unk>
//! ...
//! end
//! <binary payload>
//! ```

use std::fs;
use std::path::Path;

use super::{AttentionNorm, ModelConfig, ModelParams, Tensor, Variant};
use crate::autodiff::Shape;
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::model::tensor_specs;
use crate::scalar::{Precision, Scalar};
use crate::treebank::Task;

const MAGIC: &str = "ARBO-CHECKPOINT";
const VERSION: u32 = 1;

/// Trained parameters together with the vocabulary and task they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub vocab: Vocabulary,
    pub task: Task,
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let c = &ckpt.params.config;
    let mut text = String::new();
    let mut line = |s: String| {
        text.push_str(&s);
        text.push('\n');
    };
    line(MAGIC.to_string());
    line(format!("format_version {VERSION}"));
    line(format!("variant {}", c.variant));
    line(format!("attention {}", c.attention));
    line(format!("attention_norm {}", c.attention_norm.as_str()));
    line(format!("task {}", ckpt.task));
    line(format!("d {}", c.dim));
    line(format!("V {}", c.vocab_size));
    line(format!("c {}", c.classes));
    line(format!("K {}", c.arity));
    line(format!("dtype {}", T::DTYPE));
    line(format!("tensors {}", ckpt.params.tensors.len()));
    for t in &ckpt.params.tensors {
        line(format!(
            "tensor {} {} {} {}",
            t.name,
            t.shape.rows,
            t.shape.cols,
            T::DTYPE
        ));
    }
    line(format!("words {}", ckpt.vocab.len()));
    for w in ckpt.vocab.words() {
        line(w.clone());
    }
    line("end".to_string());

    let mut out = text.into_bytes();
    let payload: usize = ckpt.params.tensors.iter().map(|t| t.len() * T::BYTES).sum();
    out.reserve(payload);
    for t in &ckpt.params.tensors {
        for &x in &t.data {
            x.write_le(&mut out);
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Manifest<'a> {
    lines: std::str::Lines<'a>,
}

impl<'a> Manifest<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.lines.next().ok_or_else(|| bad("truncated manifest"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    }

    fn number(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.parse().map_err(|_| bad(format!("`{key}` is not a number: `{v}`")))
    }
}

/// Splits a checkpoint into its manifest text and binary payload.
fn split(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let head = format!("{MAGIC}\n");
    if !bytes.starts_with(head.as_bytes()) {
        return Err(bad("bad magic"));
    }
    // Walk lines: the word list may itself contain `end`, so the terminator
    // is the first `end` after `words N` and N word lines.
    let mut pos = 0;
    let mut remaining_words: Option<usize> = None;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest has no `end` line"))?;
        let line = &bytes[pos..pos + nl];
        pos += nl + 1;
        match remaining_words {
            Some(0) => {
                if line != b"end" {
                    return Err(bad("missing `end`"));
                }
                break;
            }
            Some(n) => remaining_words = Some(n - 1),
            None => {
                if let Some(n) = line.strip_prefix(b"words ") {
                    let n = std::str::from_utf8(n)
                        .ok()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad word count"))?;
                    remaining_words = Some(n);
                }
            }
        }
    }
    let text = std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("manifest is not UTF-8"))?;
    Ok((text, &bytes[pos..]))
}

/// Element type recorded in a checkpoint's manifest.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    let (text, _) = split(bytes)?;
    match text.lines().find_map(|l| l.strip_prefix("dtype ")) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        Some(other) => Err(bad(format!("unknown dtype `{other}`"))),
        None => Err(bad("manifest has no dtype")),
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (text, payload) = split(bytes)?;
    let mut m = Manifest { lines: text.lines() };
    m.next()?;
    let version = m.number("format_version")?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let variant: Variant = m.field("variant")?.parse().map_err(|_| bad("bad variant"))?;
    let attention = match m.field("attention")? {
        "true" => true,
        "false" => false,
        other => return Err(bad(format!("bad attention flag `{other}`"))),
    };
    let attention_norm: AttentionNorm = m
        .field("attention_norm")?
        .parse()
        .map_err(|_| bad("bad attention norm"))?;
    let task: Task = m.field("task")?.parse().map_err(|_| bad("bad task"))?;
    let config = ModelConfig {
        variant,
        attention,
        attention_norm,
        dim: m.number("d")?,
        vocab_size: m.number("V")?,
        classes: m.number("c")?,
        arity: m.number("K")?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    if config.classes != task.class_count() {
        return Err(bad(format!("{} classes for task {task}", config.classes)));
    }
    let dtype = m.field("dtype")?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored as {dtype}, requested {}", T::DTYPE)));
    }
    let count = m.number("tensors")?;
    let specs = tensor_specs(&config);
    if count != specs.len() {
        return Err(bad(format!("{count} tensors, layout needs {}", specs.len())));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(count);
    for spec in specs {
        let line = m.field("tensor")?;
        let fields: Vec<&str> = line.split(' ').collect();
        let expected = [
            spec.name.clone(),
            spec.shape.rows.to_string(),
            spec.shape.cols.to_string(),
            T::DTYPE.to_string(),
        ];
        if fields != expected {
            return Err(bad(format!("tensor line `{line}` does not match layout")));
        }
        let n = spec.shape.len() * T::BYTES;
        let raw = payload
            .get(offset..offset + n)
            .ok_or_else(|| bad(format!("payload truncated in `{}`", spec.name)))?;
        offset += n;
        tensors.push(Tensor {
            name: spec.name,
            shape: Shape::matrix(spec.shape.rows, spec.shape.cols),
            kind: spec.kind,
            data: raw.chunks_exact(T::BYTES).map(T::read_le).collect(),
        });
    }
    if offset != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - offset)));
    }
    let words = m.number("words")?;
    if words != config.vocab_size {
        return Err(bad(format!("{words} words for V = {}", config.vocab_size)));
    }
    let list = (0..words)
        .map(|_| m.next().map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    if m.next()? != "end" {
        return Err(bad("missing `end`"));
    }
    let vocab = Vocabulary::from_words(list).map_err(|e| bad(e.to_string()))?;
    let params = ModelParams::from_tensors(config, tensors).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { params, vocab, task })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(variant: Variant, attention: bool) -> Checkpoint<f64> {
        let vocab = Vocabulary::from_words(vec!["<unk>".into(), "good".into(), "end".into(), "Movie".into()]).unwrap();
        let config = ModelConfig::new(variant, attention, 3, vocab.len(), 5);
        Checkpoint {
            params: init_params(config, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap(),
            vocab,
            task: Task::Fine,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for variant in [Variant::TreeGru, Variant::TreeBiGru] {
            for attention in [false, true] {
                let ckpt = sample(variant, attention);
                let bytes = write_checkpoint(&ckpt);
                let back: Checkpoint<f64> = read_checkpoint(&bytes).unwrap();
                assert_eq!(back, ckpt);
                assert_eq!(write_checkpoint(&back), bytes);
            }
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let ckpt = sample(Variant::TreeGru, true);
        let small = Checkpoint {
            params: ckpt.params.cast::<f32>(),
            vocab: ckpt.vocab.clone(),
            task: ckpt.task,
        };
        let bytes = write_checkpoint(&small);
        assert_eq!(checkpoint_precision(&bytes).unwrap(), Precision::F32);
        let back: Checkpoint<f32> = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back), bytes);
        assert!(read_checkpoint::<f64>(&bytes).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_checkpoint(&sample(Variant::TreeBiGru, false));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = read_checkpoint::<f64>(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("checkpoint format"), "{err}");

        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint::<f64>(truncated).is_err());

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64>(&extra).is_err());
    }
}
