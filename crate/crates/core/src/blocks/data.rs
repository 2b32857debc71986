//! Data layers: seeded synthetic tasks and line-aligned parallel text, all
//! exposed as random-access example streams that can be sharded across
//! workers.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use super::vocab::{Vocabulary, EOS, PAD, RESERVED};
use crate::error::{Error, Result};

/// One source/target pair of token ids (no bos/eos).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Padded, batch-major token ids.
///
/// Targets carry a trailing eos; `mask` is 1 on real target positions
/// (including eos) and 0 on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub source: Vec<usize>,
    pub source_lengths: Vec<usize>,
    pub tgt_len: usize,
    pub target: Vec<usize>,
    pub target_lengths: Vec<usize>,
    pub mask: Vec<f32>,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(i) = examples.iter().position(|e| e.source.is_empty()) {
            return Err(Error::Data(format!("example {i} has an empty source")));
        }
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.source.len()).max().unwrap();
        let tgt_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap();
        let mut source = vec![PAD; size * src_len];
        let mut target = vec![PAD; size * tgt_len];
        let mut mask = vec![0f32; size * tgt_len];
        for (b, e) in examples.iter().enumerate() {
            source[b * src_len..b * src_len + e.source.len()].copy_from_slice(&e.source);
            let row = &mut target[b * tgt_len..(b + 1) * tgt_len];
            row[..e.target.len()].copy_from_slice(&e.target);
            row[e.target.len()] = EOS;
            mask[b * tgt_len..b * tgt_len + e.target.len() + 1].fill(1.0);
        }
        Ok(Self {
            size,
            src_len,
            source_lengths: examples.iter().map(|e| e.source.len()).collect(),
            source,
            tgt_len,
            target,
            target_lengths: examples.iter().map(|e| e.target.len() + 1).collect(),
            mask,
        })
    }

    /// A batch with sources only, for inference.
    pub fn from_sources(sources: &[Vec<usize>]) -> Result<Self> {
        let examples: Vec<Example> = sources
            .iter()
            .map(|s| Example {
                source: s.clone(),
                target: Vec::new(),
            })
            .collect();
        Self::from_examples(&examples)
    }

    /// Source ids at time step `t` for every row.
    pub fn source_column(&self, t: usize) -> Vec<usize> {
        (0..self.size)
            .map(|b| self.source[b * self.src_len + t])
            .collect()
    }

    /// Teacher-forced decoder inputs at step `t`: bos, then the previous
    /// target token.
    pub fn decoder_inputs(&self, t: usize) -> Vec<usize> {
        (0..self.size)
            .map(|b| {
                if t == 0 {
                    super::vocab::BOS
                } else {
                    self.target[b * self.tgt_len + t - 1]
                }
            })
            .collect()
    }

    /// Number of non-padding target positions.
    pub fn target_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn max_id(&self) -> usize {
        self.source
            .iter()
            .chain(&self.target)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// Which stream a data layer should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// A deterministic, random-access stream of examples.
pub trait DataLayer: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Shared source/target vocabulary.
    fn vocab(&self) -> &Vocabulary;
    /// Example at absolute stream position `index`.
    fn example(&self, index: u64) -> Result<Example>;
    /// Examples per epoch, when the stream is finite data cycled forever.
    fn epoch_size(&self) -> Option<u64> {
        None
    }
    /// Whether targets are natural-language references (enables BLEU/WER).
    fn has_references(&self) -> bool {
        false
    }
    /// Tokens mapped to unk while loading.
    fn unknown_tokens(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticParams {
    vocab_size: usize,
    seq_len: usize,
    #[serde(default)]
    min_len: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    eval_seed: Option<u64>,
    #[serde(default)]
    epoch_size: Option<u64>,
}

/// Uniform random token sequences whose target is the source (copy) or the
/// reversed source (reverse).
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    kind: &'static str,
    reverse: bool,
    vocab: Vocabulary,
    min_len: usize,
    max_len: usize,
    seed: u64,
    epoch_size: Option<u64>,
}

impl SyntheticTask {
    pub fn copy(vocab_size: usize, len: usize, seed: u64) -> Result<Self> {
        Self::new("copy_task", false, vocab_size, len, len, seed)
    }

    pub fn reverse(vocab_size: usize, len: usize, seed: u64) -> Result<Self> {
        Self::new("reverse_task", true, vocab_size, len, len, seed)
    }

    pub fn new(
        kind: &'static str,
        reverse: bool,
        vocab_size: usize,
        min_len: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!(
                "{kind}: need 1 <= min_len <= seq_len, got {min_len}..{max_len}"
            )));
        }
        Ok(Self {
            kind,
            reverse,
            vocab: Vocabulary::synthetic(vocab_size)?,
            min_len,
            max_len,
            seed,
            epoch_size: None,
        })
    }

    fn from_params(
        kind: &'static str,
        reverse: bool,
        params: &Value,
        split: Split,
    ) -> Result<Self> {
        let p: SyntheticParams = serde_json::from_value(params.clone())
            .map_err(|e| Error::Config(format!("{kind} params: {e}")))?;
        let seed = match split {
            Split::Train => p.seed,
            Split::Eval => p.eval_seed.unwrap_or(p.seed ^ 0x5EED_0F_E7A1),
        };
        let mut task = Self::new(
            kind,
            reverse,
            p.vocab_size,
            p.min_len.unwrap_or(p.seq_len),
            p.seq_len,
            seed,
        )?;
        task.epoch_size = p.epoch_size;
        Ok(task)
    }
}

impl DataLayer for SyntheticTask {
    fn kind(&self) -> &'static str {
        self.kind
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn example(&self, index: u64) -> Result<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(RESERVED..self.vocab.size()))
            .collect();
        let mut target = source.clone();
        if self.reverse {
            target.reverse();
        }
        Ok(Example { source, target })
    }

    fn epoch_size(&self) -> Option<u64> {
        self.epoch_size
    }
}

pub(crate) fn copy_task_factory(params: &Value, split: Split) -> Result<Box<dyn DataLayer>> {
    Ok(Box::new(SyntheticTask::from_params(
        "copy_task",
        false,
        params,
        split,
    )?))
}

pub(crate) fn reverse_task_factory(params: &Value, split: Split) -> Result<Box<dyn DataLayer>> {
    Ok(Box::new(SyntheticTask::from_params(
        "reverse_task",
        true,
        params,
        split,
    )?))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParallelTextParams {
    source_file: PathBuf,
    target_file: PathBuf,
    #[serde(default)]
    eval_source_file: Option<PathBuf>,
    #[serde(default)]
    eval_target_file: Option<PathBuf>,
}

/// Line-aligned UTF-8 source/target files, whitespace-tokenized. The
/// vocabulary always comes from the training files so train and eval ids
/// agree.
#[derive(Debug, Clone)]
pub struct ParallelText {
    vocab: Vocabulary,
    examples: Vec<Example>,
    unknown: usize,
}

impl ParallelText {
    pub fn load(source: &Path, target: &Path) -> Result<Self> {
        Self::load_split(source, target, None)
    }

    /// Loads `eval` pairs (when given) against the vocabulary of the
    /// training pair.
    pub fn load_split(source: &Path, target: &Path, eval: Option<(&Path, &Path)>) -> Result<Self> {
        let (src_lines, tgt_lines) = read_aligned(source, target)?;
        let vocab =
            Vocabulary::from_corpus(src_lines.iter().chain(tgt_lines.iter()).map(String::as_str))?;
        let (src_lines, tgt_lines) = match eval {
            Some((s, t)) => read_aligned(s, t)?,
            None => (src_lines, tgt_lines),
        };
        let mut unknown = 0;
        let mut examples = Vec::with_capacity(src_lines.len());
        for (n, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
            let (source, us) = vocab.encode(s);
            let (target, ut) = vocab.encode(t);
            if source.is_empty() {
                return Err(Error::Data(format!(
                    "line {}: empty source sentence",
                    n + 1
                )));
            }
            unknown += us + ut;
            examples.push(Example { source, target });
        }
        if examples.is_empty() {
            return Err(Error::Data("parallel text files are empty".into()));
        }
        Ok(Self {
            vocab,
            examples,
            unknown,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn read_aligned(source: &Path, target: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text =
            fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        Ok(text.lines().map(str::to_string).collect())
    };
    let (s, t) = (read(source)?, read(target)?);
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "misaligned parallel text: {} has {} lines, {} has {}",
            source.display(),
            s.len(),
            target.display(),
            t.len()
        )));
    }
    Ok((s, t))
}

impl DataLayer for ParallelText {
    fn kind(&self) -> &'static str {
        "parallel_text"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn example(&self, index: u64) -> Result<Example> {
        let n = self.examples.len() as u64;
        Ok(self.examples[(index % n) as usize].clone())
    }

    fn epoch_size(&self) -> Option<u64> {
        Some(self.examples.len() as u64)
    }

    fn has_references(&self) -> bool {
        true
    }

    fn unknown_tokens(&self) -> usize {
        self.unknown
    }
}

pub(crate) fn parallel_text_factory(params: &Value, split: Split) -> Result<Box<dyn DataLayer>> {
    let p: ParallelTextParams = serde_json::from_value(params.clone())
        .map_err(|e| Error::Config(format!("parallel_text params: {e}")))?;
    let eval = match (split, &p.eval_source_file, &p.eval_target_file) {
        (Split::Eval, Some(s), Some(t)) => Some((s.as_path(), t.as_path())),
        (_, Some(_), None) | (_, None, Some(_)) => {
            return Err(Error::Config(
                "parallel_text: eval_source_file and eval_target_file go together".into(),
            ))
        }
        _ => None,
    };
    Ok(Box::new(ParallelText::load_split(
        &p.source_file,
        &p.target_file,
        eval,
    )?))
}

/// A batch stream over one shard of a data layer.
///
/// Shard `w` of `k` takes stream positions `w, w + k, w + 2k, ...`; batch
/// `s` of a shard with batch size `b` holds that shard's examples
/// `s*b .. (s+1)*b`. So batch `s` of all `k` shards together covers exactly
/// the positions of batch `s` of the unsharded stream at batch size `k*b`.
#[derive(Clone)]
pub struct BatchStream {
    layer: Arc<dyn DataLayer>,
    worker: u64,
    num_workers: u64,
    batch_size: usize,
    cursor: u64,
}

impl std::fmt::Debug for BatchStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchStream")
            .field("layer", &self.layer.kind())
            .field("worker", &self.worker)
            .field("num_workers", &self.num_workers)
            .field("batch_size", &self.batch_size)
            .field("cursor", &self.cursor)
            .finish()
    }
}

impl BatchStream {
    pub fn new(layer: Arc<dyn DataLayer>, batch_size: usize) -> Self {
        Self {
            layer,
            worker: 0,
            num_workers: 1,
            batch_size,
            cursor: 0,
        }
    }

    /// Every `num_workers`-th example of this stream, starting at `worker`.
    pub fn shard(&self, worker: usize, num_workers: usize) -> Result<Self> {
        if num_workers == 0 || worker >= num_workers {
            return Err(Error::InvalidArgument(format!(
                "shard {worker} of {num_workers}"
            )));
        }
        Ok(Self {
            layer: Arc::clone(&self.layer),
            worker: self.worker + self.num_workers * worker as u64,
            num_workers: self.num_workers * num_workers as u64,
            batch_size: self.batch_size,
            cursor: 0,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn layer(&self) -> &Arc<dyn DataLayer> {
        &self.layer
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Absolute stream positions consumed by batch `step`.
    pub fn positions(&self, step: u64) -> Vec<u64> {
        let b = self.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|i| self.worker + self.num_workers * i)
            .collect()
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let examples = self
            .positions(step)
            .into_iter()
            .map(|p| self.layer.example(p))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_examples(&examples)
    }

    /// Epoch index reached after `step` global batches (0 for endless streams).
    pub fn epoch_at(&self, step: u64) -> u64 {
        match self.layer.epoch_size() {
            Some(n) if n > 0 => step * self.batch_size as u64 * self.num_workers / n,
            _ => 0,
        }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.cursor);
        self.cursor += 1;
        Some(b)
    }
}
