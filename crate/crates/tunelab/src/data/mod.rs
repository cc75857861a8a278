//! Dataset abstractions: uniform record access over ABC and MIDI corpora,
//! lazily-applied transform chains, deterministic train/val splitting, and
//! batching into padded id matrices.

pub mod folk;
pub mod loader;
pub mod midi_dir;
pub mod transforms;

use std::path::PathBuf;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenize::{
    midi::MidiError, remi::RemiError, DetokenizeError, TokenSequence, TokenizeError, Vocabulary,
};

pub use loader::Loader;
pub use transforms::{sample_bars, sample_subsequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// What a record holds before / between transforms.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Raw ABC tune text.
    Text(String),
    /// Path to a MIDI file on disk.
    MidiFile(PathBuf),
    /// Tokenized (and possibly encoded) sequence.
    Tokens(TokenSequence),
}

impl Payload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::Text(_) => "text",
            Payload::MidiFile(_) => "midi-file",
            Payload::Tokens(_) => "tokens",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub payload: Payload,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus block {block}: {msg}")]
    CorpusFormat { block: usize, msg: String },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Detokenize(#[from] DetokenizeError),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error("sequence has content but no bar delimiters")]
    NoBars,
    #[error("sequence {index} has no ids; encode it before batching")]
    MissingIds { index: usize },
    #[error("dataset has no records for the requested split")]
    EmptyDataset,
    #[error("transform {transform:?} expected {expected} input, got {got}")]
    WrongPayload { transform: String, expected: &'static str, got: &'static str },
    #[error("transform {transform:?} requires a vocabulary, none is attached")]
    NoVocabulary { transform: String },
}

/// Per-access context handed to transforms: a deterministic rng stream for
/// stochastic transforms and the vocabulary for encoding ones.
pub struct TransformCtx<'a> {
    pub rng: ChaCha8Rng,
    pub vocab: Option<&'a Vocabulary>,
}

impl<'a> TransformCtx<'a> {
    pub fn new(rng: ChaCha8Rng, vocab: Option<&'a Vocabulary>) -> Self {
        Self { rng, vocab }
    }

    pub fn deterministic() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0), vocab: None }
    }
}

/// A record-wise data transform, applied lazily in declaration order.
pub trait Transform: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, payload: Payload, ctx: &mut TransformCtx) -> Result<Payload, DataError>;
    /// True for transforms that draw from the rng stream.
    fn stochastic(&self) -> bool {
        false
    }
    /// True for transforms that read the vocabulary.
    fn needs_vocab(&self) -> bool {
        false
    }
}

/// Records plus their transform chain. Records are immutable after load;
/// transforms run per access.
pub struct LoadedDataset {
    name: String,
    records: Vec<DatasetRecord>,
    transforms: Vec<Box<dyn Transform>>,
    skipped: usize,
}

impl std::fmt::Debug for LoadedDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedDataset")
            .field("name", &self.name)
            .field("records", &self.records.len())
            .field("transforms", &self.transforms.iter().map(|t| t.name()).collect::<Vec<_>>())
            .field("skipped", &self.skipped)
            .finish()
    }
}


impl LoadedDataset {
    pub fn new(
        name: impl Into<String>,
        records: Vec<DatasetRecord>,
        transforms: Vec<Box<dyn Transform>>,
        skipped: usize,
    ) -> Self {
        Self { name: name.into(), records, transforms, skipped }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Count of files that could not be read at load time.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn record(&self, index: usize) -> &DatasetRecord {
        &self.records[index]
    }

    pub fn split_indices(&self, choice: crate::config::SplitChoice) -> Vec<usize> {
        use crate::config::SplitChoice;
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| match choice {
                SplitChoice::All => true,
                SplitChoice::Train => r.split == Split::Train,
                SplitChoice::Val => r.split == Split::Val,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Apply the full transform chain to one record.
    pub fn fetch_payload(&self, index: usize, ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        let mut payload = self.records[index].payload.clone();
        for t in &self.transforms {
            payload = t.apply(payload, ctx)?;
        }
        Ok(payload)
    }

    /// Like [`fetch_payload`], but requires the chain to end in tokens.
    ///
    /// [`fetch_payload`]: LoadedDataset::fetch_payload
    pub fn fetch(&self, index: usize, ctx: &mut TransformCtx) -> Result<TokenSequence, DataError> {
        match self.fetch_payload(index, ctx)? {
            Payload::Tokens(seq) => Ok(seq),
            other => Err(DataError::WrongPayload {
                transform: "<end of chain>".into(),
                expected: "tokens",
                got: other.kind_name(),
            }),
        }
    }

    /// Apply only the deterministic, vocabulary-free prefix of the chain —
    /// the view a vocabulary is built from (full tunes, no cropping).
    pub fn fetch_for_vocab(&self, index: usize) -> Result<Option<TokenSequence>, DataError> {
        let mut ctx = TransformCtx::deterministic();
        let mut payload = self.records[index].payload.clone();
        for t in &self.transforms {
            if t.stochastic() || t.needs_vocab() {
                break;
            }
            payload = t.apply(payload, &mut ctx)?;
        }
        match payload {
            Payload::Tokens(seq) => Ok(Some(seq)),
            _ => Ok(None),
        }
    }
}

/// Stable id -> split assignment: 90% train / 10% val by FNV hash of the
/// record id mixed with the experiment seed.
pub fn assign_split(id: &str, seed: u64) -> Split {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    // final avalanche so low bits are well mixed
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    if h % 10 < 9 {
        Split::Train
    } else {
        Split::Val
    }
}

/// Batch of encoded sequences padded to a common length, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    pub lengths: Vec<usize>,
    pub pad_id: u32,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }
}

/// Pack encoded sequences into a padded id matrix, preserving row order.
pub fn tokens_to_index_matrix(seqs: &[TokenSequence], pad_id: u32) -> Result<Batch, DataError> {
    let mut rows_ids: Vec<&[u32]> = Vec::with_capacity(seqs.len());
    for (index, seq) in seqs.iter().enumerate() {
        match &seq.ids {
            Some(ids) => rows_ids.push(ids),
            None => return Err(DataError::MissingIds { index }),
        }
    }
    let cols = rows_ids.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows_ids.len() * cols);
    let mut lengths = Vec::with_capacity(rows_ids.len());
    for row in &rows_ids {
        ids.extend_from_slice(row);
        ids.extend(std::iter::repeat(pad_id).take(cols - row.len()));
        lengths.push(row.len());
    }
    Ok(Batch { ids, rows: rows_ids.len(), cols, lengths, pad_id })
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        let mut z = p.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h ^= z ^ (z >> 31);
        h = h.rotate_left(23).wrapping_mul(0x2545f4914f6cdd1d);
    }
    h
}

pub(crate) fn fnv(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{Token, TokenKind};

    fn enc(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            tokens: ids.iter().map(|_| Token::new("G", TokenKind::Pitch)).collect(),
            ids: Some(ids.to_vec()),
            vocab_fingerprint: None,
        }
    }

    #[test]
    fn padding_by_definition() {
        let batch = tokens_to_index_matrix(&[enc(&[1, 4, 2]), enc(&[1, 4, 5, 2])], 0).unwrap();
        assert_eq!(batch.rows, 2);
        assert_eq!(batch.cols, 4);
        assert_eq!(batch.row(0), [1, 4, 2, 0]);
        assert_eq!(batch.row(1), [1, 4, 5, 2]);
        assert_eq!(batch.lengths, [3, 4]);
    }

    #[test]
    fn single_sequence_no_padding() {
        let batch = tokens_to_index_matrix(&[enc(&[7, 8])], 0).unwrap();
        assert_eq!(batch.rows, 1);
        assert_eq!(batch.cols, 2);
        assert_eq!(batch.row(0), [7, 8]);
    }

    #[test]
    fn unencoded_sequence_is_missing_ids() {
        let mut seq = enc(&[1]);
        seq.ids = None;
        match tokens_to_index_matrix(&[enc(&[1]), seq], 0).unwrap_err() {
            DataError::MissingIds { index } => assert_eq!(index, 1),
            other => panic!("expected MissingIds, got {other}"),
        }
    }

    #[test]
    fn split_assignment_is_stable_and_roughly_90_10() {
        let mut val = 0;
        for i in 0..1000 {
            let id = format!("record-{i}");
            let a = assign_split(&id, 7);
            let b = assign_split(&id, 7);
            assert_eq!(a, b);
            if a == Split::Val {
                val += 1;
            }
        }
        assert!((50..200).contains(&val), "val fraction off: {val}/1000");
    }

    #[test]
    fn split_depends_on_seed() {
        let flips = (0..1000)
            .filter(|i| {
                let id = format!("record-{i}");
                assign_split(&id, 1) != assign_split(&id, 2)
            })
            .count();
        assert!(flips > 50, "seed change should move some records: {flips}");
    }
}
