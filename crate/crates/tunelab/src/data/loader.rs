//! Batching iterator over a dataset view: every epoch covers each record
//! exactly once, shuffle order is a pure function of (seed, epoch), and each
//! record's transform rng is derived from (seed, epoch, record id) so that a
//! resumed run sees the identical data stream.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fnv, mix_seed, tokens_to_index_matrix, Batch, DataError, LoadedDataset, TransformCtx};
use crate::tokenize::{Vocabulary, PAD_ID};

pub struct Loader {
    dataset: Arc<LoadedDataset>,
    indices: Vec<usize>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    vocab: Option<Arc<Vocabulary>>,
}

impl Loader {
    pub fn new(
        dataset: Arc<LoadedDataset>,
        indices: Vec<usize>,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        vocab: Option<Arc<Vocabulary>>,
    ) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        assert!(batch_size >= 1, "batch_size must be at least 1");
        Ok(Self { dataset, indices, batch_size, shuffle, seed, vocab })
    }

    pub fn dataset(&self) -> &LoadedDataset {
        &self.dataset
    }

    pub fn num_records(&self) -> usize {
        self.indices.len()
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.indices.len().div_ceil(self.batch_size) as u64
    }

    /// The record visit order for an epoch; a pure function of (seed, epoch).
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.indices.clone();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0x10ade7, epoch]));
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn epoch(&self, epoch: u64) -> EpochIter<'_> {
        EpochIter { loader: self, order: self.epoch_order(epoch), epoch, cursor: 0 }
    }

    fn fetch(&self, index: usize, epoch: u64) -> Result<crate::tokenize::TokenSequence, DataError> {
        let record_id = &self.dataset.record(index).id;
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, epoch, fnv(record_id)]));
        let mut ctx = TransformCtx::new(rng, self.vocab.as_deref());
        self.dataset.fetch(index, &mut ctx)
    }
}

pub struct EpochIter<'a> {
    loader: &'a Loader,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
}

impl EpochIter<'_> {
    /// Record ids of the batch that would be yielded next.
    pub fn peek_ids(&self) -> Vec<String> {
        self.order[self.cursor..]
            .iter()
            .take(self.loader.batch_size)
            .map(|&i| self.loader.dataset.record(i).id.clone())
            .collect()
    }
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.loader.batch_size).min(self.order.len());
        let mut seqs = Vec::with_capacity(end - self.cursor);
        for &index in &self.order[self.cursor..end] {
            match self.loader.fetch(index, self.epoch) {
                Ok(seq) => seqs.push(seq),
                Err(err) => return Some(Err(err)),
            }
        }
        self.cursor = end;
        Some(tokens_to_index_matrix(&seqs, PAD_ID))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SplitChoice;
    use crate::data::transforms::{AbcTokenizer, EncodeIds};
    use crate::data::{folk::load_folk_dataset, Transform};
    use crate::tokenize::Vocabulary;
    use std::io::Write;

    fn corpus(n: usize) -> (tempfile::TempDir, Arc<LoadedDataset>, Arc<Vocabulary>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tunes.abc");
        let mut f = std::fs::File::create(&path).unwrap();
        for i in 0..n {
            let pitch = ["A", "B", "c", "d", "e", "f", "g", "a", "G", "F"][i % 10];
            writeln!(f, "M:4/4\nK:Cmaj\n{pitch}{pitch}|{pitch}2|\n").unwrap();
        }
        drop(f);
        let transforms: Vec<Box<dyn Transform>> =
            vec![Box::new(AbcTokenizer), Box::new(EncodeIds { add_bos_eos: true })];
        let ds = Arc::new(load_folk_dataset(&path, transforms, 0).unwrap());
        let mut seqs = Vec::new();
        for i in 0..ds.len() {
            seqs.push(ds.fetch_for_vocab(i).unwrap().unwrap());
        }
        let vocab = Arc::new(Vocabulary::build(seqs.iter()).unwrap());
        (dir, ds, vocab)
    }

    #[test]
    fn batch_sizes_follow_ceiling_arithmetic() {
        let (_dir, ds, vocab) = corpus(10);
        let indices = ds.split_indices(SplitChoice::All);
        let loader = Loader::new(ds, indices, 4, false, 0, Some(vocab)).unwrap();
        let sizes: Vec<usize> =
            loader.epoch(0).map(|b| b.unwrap().rows).collect();
        assert_eq!(sizes, [4, 4, 2]);
        assert_eq!(loader.batches_per_epoch(), 3);
    }

    #[test]
    fn no_shuffle_preserves_dataset_order() {
        let (_dir, ds, vocab) = corpus(6);
        let indices = ds.split_indices(SplitChoice::All);
        let loader = Loader::new(ds.clone(), indices, 2, false, 0, Some(vocab)).unwrap();
        let it = loader.epoch(0);
        let first = it.peek_ids();
        assert_eq!(first, ["tunes#0", "tunes#1"]);
    }

    #[test]
    fn same_seed_same_batch_composition() {
        let (_dir, ds, vocab) = corpus(10);
        let indices = ds.split_indices(SplitChoice::All);
        let a = Loader::new(ds.clone(), indices.clone(), 3, true, 7, Some(vocab.clone())).unwrap();
        let b = Loader::new(ds, indices, 3, true, 7, Some(vocab)).unwrap();
        for epoch in 0..3 {
            assert_eq!(a.epoch_order(epoch), b.epoch_order(epoch));
        }
        // different epochs shuffle differently
        assert_ne!(a.epoch_order(0), a.epoch_order(1));
    }

    #[test]
    fn epoch_covers_every_record_exactly_once() {
        let (_dir, ds, vocab) = corpus(10);
        for batch_size in 1..=11 {
            let indices = ds.split_indices(SplitChoice::All);
            let loader =
                Loader::new(ds.clone(), indices, batch_size, true, 3, Some(vocab.clone())).unwrap();
            let mut seen: Vec<usize> = loader.epoch_order(5);
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
            let total_rows: usize = loader.epoch(5).map(|b| b.unwrap().rows).sum();
            assert_eq!(total_rows, 10);
        }
    }

    #[test]
    fn empty_view_is_rejected() {
        let (_dir, ds, vocab) = corpus(3);
        assert!(matches!(
            Loader::new(ds, vec![], 1, false, 0, Some(vocab)),
            Err(DataError::EmptyDataset)
        ));
    }
}
