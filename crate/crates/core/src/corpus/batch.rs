use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD;
use super::EncodedPair;
use crate::error::{Error, Result};

/// A group of whole dialogues with padded id matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Pairs of each dialogue in the batch, in turn order.
    pub dialogues: Vec<Vec<EncodedPair>>,
    /// Customer sequences of every pair, padded to `customer_width` with PAD.
    pub customer: Vec<Vec<u32>>,
    pub agent: Vec<Vec<u32>>,
    pub customer_lengths: Vec<usize>,
    pub agent_lengths: Vec<usize>,
}

impl Batch {
    pub fn pair_count(&self) -> usize {
        self.customer.len()
    }
}

/// Single-consumer iterator over shuffled dialogue batches.
pub struct BatchIter {
    groups: Vec<Vec<EncodedPair>>,
    batch_size: usize,
    next: usize,
}

/// Groups pairs by dialogue (first-appearance order), shuffles the
/// dialogues with `shuffle_seed`, and yields batches of `batch_size`
/// dialogues. A batch size above the corpus size yields one batch.
pub fn batch_iterator(pairs: &[EncodedPair], batch_size: usize, shuffle_seed: u64) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut groups = group_by_dialogue(pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    groups.shuffle(&mut rng);
    Ok(BatchIter { groups, batch_size, next: 0 })
}

pub(crate) fn group_by_dialogue(pairs: &[EncodedPair]) -> Vec<Vec<EncodedPair>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<EncodedPair>> = Default::default();
    for p in pairs {
        let entry = groups.entry(p.dialogue_id.as_str()).or_insert_with(|| {
            order.push(p.dialogue_id.as_str());
            Vec::new()
        });
        entry.push(p.clone());
    }
    order.into_iter().map(|id| groups.remove(id).unwrap()).collect()
}

fn pad(seqs: Vec<&[u32]>) -> (Vec<Vec<u32>>, Vec<usize>) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let lengths = seqs.iter().map(|s| s.len()).collect();
    let padded = seqs
        .into_iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect();
    (padded, lengths)
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.groups.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.groups.len());
        let dialogues = self.groups[self.next..end].to_vec();
        self.next = end;
        let all: Vec<&EncodedPair> = dialogues.iter().flatten().collect();
        let (customer, customer_lengths) = pad(all.iter().map(|p| p.x.as_slice()).collect());
        let (agent, agent_lengths) = pad(all.iter().map(|p| p.y.as_slice()).collect());
        Some(Batch { dialogues, customer, agent, customer_lengths, agent_lengths })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.groups.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(dialogues: usize, pairs_each: usize) -> Vec<EncodedPair> {
        let mut out = Vec::new();
        for d in 0..dialogues {
            for t in 0..pairs_each {
                out.push(EncodedPair {
                    dialogue_id: format!("d{d}"),
                    turn_index: t,
                    x: vec![4; 1 + (d + t) % 3],
                    y: vec![5; 2],
                });
            }
        }
        out
    }

    #[test]
    fn four_dialogues_two_batches() {
        assert_eq!(batch_iterator(&corpus(4, 1), 2, 0).unwrap().count(), 2);
    }

    #[test]
    fn oversized_batch_is_single() {
        let batches: Vec<_> = batch_iterator(&corpus(3, 2), 10, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].pair_count(), 6);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(batch_iterator(&corpus(1, 1), 0, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Vec<_> = batch_iterator(&corpus(9, 2), 2, 7).unwrap().collect();
        let b: Vec<_> = batch_iterator(&corpus(9, 2), 2, 7).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn dialogues_stay_whole_and_padded() {
        for batch in batch_iterator(&corpus(5, 3), 2, 1).unwrap() {
            for group in &batch.dialogues {
                assert_eq!(group.len(), 3);
                assert!(group.iter().all(|p| p.dialogue_id == group[0].dialogue_id));
            }
            let width = batch.customer[0].len();
            assert!(batch.customer.iter().all(|r| r.len() == width));
            assert_eq!(width, *batch.customer_lengths.iter().max().unwrap());
            for (row, &len) in batch.customer.iter().zip(&batch.customer_lengths) {
                assert!(row[len..].iter().all(|&t| t == PAD));
            }
        }
    }
}
