//! Seeded synthetic key-value retrieval task.
//!
//! Each sequence is `[sys][k1 v1 k2 v2 ... kk vk][kq][answer]`: a fixed system
//! prompt, an "image" of key-value pairs drawn from a pseudo-visual
//! sub-vocabulary, a question naming one key, and the answer.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{Segment, SegmentMap};
use crate::error::{RaveError, Result};

/// Token ids reserved for the system prompt.
pub const NUM_SYSTEM_TOKENS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// The answer is the value paired with the questioned key (followed by
    /// the values of the next pairs, cyclically, for longer answers).
    Retrieval,
    /// The answer is a fixed function of the questioned key alone; the image
    /// carries no information about it.
    ImageIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub num_pairs: usize,
    pub num_sys: usize,
    pub answer_len: usize,
    pub kind: TaskKind,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            num_pairs: 4,
            num_sys: 2,
            answer_len: 1,
            kind: TaskKind::Retrieval,
        }
    }
}

impl TaskParams {
    pub fn prompt_len(&self) -> usize {
        self.num_sys + 2 * self.num_pairs + 1
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.answer_len
    }
}

/// Split of the vocabulary into system, key and value tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub system: Range<u32>,
    pub keys: Range<u32>,
    pub values: Range<u32>,
}

impl VocabLayout {
    pub fn new(vocab_size: usize) -> Result<Self> {
        let v = u32::try_from(vocab_size)
            .map_err(|_| RaveError::Vocabulary("vocabulary too large".into()))?;
        if v < NUM_SYSTEM_TOKENS + 2 {
            return Err(RaveError::Vocabulary(format!(
                "vocab_size {vocab_size} leaves no room for keys and values"
            )));
        }
        let half = (v - NUM_SYSTEM_TOKENS) / 2;
        Ok(VocabLayout {
            system: 0..NUM_SYSTEM_TOKENS,
            keys: NUM_SYSTEM_TOKENS..NUM_SYSTEM_TOKENS + half,
            values: NUM_SYSTEM_TOKENS + half..v,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExample {
    pub tokens: Vec<u32>,
    pub segments: SegmentMap,
    /// Next-token target at each position, present only where the next token
    /// is an answer token.
    pub targets: Vec<Option<u32>>,
}

impl ToyExample {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.segments.prompt_len()]
    }

    pub fn answer(&self) -> Vec<u32> {
        self.segments
            .indices(Segment::Answer)
            .iter()
            .map(|&p| self.tokens[p])
            .collect()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBatch {
    pub seed: u64,
    pub examples: Vec<ToyExample>,
}

/// Answer tokens for question key `key`, given the image pairs.
pub fn answer_for(
    params: &TaskParams,
    vocab: &VocabLayout,
    pairs: &[(u32, u32)],
    key: u32,
) -> Vec<u32> {
    match params.kind {
        TaskKind::Retrieval => {
            let q = pairs
                .iter()
                .position(|&(k, _)| k == key)
                .expect("questioned key is in the image");
            (0..params.answer_len)
                .map(|i| pairs[(q + i) % pairs.len()].1)
                .collect()
        }
        TaskKind::ImageIndependent => {
            let n = vocab.values.len() as u32;
            (0..params.answer_len as u32)
                .map(|i| vocab.values.start + (key - vocab.keys.start + i) % n)
                .collect()
        }
    }
}

fn generate_example(params: &TaskParams, vocab: &VocabLayout, rng: &mut ChaCha8Rng) -> ToyExample {
    let key_idx = sample(rng, vocab.keys.len(), params.num_pairs);
    let pairs: Vec<(u32, u32)> = key_idx
        .iter()
        .map(|i| {
            (
                vocab.keys.start + i as u32,
                rng.random_range(vocab.values.clone()),
            )
        })
        .collect();
    let key = pairs[rng.random_range(0..params.num_pairs)].0;
    let answer = answer_for(params, vocab, &pairs, key);

    let mut tokens: Vec<u32> = (0..params.num_sys)
        .map(|i| i as u32 % NUM_SYSTEM_TOKENS)
        .collect();
    for &(k, v) in &pairs {
        tokens.extend([k, v]);
    }
    tokens.push(key);
    tokens.extend(&answer);

    let segments =
        SegmentMap::contiguous(params.num_sys, 2 * params.num_pairs, 1, params.answer_len);
    let first_answer = params.prompt_len();
    let targets = (0..tokens.len())
        .map(|i| (i + 1 >= first_answer && i + 1 < tokens.len()).then(|| tokens[i + 1]))
        .collect();
    ToyExample {
        tokens,
        segments,
        targets,
    }
}

/// Generates `batch_size` sequences; identical arguments give identical batches.
pub fn generate_task(
    params: &TaskParams,
    vocab_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ToyBatch> {
    if params.num_pairs == 0 {
        return Err(RaveError::Config("num_pairs must be at least 1".into()));
    }
    if params.answer_len == 0 {
        return Err(RaveError::Config("answer_len must be at least 1".into()));
    }
    let vocab = VocabLayout::new(vocab_size)?;
    if vocab.keys.len() < params.num_pairs {
        return Err(RaveError::Vocabulary(format!(
            "{} key tokens cannot supply {} distinct keys",
            vocab.keys.len(),
            params.num_pairs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..batch_size)
        .map(|_| generate_example(params, &vocab, &mut rng))
        .collect();
    Ok(ToyBatch { seed, examples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_answer_is_its_value() {
        let p = TaskParams {
            num_pairs: 1,
            ..TaskParams::default()
        };
        let b = generate_task(&p, 64, 5, 3).unwrap();
        for ex in &b.examples {
            let img = ex.segments.indices(Segment::Image);
            assert_eq!(ex.answer(), vec![ex.tokens[img[1]]]);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = TaskParams::default();
        assert_eq!(
            generate_task(&p, 64, 8, 42).unwrap(),
            generate_task(&p, 64, 8, 42).unwrap()
        );
        assert_ne!(
            generate_task(&p, 64, 8, 42).unwrap(),
            generate_task(&p, 64, 8, 43).unwrap()
        );
    }

    #[test]
    fn targets_cover_answer_tokens_only() {
        let p = TaskParams {
            answer_len: 3,
            ..TaskParams::default()
        };
        let ex = &generate_task(&p, 64, 1, 0).unwrap().examples[0];
        assert_eq!(ex.tokens.len(), p.seq_len());
        assert_eq!(ex.num_targets(), 3);
        let first = p.prompt_len();
        assert_eq!(ex.targets[first - 1], Some(ex.tokens[first]));
        assert_eq!(ex.targets[ex.tokens.len() - 1], None);
    }

    #[test]
    fn vocabulary_exhaustion() {
        let p = TaskParams {
            num_pairs: 10,
            ..TaskParams::default()
        };
        assert!(matches!(
            generate_task(&p, 20, 1, 0),
            Err(RaveError::Vocabulary(_))
        ));
        assert!(matches!(
            generate_task(&TaskParams::default(), 5, 1, 0),
            Err(RaveError::Vocabulary(_))
        ));
        assert!(generate_task(
            &TaskParams {
                num_pairs: 0,
                ..TaskParams::default()
            },
            64,
            1,
            0
        )
        .is_err());
    }
}
