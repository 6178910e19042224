#![allow(dead_code)]

use std::path::Path;

use fusebench::synth::{generate_corpus, SyntheticCorpus, SyntheticTaskSpec};

/// A corpus small enough for per-test training runs.
pub fn tiny_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        layer_count: 4,
        dim: 5,
        class_count: 4,
        vocab_size: 4,
        utterance_count: 20,
        min_frames: 10,
        max_frames: 14,
        seed,
        ..Default::default()
    }
}

pub fn tiny_corpus(dir: &Path, seed: u64) -> SyntheticCorpus {
    generate_corpus(&tiny_spec(seed), dir).expect("tiny corpus")
}
