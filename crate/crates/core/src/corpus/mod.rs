// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic parallel bilingual corpus: two token languages joined by a
//! tokenwise bijection, three task kinds, and the `+En` / `+MT`
//! augmentations.

mod augment;
mod generate;
mod jsonl;
mod lang;
mod record;

pub use augment::{augment_with_english, augment_with_mt, bilingual_pairs};
pub use generate::{
    generate_parallel_corpus, read_manifest, write_corpus, CorpusConfig, DatasetManifest,
    FileEntry, GeneratedCorpus, LookupTable, TaskMix,
};
pub use jsonl::{read_jsonl, write_jsonl, ReadOptions};
pub use lang::{LanguagePair, SyntheticLanguageSpec};
pub use record::{Lang, ParallelExample, Rendered, TaskKind};

/// Padding; never emitted.
pub const PAD: usize = 0;
/// `[input]` template marker.
pub const INPUT: usize = 1;
/// `[output]` template marker, the response start token.
pub const RST: usize = 2;
pub const EOS: usize = 3;
/// Control token opening a translation instruction.
pub const TRANSLATE: usize = 4;
pub const TASK_COPY: usize = 5;
pub const TASK_REVERSE: usize = 6;
pub const TASK_LOOKUP: usize = 7;
/// Ids below this are reserved for control tokens.
pub const FIRST_CONTENT: usize = 16;
