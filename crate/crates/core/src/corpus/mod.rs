//! Corpus ingestion: CMR parsing, delexicalization, tokenization and
//! vocabulary construction for both dataset formats.

mod cmr;
mod dataset;
mod delex;
mod tokenize;
mod vocab;

pub use cmr::{parse_cmr, Cmr, SlotKey, StyleLabel};
pub use dataset::{
    build_dataset, control_labels, encode_condition, group_references, linearize_condition, load_dataset,
    read_conditions, read_conditions_from, read_records, read_records_from, split_validation, write_dump,
    Condition, Dataset, DatasetMode, Example, LoadStats, RawRecord, ReferenceGroup,
};
pub use delex::{delexicalize, lexicalize, value_paraphrases, DelexMode, Delexicalized, SubstitutionMap};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
