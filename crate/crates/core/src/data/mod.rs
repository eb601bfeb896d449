//! Corpora, annotations, anti-bias splits, and the binary tensor format.

pub mod annotations;
pub mod corpus;
pub mod mdff;
pub mod oracle;
pub mod splits;
pub mod synthetic;

pub use annotations::{read_annotations, write_annotations, MomentAnnotation, Partition};
pub use corpus::{load_corpus, save_corpus, Corpus, Sample};
pub use oracle::PrototypeOracle;
pub use splits::{build_len_split, build_mom_split, build_split, Split, SplitKind, SplitSpec};
pub use synthetic::{generate_corpus, CenterDist, SyntheticConfig, SyntheticCorpus, WidthDist};
