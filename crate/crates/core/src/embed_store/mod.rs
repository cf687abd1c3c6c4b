//! Frozen-embedding dataset layer: the binary record format, text
//! manifests, a deterministic toy encoder, a synthetic corpus generator and
//! scenario construction.

mod format;
mod manifest;
mod split;
mod synth;
mod toy;

pub use format::{
    read_header, read_records, records_from_bytes, records_to_bytes, sample_id, write_records,
    EmbeddingRecord, FileHeader, RecordSet, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use manifest::{Dataset, Manifest, ManifestEntry, Split};
pub use split::{build_scenario, subsample_per_class, Grouping, ScenarioRequest};
pub use synth::{generic_corpus, generate_synthetic, SyntheticSpec};
pub use toy::{toy_encode, ToyEncoderSpec};
