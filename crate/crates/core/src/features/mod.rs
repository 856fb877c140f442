//! Domain records, the binary feature container and prompt sampling.

mod container;
mod manifest;
mod prototypes;
mod sampling;
mod types;

pub use container::{
    decode_features, header_len, pack_mask, read_feature_file, record_len, unpack_mask, write_feature_file,
    write_features, FeatureWriter, MAGIC as FEATURE_MAGIC,
};
pub use manifest::{parse_manifest, read_manifest, write_manifest, ManifestEntry};
pub use prototypes::{
    decode_prototypes, encode_prototypes, read_prototypes_file, write_prototypes_file, MAGIC as PROTOTYPE_MAGIC,
};
pub(crate) use sampling::choose_sorted;
pub use sampling::{bank_from_ids, sample_class_prompts, sample_prompts, BankScope};
pub use types::{FeatureDims, FeatureRecord, FeatureSet, Mask, PatchGrid, PromptBank, TextPrototypes};
