//! Synthetic imbalanced benchmarks, preference records on disk, and the
//! optional chat-completion client for generated rejections.

pub mod llm;
pub mod manifest;
pub mod records;
pub mod synthetic;

pub use llm::{llm_generate_rejections, ChatTransport, LlmConfig, TransportError};
pub use manifest::{check_manifest, load_dataset, write_manifest, LoadedDataset, Manifest};
pub use records::{load_validate_jsonl, write_jsonl, PreferenceRecord, RejectionSource};
pub use synthetic::{generate_synthetic, RejectionMode, SyntheticSpec, TaskSpec};
