//! Fairness-aware direct preference optimization for continual learning.
//!
//! The crate works on exact linear-softmax policies over a finite answer
//! vocabulary, so every loss, gradient and divergence is computed in closed
//! form. It is organised bottom-up:
//!
//! - [`policy`]: softmax policies, checkpoints and the closed-form Boltzmann optimum.
//! - [`objectives`]: SFT, KD, DPO and focal (fair) DPO losses with exact gradients.
//! - [`fairness`]: group-wise gradient decomposition and the imbalance bias vector.
//! - [`bounds`] and [`transport`]: exact divergences and numerical checks of the
//!   KL-versus-DPO-loss bound chains.
//! - [`trainer`]: sequential task training, evaluation and continual-learning metrics.
//! - [`data`]: synthetic imbalanced benchmarks, JSONL persistence and the
//!   optional chat-completion client for rejected answers.
//!
//! Data-parallel inner loops go through [`par`]; with the `parallel` feature
//! disabled they run sequentially and produce bit-identical results.

pub mod bounds;
pub mod data;
pub mod dist;
pub mod error;
pub mod fairness;
pub mod io;
pub mod objectives;
pub mod par;
pub mod policy;
pub mod trainer;
pub mod transport;

pub use dist::FiniteDistribution;
pub use error::{Error, Result};
pub use fairness::{GroupPartition, ModulatorForm};
pub use objectives::{ObjectiveConfig, PreferenceTriple};
pub use par::Exec;
pub use policy::{ContextFeatures, PolicySnapshot, Vocabulary};
