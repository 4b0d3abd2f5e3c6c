//! Desk-scale toolkit for fine-tuning sequence-to-sequence reformulation
//! models with reinforcement learning against black-box reward environments.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: dense tensors with tape-based reverse-mode autodiff
//! - [`text`]: vocabulary, task-prefixed encoding, padding and masking
//! - [`model`]: a small GRU encoder-decoder policy with dot-product
//!   attention and greedy / sampled / beam decoding
//! - [`objectives`]: MLE, the REINFORCE surrogate with mean / critic /
//!   self-critical baselines, entropy and unlikelihood regularizers
//! - [`rewards`]: token-level F1 QA, fluency, composite rewards and a
//!   hierarchical intent-classification environment
//! - [`wellformedness`]: a 6-way query well-formedness rating model
//! - [`training`]: the supervised and RL loops, evaluation, checkpoints
//!   and reward-curve CSV export
//! - [`synth`]: seeded synthetic corpora for experiments and tests

pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rewards;
pub mod synth;
pub mod text;
pub mod training;
pub mod wellformedness;

mod serialize;

pub use model::{ModelConfig, Seq2SeqParams, Trajectory};
pub use numerics::{finite_diff_grad, Tape, Tensor};
pub use objectives::CriticParams;
pub use rewards::{token_f1, RewardEnvironment};
pub use text::Vocabulary;
pub use training::{train_rl, train_supervised, Algorithm, RunLog, TrainConfig};
pub use wellformedness::{wf_score, wf_train, Rating, WfModel};
