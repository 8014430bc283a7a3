//! Few-shot classification with group-relative policy optimization and
//! verifiable rule-based rewards, at desk scale.
//!
//! A small differentiable autoregressive policy generates tagged
//! `<think>…</think><answer>…</answer>` responses to classification
//! questions. A rule-based verifier scores each response (accuracy +
//! format), groups of responses are normalized into advantages, and the
//! policy is updated with an exact-gradient GRPO objective that includes
//! a KL anchor to a frozen reference. A supervised fine-tuning baseline,
//! k-shot episode splits, synthetic task generation, sweeps, and a CLI
//! round out the training workbench.
//!
//! See the book under `book/` for a guided tour; its code snippets run
//! as doctests from this crate.
//!
//! ```
//! use favor::fewshot::{generate_synthetic_task, split_few_shot};
//! use favor::grpo::{FreezeMask, GrpoConfig};
//! use favor::policy::PolicyShape;
//! use favor::train::{evaluate, init_policy, train_grpo, PolicyInit};
//! use favor::vocab::Vocabulary;
//!
//! let task = generate_synthetic_task(3, 4, 6, 0.1, 4)?;
//! let vocab = Vocabulary::default();
//! let shape = PolicyShape::new(vocab.size(), task.feature_dim(), 12)?;
//! let split = split_few_shot(&task, 2, 4)?;
//!
//! let config = GrpoConfig {
//!     group_size: 4,
//!     batch_size: 4,
//!     gradient_accumulation_steps: 2,
//!     training_steps: 2,
//!     learning_rate: 0.01,
//!     ..GrpoConfig::default()
//! };
//! let initial = init_policy(&PolicyInit::Primed, &shape, &vocab, task.num_classes(), 7)?;
//! let outcome = train_grpo(&task, &vocab, &split, &config, &initial, 7, &FreezeMask::none())?;
//! assert_eq!(outcome.metrics.len(), 2);
//!
//! let report = evaluate(&outcome.params, &vocab, &task, &split.test_ids, &config.decoding())?;
//! assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
//! # Ok::<(), favor::Error>(())
//! ```

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod fewshot;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};

/// The book's code snippets compile and run with `cargo test --doc`,
/// keeping the guide in sync with the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(policy, "../../../book/src/policy.md");
    chapter!(rewards, "../../../book/src/rewards.md");
    chapter!(grpo, "../../../book/src/grpo.md");
    chapter!(fewshot, "../../../book/src/fewshot.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(cli, "../../../book/src/cli.md");
}
