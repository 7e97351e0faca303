//! Self-distillation token rewards and contrastive credit on exactly
//! enumerable tabular worlds.
//!
//! Every marginal, posterior, and mutual information is computed by
//! enumeration, so the information-theoretic identities behind the rewards can
//! be checked to floating-point precision rather than estimated.
//!
//! ```
//! use credit_lab::world::w_last;
//!
//! let world = w_last();
//! // Feedback reveals the last token, so a full-length prefix pins it down.
//! assert_eq!(world.feedback_marginal(0, &[1, 0, 1]).unwrap(), vec![0.0, 1.0]);
//! ```

pub mod causal;
pub mod compat;
pub mod error;
pub mod identities;
pub mod index;
pub mod policy;
pub mod prob;
pub mod report;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use index::Dims;
pub use policy::{PolicyParams, ReferenceState, Teacher, TeacherMode};
pub use reward::{Baseline, RewardContext, RewardEngine, RewardField};

pub use world::{Trajectory, WorldSpec};

// The guide's snippets run as doctests so they cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/worlds.md")]
    pub struct Worlds;
    #[doc = include_str!("../../../book/src/rewards.md")]
    pub struct Rewards;
    #[doc = include_str!("../../../book/src/identities.md")]
    pub struct Identities;
    #[doc = include_str!("../../../book/src/compat.md")]
    pub struct Compat;
    #[doc = include_str!("../../../book/src/causal.md")]
    pub struct Causal;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
