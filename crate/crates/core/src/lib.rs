//! Clipped policy-gradient objectives (PPO-clip, token-level GRPO,
//! Clip-Higher, GPPO, general-form GPPO and CISPO) with hand-derived
//! gradients, together with the reward tasks, data-curation filters and
//! training loop used to compare them on small verifiable-reward problems.

pub mod curation;
pub mod envs;
pub mod gradcheck;
pub mod numerics;
pub mod objectives;
pub mod policy;
pub mod trainer;

pub use envs::{Difficulty, RewardMode, TaskKind, TaskSpec, Token};
pub use numerics::SeededRng;
pub use objectives::{ClipConfig, Group, Method, Normalization, TokenGradRecord};
pub use policy::{Checkpoint, PolicyModel, Trajectory};
