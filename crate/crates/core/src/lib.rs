//! Binary prefix policy optimization (BPPO) and a GRPO baseline on tiny
//! multi-exit decoder policies trained against exact verifiers.

pub mod analysis;
pub mod curation;
pub mod numerics;
pub mod objective;
pub mod policy;
pub mod rollout;
pub mod seeding;
pub mod tasks;
pub mod trainer;
