//! Continual-learning engine built around low-rank adapters.
//!
//! Three adapter kinds sit beside a frozen backbone layer: plain LoRA, a
//! densely gated mixture of LoRA experts, and a branch variant that shares a
//! single down-projection across sparse top-k gated up-projection experts with
//! one router per task. A tuning-freezing policy pins the most used branches
//! after each task, and learned per-task keys pick the right router at test
//! time. The [`harness`] trains all of these over synthetic task streams and
//! reports ACC / MAA / BWT.

pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod parallel;
pub mod routing;
pub mod selector;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
