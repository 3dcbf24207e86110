//! Neural dueling bandits.
//!
//! A small ReLU network `h(x; θ)` is fitted to pairwise preference feedback
//! (or to binary feedback) under the Bradley-Terry-Luce model, and arms are
//! chosen by UCB or Thompson-sampling rules whose widths come from the
//! network's gradient features.
//!
//! * [`env`]: synthetic reward functions, contexts and feedback samplers.
//! * [`net`]: the reward network, its gradients, training and checkpoints.
//! * [`uncertainty`]: precision matrices, confidence widths and `ν`.
//! * [`policy`]: arm-selection rules.
//! * [`harness`]: the online loop, repetitions, summaries and output files.

pub mod env;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod policy;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
