//! Non-identical diffusion: diffusion models whose noise level is an
//! element-wise time matrix rather than a scalar.
//!
//! The crate covers the schedule and stepping rules ([`schedule`]), the
//! forward/reverse algebra and generation loop ([`diffusion`]), analytic
//! oracles used to check the process without a learned model ([`oracle`]),
//! an MLP-Mixer denoiser with hand-written gradients ([`backbone`]), a
//! synthetic MIMO-OFDM channel harness ([`channel`]), training ([`trainer`])
//! and the command-line front end ([`cli`]).

pub mod backbone;
pub mod channel;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
