//! Dynamic emotion-prototype learning and emotion-conditioned guidance.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] and [`rng`]: vector kernels and the seeded generator.
//! * [`bank`]: the prototype store with merge/split adaptation.
//! * [`fusion`]: categorical head and gated visual/text fusion.
//! * [`training`]: composite loss, analytic gradients, Adam and the epoch loop.
//! * [`mapper`]: the small MLP bridging embedding spaces.
//! * [`guidance`]: multi-prototype guidance, temporal blending and attention reweighting.
//! * [`refine`]: iterative prompt refinement over pluggable oracles.
//! * [`data`]: synthetic data and the binary container formats.
//! * [`stats`]: agreement and rank statistics.

pub mod bank;
pub mod data;
pub mod error;
pub mod fusion;
pub mod guidance;
pub mod linalg;
pub mod mapper;
pub mod refine;
pub mod rng;
pub mod stats;
pub mod training;

pub use bank::{MergeReport, PrototypeBank, SplitReport};
pub use error::{EmoError, Result};
pub use fusion::{FusionConfig, FusionNet};
pub use linalg::Mat;
pub use rng::Rng;
