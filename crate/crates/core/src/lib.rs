//! Non-destructive collaborative knowledge editing on synthetic linear
//! associative-memory layers.
//!
//! A layer is a dense map `W` that stores key→value associations. Clients
//! compute closed-form local edits and share only `(Δ, K·Kᵀ)` pairs; the
//! server recombines them into exactly the edit a joint pass over all
//! requests would have produced. On top of that sit destructive merge
//! baselines (simple average, task arithmetic, TIES), harnesses for the
//! overlap / conflict / forgetting intervention studies, and a numerical
//! check of the Gram-sharing privacy argument.

pub mod collab;
pub mod config;
pub mod editor;
pub mod error;
pub mod eval;
pub mod interventions;
pub mod knowledge;
pub mod linalg;
pub mod privacy;
pub mod wire;

pub use error::{Error, Result};
pub use linalg::Matrix;
