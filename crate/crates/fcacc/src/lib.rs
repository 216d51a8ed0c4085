//! Fuzzy cluster-aware contrastive clustering (FCACC) for univariate time series.
//!
//! The pipeline couples three pieces:
//!
//! * a three-view crop/perturb augmentation with an aligned overlap region,
//!   encoded by a shared dilated-convolution backbone ([`augment`], [`encoder`]);
//! * temperature-free time-level and instance-level contrastive losses with
//!   mixed "universum" hard negatives at both levels ([`contrast`]);
//! * fuzzy c-means over pooled instance embeddings, whose high-confidence
//!   members steer positive/negative pair selection ([`fuzzy`]).
//!
//! Training runs in two stages ([`trainer`]): contrastive pretraining with
//! cluster-agnostic pairs, then joint optimization where the clustering is
//! refreshed once per epoch and feeds back into the contrastive objective.
//!
//! Gradients come from a small reverse-mode tape in [`autodiff`], generic over
//! `f32`/`f64` so training runs in single precision while gradient checks and
//! bit-exact resume tests run in double precision.

pub mod augment;
pub mod autodiff;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fuzzy;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
