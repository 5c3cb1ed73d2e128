//! Adaptive token routing for memory-efficient vision-transformer matting.
//!
//! Every transformer block carries a router that scores each token, a
//! batch-constrained decision step that sends informative tokens to global
//! attention and the rest to a lightweight refinement branch, and a merge
//! that writes both branches back in place. Training pairs a matting loss
//! with feature distillation from a routing-free teacher and a penalty that
//! holds the fraction of attended tokens near a target ratio.
//!
//! The crate brings its own small reverse-mode autodiff engine ([`Graph`])
//! so that every piece, including the straight-through routing gradient, can
//! be checked against finite differences in `f64`.

pub mod attention;
pub mod autograd;
pub mod batr;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod ltrm;
pub mod matting;
pub mod netpbm;
pub mod params;
pub mod rng;
pub mod router;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{AnyTensor, DType, Element, Tensor};
