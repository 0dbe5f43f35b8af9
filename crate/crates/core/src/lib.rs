//! Differentiable Fisher-vector aggregation.
//!
//! Local descriptors are softly assigned to the components of a diagonal
//! GMM, aggregated into a per-cluster first-order statistic and
//! L2-normalized. Every step has a closed-form derivative, so the GMM and a
//! descriptor-producing backbone can be trained end to end in a Siamese
//! configuration under a contrastive loss. The crate also provides EM
//! initialization, PCA/LDA whitening, baseline pooling and retrieval
//! evaluation.

pub mod descriptors;
pub mod em;
pub mod error;
pub mod fisher;
pub mod gmm;
pub mod grad;
pub mod gradcheck;
pub mod harness;
pub mod instances;
pub mod io;
pub mod manifest;
pub mod projection;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use descriptors::LocalDescriptorSet;
pub use error::{Error, Result};
pub use fisher::{fv_encode, fv_normalize, fv_unnormalized, posterior, AssignmentMatrix, FisherVector};
pub use gmm::{GmmModel, PosteriorMode};
pub use grad::{fv_gradients, fv_input_grads, fv_param_grads, normalized_chain, tau_partials, FvGradients};
pub use gradcheck::{finite_diff_check, GradCheckReport};
