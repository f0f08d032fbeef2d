//! Categorical diffusion view of next-scale prediction.
//!
//! [`TransitionMatrix`], [`forward_step`] and [`cumulative`] are the generic
//! discrete forward process. [`masking_forward`] is the absorbing process
//! that turns left-to-right autoregression into a diffusion, and
//! [`kl_decomposition`] splits its per-step KL term per position.
//!
//! For the multi-scale generator the forward process is the deterministic
//! coarsening of the token pyramid, so each reverse step has a single
//! possible predecessor. The prior and reconstruction terms of the bound are
//! then constants and are omitted: [`sdd_loss`] is the sum of one-step
//! cross-entropies and [`var_loss`] the teacher-forced likelihood of one
//! joint pass. Both are reported as a mean over all tokens, so under the
//! Markovian mask they agree exactly.

mod loss;
mod masking;
mod transition;

pub use loss::{cross_entropy_sum, sdd_loss, var_loss, var_loss_with_mask};
pub use masking::{kl_decomposition, masking_forward, MaskingState};
pub use transition::{cumulative, forward_step, TransitionMatrix};
