//! Parametric families: MLP and CNN critics, coupling flows, and the VAE
//! density proxy used by the generative estimator on images.

mod checkpoint;
pub mod common;
mod critics;
mod flow;
mod vae;

pub use checkpoint::{load_params, save_params};
pub use common::{Dense, Mlp};
pub use critics::{ConvCritic, ConvCriticConfig, ConvTrunk, Critic, JointCritic, SeparableCritic};
pub use flow::{CouplingLayer, FlowModel};
pub use vae::{bernoulli_log_likelihood, gaussian_kl_to_standard, VaeModel};
