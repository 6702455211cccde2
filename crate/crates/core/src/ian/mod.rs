//! Introspective adversarial network: a VAE/GAN hybrid whose encoder is a
//! dense head on the discriminator's final conv features.

pub mod fit;
pub mod losses;
pub mod model;
pub mod train;

pub use model::{Bound, FeatureStack, IanModel, MdcMode, Mode, ModelConfig, Posterior, GENERATED, REAL, RECONSTRUCTED};
pub use train::{objective, step_gradients, step_noise, LossReport, LossWeights, Objective, StepGradients, TrainConfig, Trainer};
pub use fit::{epoch_order, fit, recalibrate_norms, FitOptions};
